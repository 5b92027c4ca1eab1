//! Model-size by data-size training grids and the two-term power-law fit
//! `L(N, D) = C_N·N^-α + C_D·D^-β + L0`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{SampleSource, VocabSizes, WindowedSample};
use crate::net::{count_params, init_model, ModelConfig};
use crate::tensor::Precision;
use crate::trainer::{mix, train, TrainConfig};
use crate::{Error, Result};

/// Architecture of one grid row; vocabulary and window length come from the
/// corpus at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub name: String,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_hidden: usize,
    pub ffn_mult: usize,
}

impl ModelShape {
    pub fn new(name: &str, d: usize, n_layers: usize, n_heads: usize, head_hidden: usize, ffn_mult: usize) -> Self {
        Self {
            name: name.to_string(),
            d,
            n_layers,
            n_heads,
            head_hidden,
            ffn_mult,
        }
    }

    pub fn config(&self, vocab: VocabSizes, max_len: usize, dropout: f64) -> ModelConfig {
        ModelConfig {
            d: self.d,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_len,
            head_hidden: self.head_hidden,
            ffn_mult: self.ffn_mult,
            vocab,
            dropout,
            precision: Precision::Single,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub models: Vec<ModelShape>,
    /// Data sizes as multiples of each model's parameter count, measured in
    /// supervised target tokens.
    pub data_multiples: Vec<f64>,
    pub window_len: usize,
    #[serde(default)]
    pub dropout: f64,
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

impl GridSpec {
    fn with_models(models: Vec<ModelShape>, window_len: usize) -> Self {
        let train = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 32,
            max_steps: None,
            max_epochs: Some(20),
            eval_every: 100,
            patience: Some(8),
            dropout: false,
            ..TrainConfig::default()
        };
        Self {
            models,
            data_multiples: vec![1.0, 2.0, 3.0, 5.0, 7.0, 10.0],
            window_len,
            dropout: 0.0,
            train,
            seed: 0,
        }
    }

    /// A few thousand to a few tens of thousands of parameters; runs on a
    /// single core in minutes.
    pub fn tiny() -> Self {
        Self::with_models(
            vec![
                ModelShape::new("s", 4, 1, 2, 0, 2),
                ModelShape::new("m", 6, 1, 2, 0, 2),
                ModelShape::new("l", 8, 2, 2, 0, 2),
            ],
            8,
        )
    }

    /// Roughly 0.05M, 0.4M and 2M parameters.
    pub fn desk() -> Self {
        let mut s = Self::with_models(
            vec![
                ModelShape::new("small", 8, 3, 4, 64, 4),
                ModelShape::new("medium", 32, 2, 4, 128, 4),
                ModelShape::new("large", 48, 4, 8, 192, 4),
            ],
            32,
        );
        s.train.learning_rate = 1e-3;
        s
    }

    /// Roughly 0.4M, 8M and 24M parameters.
    pub fn large() -> Self {
        let mut s = Self::with_models(
            vec![
                ModelShape::new("small", 32, 2, 4, 128, 4),
                ModelShape::new("medium", 96, 4, 8, 384, 4),
                ModelShape::new("large", 128, 7, 8, 512, 4),
            ],
            64,
        );
        s.train.learning_rate = 1e-4;
        s
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "desk" => Ok(Self::desk()),
            "large" => Ok(Self::large()),
            other => Err(Error::InvalidConfig(format!("unknown grid preset `{other}` (tiny, desk, large)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::InvalidConfig("grid has no models".into()));
        }
        if self.data_multiples.is_empty() || self.data_multiples.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::InvalidConfig("data_multiples must be positive".into()));
        }
        if self.data_multiples.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("data_multiples must be strictly increasing".into()));
        }
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("grid spec serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Parse(format!("grid spec: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    /// Number of leading training windows used by a cell.
    pub fn windows_for(&self, n_params: usize, multiple: f64) -> usize {
        ((n_params as f64 * multiple) / self.window_len as f64).ceil() as usize
    }
}

/// First `n` samples of another source.
pub struct Prefix<'a> {
    inner: &'a dyn SampleSource,
    n: usize,
}

impl<'a> Prefix<'a> {
    pub fn new(inner: &'a dyn SampleSource, n: usize) -> Self {
        Self {
            inner,
            n: n.min(inner.len()),
        }
    }
}

impl SampleSource for Prefix<'_> {
    fn len(&self) -> usize {
        self.n
    }

    fn window_len(&self) -> usize {
        self.inner.window_len()
    }

    fn get(&self, idx: usize) -> WindowedSample {
        assert!(idx < self.n, "prefix index {idx} >= {}", self.n);
        self.inner.get(idx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub model: String,
    pub n_params: usize,
    pub d_tokens: usize,
    pub n_windows: usize,
    pub val_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridTable {
    pub rows: Vec<GridRow>,
}

impl GridTable {
    pub const HEADER: &'static str = "model,n_params,d_tokens,n_windows,val_loss,steps";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.model, r.n_params, r.d_tokens, r.n_windows, r.val_loss, r.steps);
        }
        s
    }

    /// Parses a grid CSV. Only `n_params`, `d_tokens` and `val_loss` are
    /// required; other known columns are optional.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| Error::Parse(format!("grid csv: {e}")))?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (Some(n_col), Some(d_col), Some(l_col)) = (col("n_params"), col("d_tokens"), col("val_loss")) else {
            return Err(Error::Parse(format!(
                "grid csv must have columns n_params, d_tokens, val_loss; found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        };
        let (m_col, w_col, s_col) = (col("model"), col("n_windows"), col("steps"));
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse(format!("grid csv line {line}: {e}")))?;
            let field = |c: usize| rec.get(c).ok_or_else(|| Error::Parse(format!("grid csv line {line}: missing column {c}")));
            let num = |c: usize| -> Result<f64> {
                let v = field(c)?;
                v.parse::<f64>().map_err(|_| Error::Parse(format!("grid csv line {line}: `{v}` is not a number")))
            };
            let opt = |c: Option<usize>| -> Result<usize> { c.map_or(Ok(0.0), num).map(|v| v as usize) };
            rows.push(GridRow {
                model: m_col.map(|c| field(c).map(str::to_string)).transpose()?.unwrap_or_default(),
                n_params: num(n_col)? as usize,
                d_tokens: num(d_col)? as usize,
                n_windows: opt(w_col)?,
                val_loss: num(l_col)?,
                steps: opt(s_col)?,
            });
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    pub fn points(&self) -> Vec<ScalingPoint> {
        self.rows
            .iter()
            .map(|r| ScalingPoint {
                n: r.n_params as f64,
                d: r.d_tokens as f64,
                loss: r.val_loss,
            })
            .collect()
    }

    /// Largest loss increase between consecutive data sizes of one model;
    /// zero or negative when every model's loss falls with data.
    pub fn max_loss_increase(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        let mut models: Vec<&str> = self.rows.iter().map(|r| r.model.as_str()).collect();
        models.dedup();
        for m in models {
            let mut rows: Vec<&GridRow> = self.rows.iter().filter(|r| r.model == m).collect();
            rows.sort_by_key(|r| r.d_tokens);
            for w in rows.windows(2) {
                worst = worst.max(w[1].val_loss - w[0].val_loss);
            }
        }
        worst
    }
}

/// Trains every (model, data size) cell. Cell data is a prefix of `train`,
/// so smaller cells see a subset of larger ones. The recorded loss is the
/// best validation loss reached under early stopping.
pub fn run_grid(
    spec: &GridSpec,
    vocab: VocabSizes,
    train_data: &dyn SampleSource,
    val_data: &dyn SampleSource,
    mut progress: impl FnMut(&GridRow),
) -> Result<GridTable> {
    spec.validate()?;
    if train_data.window_len() != spec.window_len && !train_data.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "grid window length {} but corpus windows have length {}",
            spec.window_len,
            train_data.window_len()
        )));
    }
    let mut table = GridTable::default();
    for (mi, shape) in spec.models.iter().enumerate() {
        let config = shape.config(vocab, spec.window_len, spec.dropout);
        let n_params = count_params(&config).total();
        for (di, &mult) in spec.data_multiples.iter().enumerate() {
            let n_windows = spec.windows_for(n_params, mult);
            if n_windows > train_data.len() {
                return Err(Error::InvalidConfig(format!(
                    "model `{}` at {mult}N needs {n_windows} windows, corpus has {}",
                    shape.name,
                    train_data.len()
                )));
            }
            let cell_seed = mix(spec.seed, (mi * 1000 + di) as u64);
            let params = init_model::<f32>(&config, cell_seed)?;
            let mut cfg = spec.train.clone();
            cfg.seed = cell_seed;
            cfg.out_dir = None;
            cfg.diagnostics_path = None;
            let subset = Prefix::new(train_data, n_windows);
            let outcome = train(params, &subset, val_data, &cfg)?;
            let row = GridRow {
                model: shape.name.clone(),
                n_params,
                d_tokens: n_windows * spec.window_len,
                n_windows,
                val_loss: outcome.log.best_val_loss,
                steps: outcome.log.steps_run,
            };
            progress(&row);
            table.rows.push(row);
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingPoint {
    pub n: f64,
    pub d: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub c_n: f64,
    pub alpha: f64,
    pub c_d: f64,
    pub beta: f64,
    pub l0: f64,
    pub rss: f64,
    /// Measured minus fitted loss per input point.
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub starts_converged: usize,
}

impl FitResult {
    pub fn residual_rms(&self) -> f64 {
        (self.rss / self.residuals.len().max(1) as f64).sqrt()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("param,value\n");
        for (k, v) in [
            ("c_n", self.c_n),
            ("alpha", self.alpha),
            ("c_d", self.c_d),
            ("beta", self.beta),
            ("l0", self.l0),
            ("rss", self.rss),
            ("residual_rms", self.residual_rms()),
        ] {
            let _ = writeln!(s, "{k},{v}");
        }
        let _ = writeln!(s, "converged,{}", self.converged);
        s
    }
}

pub fn predict_loss(fit: &FitResult, n: f64, d: f64) -> f64 {
    fit.c_n * n.powf(-fit.alpha) + fit.c_d * d.powf(-fit.beta) + fit.l0
}

// θ = ln(C_N, α, C_D, β, L0)
fn eval(theta: &[f64; 5], p: &ScalingPoint) -> (f64, [f64; 5]) {
    let [c_n, a, c_d, b, l0] = theta.map(f64::exp);
    let (ln_n, ln_d) = (p.n.ln(), p.d.ln());
    let tn = c_n * (-a * ln_n).exp();
    let td = c_d * (-b * ln_d).exp();
    (tn + td + l0, [tn, -tn * ln_n * a, td, -td * ln_d * b, l0])
}

fn rss_of(theta: &[f64; 5], pts: &[ScalingPoint]) -> f64 {
    pts.iter().map(|p| (eval(theta, p).0 - p.loss).powi(2)).sum()
}

/// Solves a symmetric positive system by Cholesky; `None` if not positive.
fn cholesky_solve(a: &[[f64; 5]; 5], b: &[f64; 5]) -> Option<[f64; 5]> {
    let mut l = [[0.0; 5]; 5];
    for i in 0..5 {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; 5];
    for i in 0..5 {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = [0.0; 5];
    for i in (0..5).rev() {
        x[i] = (y[i] - (i + 1..5).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

const MAX_ITERS: usize = 2000;

/// Levenberg–Marquardt from one start. Returns (θ, rss, converged).
fn levenberg_marquardt(mut theta: [f64; 5], pts: &[ScalingPoint]) -> ([f64; 5], f64, bool) {
    let mut rss = rss_of(&theta, pts);
    if !rss.is_finite() {
        return (theta, rss, false);
    }
    let mut lambda = 1e-3;
    for _ in 0..MAX_ITERS {
        let mut jtj = [[0.0; 5]; 5];
        let mut jtr = [0.0; 5];
        for p in pts {
            let (f, g) = eval(&theta, p);
            let r = f - p.loss;
            for i in 0..5 {
                jtr[i] += g[i] * r;
                for j in 0..5 {
                    jtj[i][j] += g[i] * g[j];
                }
            }
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for (i, row) in a.iter_mut().enumerate() {
                row[i] += lambda * (jtj[i][i] + 1e-12);
            }
            let neg: [f64; 5] = jtr.map(|v| -v);
            if let Some(step) = cholesky_solve(&a, &neg) {
                let mut cand = theta;
                for i in 0..5 {
                    cand[i] += step[i];
                }
                let c_rss = rss_of(&cand, pts);
                if c_rss.is_finite() && c_rss <= rss {
                    let small_step = step.iter().all(|s| s.abs() < 1e-12);
                    let small_gain = rss - c_rss <= 1e-15 * rss.max(1e-300);
                    theta = cand;
                    rss = c_rss;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if small_step || small_gain || rss < 1e-28 {
                        return (theta, rss, true);
                    }
                    break;
                }
            }
            lambda *= 4.0;
        }
        if !accepted {
            // no descent direction left at machine precision
            return (theta, rss, true);
        }
    }
    (theta, rss, false)
}

fn check_points(pts: &[ScalingPoint]) -> Result<()> {
    if pts.len() < 6 {
        return Err(Error::Fit(format!("need at least 6 points, got {}", pts.len())));
    }
    if let Some(p) = pts.iter().find(|p| !(p.n > 0.0 && p.d > 0.0 && p.loss.is_finite())) {
        return Err(Error::Fit(format!("invalid point {p:?}")));
    }
    let distinct = |f: fn(&ScalingPoint) -> f64| {
        let mut v: Vec<f64> = pts.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.len()
    };
    let (nn, nd) = (distinct(|p| p.n), distinct(|p| p.d));
    if nn < 2 || nd < 3 {
        return Err(Error::Fit(format!(
            "points span {nn} distinct N and {nd} distinct D; need at least 2 and 3"
        )));
    }
    Ok(())
}

/// Least-squares fit with a 3⁵ grid of log-spaced starting points. The
/// best start by residual sum of squares is returned; if no start
/// converged, the best attempt comes back inside [`Error::FitNotConverged`].
pub fn fit_points(pts: &[ScalingPoint]) -> Result<FitResult> {
    check_points(pts)?;
    let min_loss = pts.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
    let l0_base = if min_loss > 0.0 { min_loss } else { 1.0 };
    let scales = [0.1, 3.0, 100.0];
    let exps = [0.1, 0.4, 1.0];
    let l0s = [0.05, 0.5, 0.9];
    let mut best: Option<([f64; 5], f64, bool)> = None;
    let mut starts_converged = 0;
    for &c_n in &scales {
        for &a in &exps {
            for &c_d in &scales {
                for &b in &exps {
                    for &f in &l0s {
                        let start = [c_n, a, c_d, b, f * l0_base].map(f64::ln);
                        let (theta, rss, ok) = levenberg_marquardt(start, pts);
                        if ok {
                            starts_converged += 1;
                        }
                        if !rss.is_finite() {
                            continue;
                        }
                        // prefer converged runs; among equals, lower rss
                        let better = match &best {
                            None => true,
                            Some((_, brss, bok)) => (ok && !bok) || (ok == *bok && rss < *brss),
                        };
                        if better {
                            best = Some((theta, rss, ok));
                        }
                    }
                }
            }
        }
    }
    let (theta, rss, converged) = best.ok_or_else(|| Error::Fit("every start produced a non-finite loss".into()))?;
    let [c_n, alpha, c_d, beta, l0] = theta.map(f64::exp);
    let mut fit = FitResult {
        c_n,
        alpha,
        c_d,
        beta,
        l0,
        rss,
        residuals: Vec::new(),
        converged,
        starts_converged,
    };
    fit.residuals = pts.iter().map(|p| p.loss - predict_loss(&fit, p.n, p.d)).collect();
    if !converged {
        return Err(Error::FitNotConverged(Box::new(fit)));
    }
    Ok(fit)
}

pub fn fit_scaling_law(table: &GridTable) -> Result<FitResult> {
    fit_points(&table.points())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Allocation {
    pub n_opt: f64,
    pub d_opt: f64,
    pub ratio: f64,
}

/// Minimizes `C_N·N^-α + C_D·D^-β` subject to `N·D = budget`. From the
/// first-order condition `N^(α+β) = (α·C_N / (β·C_D))·budget^β`.
pub fn optimal_allocation(fit: &FitResult, budget: f64) -> Result<Allocation> {
    if !(fit.alpha > 0.0 && fit.beta > 0.0) {
        return Err(Error::Fit(format!(
            "degenerate fit (alpha = {}, beta = {}); both exponents must be positive",
            fit.alpha, fit.beta
        )));
    }
    if !(budget > 0.0) {
        return Err(Error::Fit(format!("budget must be positive, got {budget}")));
    }
    let s = fit.alpha + fit.beta;
    let ln_n = ((fit.alpha * fit.c_n).ln() - (fit.beta * fit.c_d).ln() + fit.beta * budget.ln()) / s;
    let n_opt = ln_n.exp();
    let d_opt = (budget.ln() - ln_n).exp();
    Ok(Allocation {
        n_opt,
        d_opt,
        ratio: (budget.ln() - 2.0 * ln_n).exp(),
    })
}

/// `D_opt / N_opt` at the given budget.
pub fn optimal_ratio(fit: &FitResult, budget: f64) -> Result<f64> {
    optimal_allocation(fit, budget).map(|a| a.ratio)
}

/// Measured points and the fitted curve (100 log-spaced D values per
/// model) as CSV: `series,model,n_params,d_tokens,loss`.
pub fn plot_data(table: &GridTable, fit: &FitResult) -> String {
    let mut s = String::from("series,model,n_params,d_tokens,loss\n");
    for r in &table.rows {
        let _ = writeln!(s, "measured,{},{},{},{}", r.model, r.n_params, r.d_tokens, r.val_loss);
    }
    let (lo, hi) = table
        .rows
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(r.d_tokens as f64), hi.max(r.d_tokens as f64)));
    let mut seen = Vec::new();
    for r in &table.rows {
        if seen.contains(&(&r.model, r.n_params)) {
            continue;
        }
        seen.push((&r.model, r.n_params));
        for i in 0..100 {
            let d = (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / 99.0).exp();
            let _ = writeln!(s, "fitted,{},{},{},{}", r.model, r.n_params, d, predict_loss(fit, r.n_params as f64, d));
        }
    }
    s
}
