//! Mini-batch training with Adam, evaluation, run logging and the
//! finite-difference gradient check.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SampleSource, WindowedSample};
use crate::evalkit::{confusion_metrics, ConfusionTally, RankedPrediction, WeightingVariant};
use crate::net::{self, argmax_rows, backward, forward, predict_topk, Dropout, FeatureBatch, ForwardOptions, ModelConfig, Parameters};
use crate::objective::{
    ce_loss_and_grad, dro_loss, plain_ce_loss, AbsentClassPolicy, ClassPrior, DiagnosticsWriter, DroConfig,
    EmaClassLosses, LossOutput, PriorSource,
};
use crate::tensor::Scalar;
use crate::{Error, Result};

/// Training objective: plain cross-entropy or the worst-case reweighted loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Ce,
    Dro(DroConfig),
}

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    64
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_eval_every() -> usize {
    100
}
fn default_patience() -> Option<usize> {
    Some(5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_epsilon: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Evaluations without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
    /// Cap on validation windows used at each evaluation (all if unset).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_eval_windows: Option<usize>,
    /// Use dropout from the model config during training.
    #[serde(default = "default_true")]
    pub dropout: bool,
    #[serde(default)]
    pub objective: Objective,
    /// Directory for `last.ckpt`, `best.ckpt` and `runlog.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Per-step robust-loss diagnostics CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics_path: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_steps: Some(1000),
            max_epochs: None,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_epsilon: default_adam_eps(),
            clip_norm: default_clip(),
            seed: 0,
            eval_every: default_eval_every(),
            patience: default_patience(),
            max_eval_windows: None,
            dropout: true,
            objective: Objective::Ce,
            out_dir: None,
            diagnostics_path: None,
        }
    }
}

pub const ENV_SEED: &str = "BFM_SEED";

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate >= 0.0) {
            return fail(format!("learning_rate {} must be non-negative", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.max_steps.is_some() == self.max_epochs.is_some() {
            return fail("set exactly one of max_steps and max_epochs".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail(format!("clip_norm {c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Applies `BFM_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(ENV_SEED) {
            self.seed = v
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{ENV_SEED}={v} is not an integer")))?;
        }
        Ok(())
    }

    fn total_steps(&self, n_train: usize) -> usize {
        match (self.max_steps, self.max_epochs) {
            (Some(s), _) => s,
            (None, Some(e)) => (e * n_train).div_ceil(self.batch_size),
            (None, None) => 0,
        }
    }
}

/// One row per evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLogRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_recall_macro: f64,
    pub val_recall_weighted: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub rows: Vec<RunLogRow>,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub steps_run: usize,
    pub stopped_early: bool,
}

impl RunLog {
    pub const HEADER: &'static str = "step,train_loss,val_loss,val_recall_macro,val_recall_weighted,wall_time";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.3}",
                r.step, r.train_loss, r.val_loss, r.val_recall_macro, r.val_recall_weighted, r.wall_time
            );
        }
        s
    }

    /// Everything but the wall-clock column, for reproducibility checks.
    pub fn deterministic_part(&self) -> Vec<(usize, u64, u64, u64, u64)> {
        self.rows
            .iter()
            .map(|r| {
                (
                    r.step,
                    r.train_loss.to_bits(),
                    r.val_loss.to_bits(),
                    r.val_recall_macro.to_bits(),
                    r.val_recall_weighted.to_bits(),
                )
            })
            .collect()
    }

    pub fn summary(&self) -> String {
        format!(
            "steps_run={}\nbest_step={}\nbest_val_loss={}\nstopped_early={}\n",
            self.steps_run, self.best_step, self.best_val_loss, self.stopped_early
        )
    }
}

/// Which parameters the optimizer may change. Frozen tensors and frozen
/// elements are never written.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainMask {
    pub frozen: BTreeSet<String>,
    /// Element-level freeze (`true` = frozen) for partially trainable tensors.
    pub frozen_elements: BTreeMap<String, Vec<bool>>,
}

impl TrainMask {
    pub fn all_trainable() -> Self {
        Self::default()
    }

    pub fn all_frozen<T>(params: &Parameters<T>) -> Self {
        Self {
            frozen: params.tensors.keys().cloned().collect(),
            frozen_elements: BTreeMap::new(),
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }
}

struct Adam<T> {
    m: Parameters<T>,
    v: Parameters<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(params: &Parameters<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Parameters<T>, grads: &Parameters<T>, cfg: &TrainConfig, mask: &TrainMask) {
        self.t += 1;
        let b1 = T::from_f64_lossy(cfg.beta1);
        let b2 = T::from_f64_lossy(cfg.beta2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(self.t));
        let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(self.t));
        let lr = T::from_f64_lossy(cfg.learning_rate);
        let eps = T::from_f64_lossy(cfg.adam_epsilon);
        for (name, p) in params.tensors.iter_mut() {
            if mask.is_frozen(name) {
                continue;
            }
            let elem = mask.frozen_elements.get(name);
            let g = &grads.get(name).data;
            let m = &mut self.m.get_mut(name).data;
            let v = &mut self.v.get_mut(name).data;
            for i in 0..p.data.len() {
                if elem.is_some_and(|e| e[i]) {
                    continue;
                }
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

fn batch_of(samples: &[WindowedSample]) -> (FeatureBatch, Vec<u32>) {
    let batch = FeatureBatch::from_samples(samples);
    let targets = samples.iter().flat_map(|s| s.targets.iter().copied()).collect();
    (batch, targets)
}

/// Class prior from the targets of every window in `source`.
pub fn corpus_prior(source: &dyn SampleSource, n_classes: usize) -> Result<ClassPrior> {
    let mut counts = vec![0u64; n_classes];
    for i in 0..source.len() {
        for &t in &source.get(i).targets {
            counts[t as usize] += 1;
        }
    }
    ClassPrior::from_counts(counts, PriorSource::Corpus)
}

/// Evaluates an objective on a batch of logits, returning the loss and the
/// logit gradient.
pub fn objective_loss<T: Scalar>(
    objective: &Objective,
    logits: &[T],
    n_classes: usize,
    targets: &[u32],
    prior: Option<&ClassPrior>,
    ema: Option<&EmaClassLosses>,
) -> Result<LossOutput> {
    match objective {
        Objective::Ce => Ok(ce_loss_and_grad(logits, n_classes, targets)),
        Objective::Dro(cfg) => {
            let batch_prior;
            let prior = match (cfg.prior_source, prior) {
                (PriorSource::Corpus, Some(p)) => p,
                _ => {
                    batch_prior = ClassPrior::from_targets(targets, n_classes, PriorSource::Batch)?;
                    &batch_prior
                }
            };
            dro_loss(logits, n_classes, targets, prior, cfg, ema)
        }
    }
}

/// Per-position losses, argmax predictions and targets over a dataset,
/// in order.
pub struct EvalPass {
    pub losses: Vec<f64>,
    pub predictions: Vec<u32>,
    pub targets: Vec<u32>,
}

pub fn eval_pass<T: Scalar>(params: &Parameters<T>, data: &dyn SampleSource, batch_size: usize, limit: Option<usize>) -> Result<EvalPass> {
    Ok(eval_pass_inner(params, data, batch_size, limit, None)?.0)
}

/// [`eval_pass`] plus the top-`k` ranked behaviors at every position.
pub fn ranked_pass<T: Scalar>(
    params: &Parameters<T>,
    data: &dyn SampleSource,
    batch_size: usize,
    k: usize,
) -> Result<(EvalPass, Vec<RankedPrediction>)> {
    eval_pass_inner(params, data, batch_size, None, Some(k))
}

fn eval_pass_inner<T: Scalar>(
    params: &Parameters<T>,
    data: &dyn SampleSource,
    batch_size: usize,
    limit: Option<usize>,
    top_k: Option<usize>,
) -> Result<(EvalPass, Vec<RankedPrediction>)> {
    let n = limit.map_or(data.len(), |l| l.min(data.len()));
    let nb = params.config.vocab.n_b;
    let mut out = EvalPass {
        losses: Vec::new(),
        predictions: Vec::new(),
        targets: Vec::new(),
    };
    let mut ranked = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size.max(1)).min(n);
        let samples: Vec<WindowedSample> = (start..end).map(|i| data.get(i)).collect();
        let (batch, targets) = batch_of(&samples);
        let trace = forward(params, &batch, ForwardOptions::inference())?;
        let (_, losses) = plain_ce_loss(&trace.logits, nb, &targets);
        if let Some(k) = top_k {
            for (row, &actual) in predict_topk(&trace, k)?.into_iter().zip(&targets) {
                ranked.push(RankedPrediction {
                    actual,
                    ranked: row.into_iter().map(|(b, _)| b).collect(),
                });
            }
        }
        out.losses.extend(losses);
        out.predictions.extend(argmax_rows(&trace));
        out.targets.extend(targets);
        start = end;
    }
    Ok((out, ranked))
}

/// Mean objective over every position of every window in `data`. For the
/// robust objective the class weights are computed over the whole set.
pub fn evaluate_loss<T: Scalar>(params: &Parameters<T>, data: &dyn SampleSource, objective: &Objective) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let pass = eval_pass(params, data, 64, None)?;
    let nb = params.config.vocab.n_b;
    match objective {
        Objective::Ce => Ok(pass.losses.iter().sum::<f64>() / pass.losses.len() as f64),
        Objective::Dro(cfg) => {
            let (class_losses, present) = crate::objective::per_class_loss(&pass.losses, &pass.targets, nb);
            let prior = ClassPrior::from_targets(&pass.targets, nb, PriorSource::Batch)?;
            let mut cfg = cfg.clone();
            cfg.absent_class_policy = AbsentClassPolicy::RenormalizePresent;
            let wc = crate::objective::worst_case_weights(&class_losses, &present, &prior, &cfg)?;
            Ok(wc.weights.iter().zip(&class_losses).map(|(w, l)| w * l).sum())
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters after the last step.
    pub params: Parameters<T>,
    /// Parameters at the best validation evaluation.
    pub best: Parameters<T>,
    pub log: RunLog,
}

pub(crate) fn mix(seed: u64, a: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn train<T: Scalar>(params: Parameters<T>, train_data: &dyn SampleSource, val_data: &dyn SampleSource, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_masked(params, train_data, val_data, cfg, &TrainMask::all_trainable())
}

/// Training loop honoring a freeze mask.
pub fn train_masked<T: Scalar>(
    mut params: Parameters<T>,
    train_data: &dyn SampleSource,
    val_data: &dyn SampleSource,
    cfg: &TrainConfig,
    mask: &TrainMask,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val_data.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    let nb = params.config.vocab.n_b;
    let n = train_data.len();
    let total = cfg.total_steps(n);
    let prior = match &cfg.objective {
        Objective::Dro(d) => {
            d.validate(nb)?;
            match d.prior_source {
                PriorSource::Corpus => Some(corpus_prior(train_data, nb)?),
                PriorSource::Batch => None,
            }
        }
        Objective::Ce => None,
    };
    let mut ema = match &cfg.objective {
        Objective::Dro(d) if d.absent_class_policy == AbsentClassPolicy::Ema => Some(EmaClassLosses::new(nb)),
        _ => None,
    };
    let mut diag = cfg.diagnostics_path.as_deref().map(DiagnosticsWriter::create).transpose()?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = u64::MAX;
    let mut log = RunLog {
        best_val_loss: f64::INFINITY,
        ..RunLog::default()
    };
    let mut best = params.clone();
    let mut since_best = 0usize;
    let mut running = (0.0f64, 0usize);
    let clock = Instant::now();
    let dropout_rate = if cfg.dropout { params.config.dropout } else { 0.0 };

    for step in 1..=total {
        let mut samples = Vec::with_capacity(cfg.batch_size);
        for i in 0..cfg.batch_size.min(n) {
            let k = (step - 1) * cfg.batch_size.min(n) + i;
            let e = (k / n) as u64;
            if e != epoch {
                epoch = e;
                order = (0..n).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, e)));
            }
            samples.push(train_data.get(order[k % n]));
        }
        let (batch, targets) = batch_of(&samples);
        let dropout = (dropout_rate > 0.0).then(|| Dropout {
            rate: dropout_rate,
            seed: mix(cfg.seed ^ 0xD809, step as u64),
        });
        let trace = forward(&params, &batch, ForwardOptions::training(dropout)).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
            other => other,
        })?;
        let out = objective_loss(&cfg.objective, &trace.logits, nb, &targets, prior.as_ref(), ema.as_ref())?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged { step, loss: out.loss });
        }
        if let (Some(state), Some(d), Objective::Dro(dc)) = (ema.as_mut(), &out.diagnostics, &cfg.objective) {
            state.update(&d.class_losses, &d.present, dc.ema_decay);
        }
        if let (Some(w), Some(d)) = (diag.as_mut(), &out.diagnostics) {
            w.write(step, d).map_err(|e| Error::io(cfg.diagnostics_path.clone().unwrap(), e))?;
        }
        running.0 += out.loss;
        running.1 += 1;

        let dlogits: Vec<T> = out.dlogits.iter().map(|&g| T::from_f64_lossy(g)).collect();
        let mut grads = backward(&trace, &params, &dlogits)?;
        for name in &mask.frozen {
            if let Some(t) = grads.tensors.get_mut(name) {
                t.data.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        if let Some(clip) = cfg.clip_norm {
            let norm = grads.global_norm();
            if norm > clip {
                let s = T::from_f64_lossy(clip / norm);
                for t in grads.tensors.values_mut() {
                    t.data.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        adam.step(&mut params, &grads, cfg, mask);
        log.steps_run = step;

        if step % cfg.eval_every == 0 || step == total {
            let pass = eval_pass(&params, val_data, 64, cfg.max_eval_windows)?;
            let val_loss = pass.losses.iter().sum::<f64>() / pass.losses.len() as f64;
            let tally = ConfusionTally::from_pairs(&pass.predictions, &pass.targets, nb);
            let m = confusion_metrics(&tally, WeightingVariant::PaperExact);
            log.rows.push(RunLogRow {
                step,
                train_loss: running.0 / running.1.max(1) as f64,
                val_loss,
                val_recall_macro: m.recall_macro,
                val_recall_weighted: m.recall_weighted,
                wall_time: clock.elapsed().as_secs_f64(),
            });
            running = (0.0, 0);
            if let Some(dir) = &cfg.out_dir {
                net::save_checkpoint(&params, &dir.join("last.ckpt"))?;
            }
            if val_loss < log.best_val_loss {
                log.best_val_loss = val_loss;
                log.best_step = step;
                best = params.clone();
                since_best = 0;
                if let Some(dir) = &cfg.out_dir {
                    net::save_checkpoint(&params, &dir.join("best.ckpt"))?;
                }
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some(dir) = &cfg.out_dir {
        let path = dir.join("runlog.csv");
        std::fs::write(&path, log.to_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome { params, best, log })
}

pub fn save_checkpoint<T: Scalar>(params: &Parameters<T>, path: &Path) -> Result<()> {
    net::save_checkpoint(params, path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Parameters<T>, ModelConfig)> {
    let p = net::load_checkpoint::<T>(path)?;
    let c = p.config;
    Ok((p, c))
}

/// Largest relative finite-difference error per tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub ce: BTreeMap<String, f64>,
    pub dro: BTreeMap<String, f64>,
    pub probes: usize,
    /// DRO probes redrawn because the worst-case weights moved.
    pub retries: usize,
}

impl GradCheckReport {
    pub fn max_ce(&self) -> f64 {
        self.ce.values().copied().fold(0.0, f64::max)
    }

    pub fn max_dro(&self) -> f64 {
        self.dro.values().copied().fold(0.0, f64::max)
    }
}

/// Relative error with a floor on the denominator so that coordinates with
/// vanishing gradient are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic and central-difference gradients on `n_probes` random
/// coordinates for both objectives, in double precision. The probe point is
/// the seeded initialization plus N(0, 0.3²) jitter, so that gains and
/// biases are off their symmetric starting values.
pub fn gradient_check(config: &ModelConfig, n_probes: usize, seed: u64) -> Result<GradCheckReport> {
    let mut cfg = *config;
    cfg.precision = crate::tensor::Precision::Double;
    let mut params = net::init_model::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1));
    let jitter = rand_distr::Normal::new(0.0, 0.3).expect("valid std");
    for t in params.tensors.values_mut() {
        for v in t.data.iter_mut() {
            *v += rand_distr::Distribution::sample(&jitter, &mut rng);
        }
    }
    let v = cfg.vocab;
    let len = cfg.max_len.min(4);
    let windows: Vec<Vec<[u32; 4]>> = (0..2)
        .map(|_| {
            (0..len)
                .map(|_| {
                    [
                        rng.random_range(0..v.n_d as u32),
                        rng.random_range(0..v.n_t as u32),
                        rng.random_range(0..v.n_l as u32),
                        rng.random_range(0..v.n_e as u32),
                    ]
                })
                .collect()
        })
        .collect();
    let batch = FeatureBatch::from_windows(windows.iter().map(|w| w.as_slice()));
    let targets: Vec<u32> = (0..batch.rows.len()).map(|_| rng.random_range(0..v.n_b as u32)).collect();
    let prior_counts: Vec<u64> = (0..v.n_b).map(|_| rng.random_range(1..20)).collect();
    let prior = ClassPrior::from_counts(prior_counts, PriorSource::Corpus)?;
    let objectives = [Objective::Ce, Objective::Dro(DroConfig::with_epsilon(0.5))];

    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let sizes: Vec<usize> = names.iter().map(|n| params.get(n).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut report = GradCheckReport {
        probes: n_probes,
        ..GradCheckReport::default()
    };
    let h = 1e-5;
    for (oi, objective) in objectives.iter().enumerate() {
        let eval = |p: &Parameters<f64>| -> Result<LossOutput> {
            let t = forward(p, &batch, ForwardOptions::inference())?;
            objective_loss(objective, &t.logits, v.n_b, &targets, Some(&prior), None)
        };
        let trace = forward(&params, &batch, ForwardOptions::training(None))?;
        let out = objective_loss(objective, &trace.logits, v.n_b, &targets, Some(&prior), None)?;
        let grads = backward(&trace, &params, &out.dlogits)?;
        let sink = if oi == 0 { &mut report.ce } else { &mut report.dro };
        let mut done = 0;
        let mut attempts = 0;
        while done < n_probes && attempts < n_probes * 20 {
            attempts += 1;
            let mut flat = rng.random_range(0..total);
            let mut ti = 0;
            while flat >= sizes[ti] {
                flat -= sizes[ti];
                ti += 1;
            }
            let name = &names[ti];
            let mut plus = params.clone();
            plus.get_mut(name).data[flat] += h;
            let mut minus = params.clone();
            minus.get_mut(name).data[flat] -= h;
            let (fp, fm) = (eval(&plus)?, eval(&minus)?);
            if let (Some(a), Some(b)) = (&fp.diagnostics, &out.diagnostics) {
                let c = fm.diagnostics.as_ref().unwrap();
                if a.weights != b.weights || c.weights != b.weights {
                    report.retries += 1;
                    continue;
                }
            }
            let numeric = (fp.loss - fm.loss) / (2.0 * h);
            let err = relative_error(grads.get(name).data[flat], numeric);
            let e = sink.entry(name.clone()).or_insert(0.0);
            *e = e.max(err);
            done += 1;
        }
    }
    Ok(report)
}
