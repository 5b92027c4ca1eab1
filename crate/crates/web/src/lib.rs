//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The plain functions hold the logic and are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use bfm_core::corpus::{generate_synthetic, SyntheticSpec};
use bfm_core::objective::{worst_case_weights, ClassPrior, DroConfig, PriorSource};
use bfm_core::scalelab::{optimal_allocation, predict_loss, FitResult};
use bfm_core::{Error, Result};
use wasm_bindgen::prelude::*;

/// Worst-case class weights for the given per-class losses. `prior` may be
/// counts or probabilities; it is normalized here.
pub fn robust_weights(losses: &[f64], prior: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if losses.len() != prior.len() {
        return Err(Error::InvalidConfig(format!("{} losses but {} prior entries", losses.len(), prior.len())));
    }
    if prior.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
        return Err(Error::InvalidConfig("prior entries must be finite and non-negative".into()));
    }
    let total: f64 = prior.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidConfig("prior has no mass".into()));
    }
    let prior = ClassPrior {
        p_train: prior.iter().map(|p| p / total).collect(),
        source: PriorSource::Corpus,
        counts: Vec::new(),
    };
    let considered: Vec<bool> = prior.p_train.iter().map(|&p| p > 0.0).collect();
    let wc = worst_case_weights(losses, &considered, &prior, &DroConfig::with_epsilon(epsilon))?;
    Ok(wc.weights)
}

/// Behavior counts of a small synthetic corpus, most frequent first.
pub fn behavior_histogram(n_behaviors: usize, zipf_exponent: f64, n_users: usize, records_per_user: usize, seed: u64) -> Result<Vec<f64>> {
    if n_users * records_per_user > 2_000_000 {
        return Err(Error::InvalidConfig("at most 2M records in the demo".into()));
    }
    let spec = SyntheticSpec {
        seed,
        n_users,
        records_per_user,
        zipf_exponent,
        n_b: n_behaviors,
        n_e: 2 * n_behaviors,
        ..SyntheticSpec::default()
    };
    spec.validate()?;
    let (corpus, _) = generate_synthetic(&spec)?;
    let mut counts: Vec<f64> = corpus.behavior_counts(n_behaviors).into_iter().map(|c| c as f64).collect();
    counts.sort_by(|a, b| b.total_cmp(a));
    Ok(counts)
}

fn law(c_n: f64, alpha: f64, c_d: f64, beta: f64, l0: f64) -> FitResult {
    FitResult {
        c_n,
        alpha,
        c_d,
        beta,
        l0,
        rss: 0.0,
        residuals: Vec::new(),
        converged: true,
        starts_converged: 0,
    }
}

/// Loss against data size at fixed model size, on `points` log-spaced D
/// values in `[d_min, d_max]`. Returned flat as `[d0, l0, d1, l1, ...]`.
#[allow(clippy::too_many_arguments)]
pub fn loss_curve(c_n: f64, alpha: f64, c_d: f64, beta: f64, l0: f64, n: f64, d_min: f64, d_max: f64, points: usize) -> Result<Vec<f64>> {
    if !(d_min > 0.0 && d_max > d_min && n > 0.0) || points < 2 {
        return Err(Error::InvalidConfig("need 0 < d_min < d_max, n > 0 and at least 2 points".into()));
    }
    let fit = law(c_n, alpha, c_d, beta, l0);
    let (a, b) = (d_min.ln(), d_max.ln());
    let mut out = Vec::with_capacity(points * 2);
    for i in 0..points {
        let d = (a + (b - a) * i as f64 / (points - 1) as f64).exp();
        out.push(d);
        out.push(predict_loss(&fit, n, d));
    }
    Ok(out)
}

/// Compute-optimal `[N, D, D/N]` for the budget `N·D`.
pub fn allocation(c_n: f64, alpha: f64, c_d: f64, beta: f64, budget: f64) -> Result<Vec<f64>> {
    let a = optimal_allocation(&law(c_n, alpha, c_d, beta, 0.0), budget)?;
    Ok(vec![a.n_opt, a.d_opt, a.ratio])
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn dro_weights(losses: Vec<f64>, prior: Vec<f64>, epsilon: f64) -> std::result::Result<Vec<f64>, JsError> {
    robust_weights(&losses, &prior, epsilon).map_err(js)
}

#[wasm_bindgen]
pub fn synthetic_histogram(
    n_behaviors: usize,
    zipf_exponent: f64,
    n_users: usize,
    records_per_user: usize,
    seed: u32,
) -> std::result::Result<Vec<f64>, JsError> {
    behavior_histogram(n_behaviors, zipf_exponent, n_users, records_per_user, seed as u64).map_err(js)
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn scaling_curve(
    c_n: f64,
    alpha: f64,
    c_d: f64,
    beta: f64,
    l0: f64,
    n: f64,
    d_min: f64,
    d_max: f64,
    points: usize,
) -> std::result::Result<Vec<f64>, JsError> {
    loss_curve(c_n, alpha, c_d, beta, l0, n, d_min, d_max, points).map_err(js)
}

#[wasm_bindgen]
pub fn optimal_split(c_n: f64, alpha: f64, c_d: f64, beta: f64, budget: f64) -> std::result::Result<Vec<f64>, JsError> {
    allocation(c_n, alpha, c_d, beta, budget).map_err(js)
}
