//! Cross-entropy and the class-robust worst-case objective.
//!
//! The robust loss maximizes `Σ_b p(b)·L_b` over distributions with
//! `0 ≤ p(b) ≤ p_train(b)/ε_b`, where `L_b` is the mean loss of class `b` in
//! the batch. The maximizer is found by water-filling and then held fixed
//! when differentiating.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    #[default]
    Corpus,
    Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior {
    pub p_train: Vec<f64>,
    pub source: PriorSource,
    pub counts: Vec<u64>,
}

impl ClassPrior {
    pub fn from_counts(counts: Vec<u64>, source: PriorSource) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidConfig("class prior from zero observations".into()));
        }
        let p_train = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self { p_train, source, counts })
    }

    pub fn from_targets<'a>(targets: impl IntoIterator<Item = &'a u32>, n_classes: usize, source: PriorSource) -> Result<Self> {
        let mut counts = vec![0u64; n_classes];
        for &t in targets {
            counts[t as usize] += 1;
        }
        Self::from_counts(counts, source)
    }

    pub fn n_classes(&self) -> usize {
        self.p_train.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClassPolicy {
    /// Capacities are renormalized over the classes present in the batch.
    #[default]
    RenormalizePresent,
    /// Absent classes keep their full capacity and use a running loss estimate.
    Ema,
}

fn default_epsilon() -> f64 {
    0.5
}

fn default_decay() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_epsilon: Option<Vec<f64>>,
    #[serde(default)]
    pub absent_class_policy: AbsentClassPolicy,
    #[serde(default = "default_decay")]
    pub ema_decay: f64,
    #[serde(default)]
    pub prior_source: PriorSource,
}

impl Default for DroConfig {
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            per_class_epsilon: None,
            absent_class_policy: AbsentClassPolicy::default(),
            ema_decay: default_decay(),
            prior_source: PriorSource::default(),
        }
    }
}

impl DroConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, ..Self::default() }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let ok = |e: f64| e > 0.0 && e <= 1.0;
        if !ok(self.epsilon) {
            return Err(Error::InvalidConfig(format!("epsilon {} outside (0, 1]", self.epsilon)));
        }
        if let Some(v) = &self.per_class_epsilon {
            if v.len() != n_classes {
                return Err(Error::InvalidConfig(format!(
                    "per_class_epsilon has {} entries for {n_classes} classes",
                    v.len()
                )));
            }
            if let Some(bad) = v.iter().find(|e| !ok(**e)) {
                return Err(Error::InvalidConfig(format!("per-class epsilon {bad} outside (0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        Ok(())
    }

    fn epsilon_of(&self, b: usize) -> f64 {
        self.per_class_epsilon.as_ref().map_or(self.epsilon, |v| v[b])
    }
}

/// Per-sample `−log softmax(logits)[target]` over rows of width `n_classes`,
/// and their mean.
pub fn plain_ce_loss<T: Scalar>(logits: &[T], n_classes: usize, targets: &[u32]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), n_classes * targets.len(), "logits/targets shape");
    let losses: Vec<f64> = logits
        .chunks(n_classes)
        .zip(targets)
        .map(|(row, &t)| {
            let hi = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.as_f64() - hi).exp()).sum();
            hi + z.ln() - row[t as usize].as_f64()
        })
        .collect();
    let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    (mean, losses)
}

/// Mean loss per class and which classes occur in `targets`.
pub fn per_class_loss(losses: &[f64], targets: &[u32], n_classes: usize) -> (Vec<f64>, Vec<bool>) {
    let mut sums = vec![0.0; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (&l, &t) in losses.iter().zip(targets) {
        sums[t as usize] += l;
        counts[t as usize] += 1;
    }
    let present: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    let means = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    (means, present)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCase {
    pub weights: Vec<f64>,
    pub capacities: Vec<f64>,
}

/// Water-filling maximizer of `Σ p(b)·L_b` under the capacity constraints.
/// Classes with `considered[b] == false` get weight 0.
pub fn worst_case_weights(class_losses: &[f64], considered: &[bool], prior: &ClassPrior, cfg: &DroConfig) -> Result<WorstCase> {
    let n = class_losses.len();
    cfg.validate(n)?;
    if prior.n_classes() != n {
        return Err(Error::InvalidConfig(format!(
            "prior has {} classes, losses {n}",
            prior.n_classes()
        )));
    }
    if !considered.iter().any(|&c| c) {
        return Err(Error::InvalidConfig("no class present".into()));
    }
    let mass: f64 = match cfg.absent_class_policy {
        AbsentClassPolicy::RenormalizePresent => (0..n).filter(|&b| considered[b]).map(|b| prior.p_train[b]).sum(),
        AbsentClassPolicy::Ema => 1.0,
    };
    let capacities: Vec<f64> = (0..n)
        .map(|b| {
            if considered[b] && mass > 0.0 {
                prior.p_train[b] / mass / cfg.epsilon_of(b)
            } else {
                0.0
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).filter(|&b| considered[b]).collect();
    order.sort_by(|&a, &b| class_losses[b].total_cmp(&class_losses[a]).then(a.cmp(&b)));
    let mut weights = vec![0.0; n];
    let mut remaining = 1.0f64;
    for b in order {
        if remaining <= 0.0 {
            break;
        }
        let w = capacities[b].min(remaining);
        weights[b] = w;
        remaining -= w;
    }
    if remaining > 1e-9 {
        return Err(Error::InsufficientCapacity(1.0 - remaining));
    }
    Ok(WorstCase { weights, capacities })
}

/// Running per-class loss estimates for classes missing from a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaClassLosses {
    pub values: Vec<f64>,
}

impl EmaClassLosses {
    /// Starts every class at `ln N_B`, the loss of a uniform predictor.
    pub fn new(n_classes: usize) -> Self {
        Self {
            values: vec![(n_classes as f64).ln(); n_classes],
        }
    }

    pub fn update(&mut self, class_losses: &[f64], present: &[bool], decay: f64) {
        for ((v, &l), &p) in self.values.iter_mut().zip(class_losses).zip(present) {
            if p {
                *v = decay * *v + (1.0 - decay) * l;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroDiagnostics {
    pub class_losses: Vec<f64>,
    pub present: Vec<bool>,
    pub weights: Vec<f64>,
    pub capacities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient of `loss` w.r.t. the logits, same layout.
    pub dlogits: Vec<f64>,
    pub diagnostics: Option<DroDiagnostics>,
}

fn softmax_minus_onehot<T: Scalar>(logits: &[T], n_classes: usize, targets: &[u32], sample_weight: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for (j, (row, &t)) in logits.chunks(n_classes).zip(targets).enumerate() {
        let s = sample_weight(j);
        let hi = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.as_f64() - hi).exp()).sum();
        for (b, v) in row.iter().enumerate() {
            let p = (v.as_f64() - hi).exp() / z;
            out.push(s * (p - if b == t as usize { 1.0 } else { 0.0 }));
        }
    }
    out
}

pub fn ce_loss_and_grad<T: Scalar>(logits: &[T], n_classes: usize, targets: &[u32]) -> LossOutput {
    let (loss, _) = plain_ce_loss(logits, n_classes, targets);
    let n = targets.len() as f64;
    LossOutput {
        loss,
        dlogits: softmax_minus_onehot(logits, n_classes, targets, |_| 1.0 / n),
        diagnostics: None,
    }
}

/// Worst-case reweighted loss and its gradient with the weights held fixed.
/// With the EMA policy, `ema` supplies estimates for absent classes; it is
/// not updated here.
pub fn dro_loss<T: Scalar>(
    logits: &[T],
    n_classes: usize,
    targets: &[u32],
    prior: &ClassPrior,
    cfg: &DroConfig,
    ema: Option<&EmaClassLosses>,
) -> Result<LossOutput> {
    let (_, losses) = plain_ce_loss(logits, n_classes, targets);
    let (class_losses, present) = per_class_loss(&losses, targets, n_classes);
    let (filled, considered) = match (cfg.absent_class_policy, ema) {
        (AbsentClassPolicy::Ema, Some(state)) => {
            let filled = (0..n_classes)
                .map(|b| if present[b] { class_losses[b] } else { state.values[b] })
                .collect();
            (filled, vec![true; n_classes])
        }
        (AbsentClassPolicy::Ema, None) => {
            return Err(Error::InvalidConfig("ema policy needs a class-loss state".into()))
        }
        (AbsentClassPolicy::RenormalizePresent, _) => (class_losses.clone(), present.clone()),
    };
    let wc = worst_case_weights(&filled, &considered, prior, cfg)?;
    let loss = wc.weights.iter().zip(&filled).map(|(w, l)| w * l).sum();
    let mut counts = vec![0usize; n_classes];
    for &t in targets {
        counts[t as usize] += 1;
    }
    let dlogits = softmax_minus_onehot(logits, n_classes, targets, |j| {
        let y = targets[j] as usize;
        wc.weights[y] / counts[y] as f64
    });
    Ok(LossOutput {
        loss,
        dlogits,
        diagnostics: Some(DroDiagnostics {
            class_losses: filled,
            present,
            weights: wc.weights,
            capacities: wc.capacities,
        }),
    })
}

/// CSV sink for per-step robust-loss diagnostics.
pub struct DiagnosticsWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl DiagnosticsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(f);
        writeln!(out, "step,class,class_loss,weight,capacity").map_err(|e| Error::io(path, e))?;
        Ok(Self { out })
    }

    pub fn write(&mut self, step: usize, d: &DroDiagnostics) -> std::io::Result<()> {
        for b in 0..d.weights.len() {
            if d.present[b] || d.weights[b] > 0.0 {
                writeln!(self.out, "{step},{b},{},{},{}", d.class_losses[b], d.weights[b], d.capacities[b])?;
            }
        }
        self.out.flush()
    }
}
