//! Parameter transfer for downstream adaptation: growing the vocabulary for
//! new behaviors, moving a model to another domain, freeze policies and the
//! fine-tuning driver.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SampleSource, VocabSizes, Vocabulary};
use crate::net::{self, ModelConfig, Parameters, EMB_DAY, EMB_EVENT, EMB_LOC, EMB_POS, EMB_SLOT, HEAD_B1, HEAD_B2, HEAD_W1, HEAD_W2};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{train_masked, TrainConfig, TrainMask, TrainOutcome};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    #[default]
    None,
    /// Every tensor inside the transformer blocks is frozen.
    TransformerFrozen,
    /// Only the prediction head trains.
    HeadOnly,
}

impl FreezePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::TransformerFrozen => "transformer_frozen",
            Self::HeadOnly => "head_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "transformer_frozen" | "transformer" => Ok(Self::TransformerFrozen),
            "head_only" | "head" => Ok(Self::HeadOnly),
            other => Err(Error::InvalidConfig(format!("unknown freeze policy `{other}`"))),
        }
    }
}

/// Record of which tensors (and which rows) survived a transfer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransferPlan {
    pub retained: BTreeSet<String>,
    pub reinitialized: BTreeSet<String>,
    /// For partially retained tensors: (old index, new index) pairs along
    /// the vocabulary axis.
    pub row_maps: BTreeMap<String, Vec<(usize, usize)>>,
    pub freeze: FreezePolicy,
}

impl TransferPlan {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "freeze={}", self.freeze.as_str());
        for n in &self.retained {
            let _ = writeln!(s, "retained={n}");
        }
        for n in &self.reinitialized {
            let _ = writeln!(s, "reinitialized={n}");
        }
        for (n, pairs) in &self.row_maps {
            let list: Vec<String> = pairs.iter().map(|(a, b)| format!("{a}:{b}")).collect();
            let _ = writeln!(s, "rows.{n}={}", list.join(","));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut plan = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Parse(format!("transfer plan line {}: `{line}`", i + 1));
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            match k {
                "freeze" => plan.freeze = FreezePolicy::parse(v)?,
                "retained" => {
                    plan.retained.insert(v.to_string());
                }
                "reinitialized" => {
                    plan.reinitialized.insert(v.to_string());
                }
                _ => {
                    let name = k.strip_prefix("rows.").ok_or_else(bad)?;
                    let pairs = v
                        .split(',')
                        .filter(|p| !p.is_empty())
                        .map(|p| {
                            let (a, b) = p.split_once(':').ok_or_else(bad)?;
                            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    plan.row_maps.insert(name.to_string(), pairs);
                }
            }
        }
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Old-to-new index maps for events and behaviors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabMapping {
    pub events: Vec<u32>,
    pub behaviors: Vec<u32>,
}

impl VocabMapping {
    /// Old ids keep their value in the new vocabulary.
    pub fn identity(old: &VocabSizes) -> Self {
        Self {
            events: (0..old.n_e as u32).collect(),
            behaviors: (0..old.n_b as u32).collect(),
        }
    }
}

fn check_injective(map: &[u32], new_size: usize, what: &str) -> Result<()> {
    let mut seen = vec![false; new_size];
    for (old, &new) in map.iter().enumerate() {
        let new = new as usize;
        if new >= new_size {
            return Err(Error::Transfer(format!("{what} {old} maps to {new}, outside new size {new_size}")));
        }
        if std::mem::replace(&mut seen[new], true) {
            return Err(Error::Transfer(format!("{what} mapping is not injective at new id {new}")));
        }
    }
    Ok(())
}

fn fresh<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    net::gaussian_rows(rng, n).map(T::from_f64_lossy).collect()
}

/// Grows the event table and the behavior axis of the output projection.
/// Retained rows are copied bitwise; new rows are drawn from N(0, 0.02²),
/// new output biases start at 0. Everything else is copied unchanged.
pub fn expand_vocabulary<T: Scalar>(
    params: &Parameters<T>,
    old_vocab: &Vocabulary,
    new_vocab: &Vocabulary,
    mapping: &VocabMapping,
    seed: u64,
) -> Result<(Parameters<T>, TransferPlan)> {
    let (o, n) = (old_vocab.sizes, new_vocab.sizes);
    if params.config.vocab != o {
        return Err(Error::Transfer("model vocabulary differs from the old vocabulary".into()));
    }
    if n.n_e < o.n_e || n.n_b < o.n_b || n.n_l < o.n_l || n.n_d != o.n_d || n.n_t != o.n_t {
        return Err(Error::Transfer(format!(
            "vocabulary may only grow (events {}→{}, behaviors {}→{}, locations {}→{}; day and slot fixed)",
            o.n_e, n.n_e, o.n_b, n.n_b, o.n_l, n.n_l
        )));
    }
    if mapping.events.len() != o.n_e || mapping.behaviors.len() != o.n_b {
        return Err(Error::Transfer("mapping must cover every old event and behavior".into()));
    }
    check_injective(&mapping.events, n.n_e, "event")?;
    check_injective(&mapping.behaviors, n.n_b, "behavior")?;

    let mut config = params.config;
    config.vocab = n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = params.clone();
    out.config = config;
    let mut plan = TransferPlan::default();
    let d = config.d;

    // event rows
    if n.n_e != o.n_e || mapping.events.iter().enumerate().any(|(a, &b)| a != b as usize) {
        let old = params.get(EMB_EVENT);
        let mut data = vec![T::zero(); n.n_e * d];
        let mut kept = vec![false; n.n_e];
        for (a, &b) in mapping.events.iter().enumerate() {
            data[b as usize * d..(b as usize + 1) * d].copy_from_slice(old.row(a));
            kept[b as usize] = true;
        }
        for (r, k) in kept.iter().enumerate() {
            if !k {
                data[r * d..(r + 1) * d].copy_from_slice(&fresh::<T>(&mut rng, d));
            }
        }
        out.tensors.insert(EMB_EVENT.into(), Tensor::from_vec(&[n.n_e, d], data));
        plan.row_maps.insert(EMB_EVENT.into(), mapping.events.iter().enumerate().map(|(a, &b)| (a, b as usize)).collect());
    }

    // location rows: identity prefix
    if n.n_l != o.n_l {
        let old = params.get(EMB_LOC);
        let mut data = old.data.clone();
        data.extend(fresh::<T>(&mut rng, (n.n_l - o.n_l) * d));
        out.tensors.insert(EMB_LOC.into(), Tensor::from_vec(&[n.n_l, d], data));
        plan.row_maps.insert(EMB_LOC.into(), (0..o.n_l).map(|i| (i, i)).collect());
    }

    // behavior columns of the output projection
    if n.n_b != o.n_b || mapping.behaviors.iter().enumerate().any(|(a, &b)| a != b as usize) {
        let old_w = params.get(HEAD_W2);
        let k = old_w.shape[0];
        let mut kept = vec![None; n.n_b];
        for (a, &b) in mapping.behaviors.iter().enumerate() {
            kept[b as usize] = Some(a);
        }
        let mut w = vec![T::zero(); k * n.n_b];
        // fresh columns are drawn column by column so a given new behavior
        // gets the same initial weights regardless of its neighbours
        for (col, src) in kept.iter().enumerate() {
            match src {
                Some(a) => {
                    for r in 0..k {
                        w[r * n.n_b + col] = old_w.data[r * o.n_b + a];
                    }
                }
                None => {
                    for (r, v) in fresh::<T>(&mut rng, k).into_iter().enumerate() {
                        w[r * n.n_b + col] = v;
                    }
                }
            }
        }
        let old_b = &params.get(HEAD_B2).data;
        let b: Vec<T> = kept.iter().map(|s| s.map_or(T::zero(), |a| old_b[a])).collect();
        out.tensors.insert(HEAD_W2.into(), Tensor::from_vec(&[k, n.n_b], w));
        out.tensors.insert(HEAD_B2.into(), Tensor::from_vec(&[n.n_b], b));
        let pairs: Vec<(usize, usize)> = mapping.behaviors.iter().enumerate().map(|(a, &b)| (a, b as usize)).collect();
        plan.row_maps.insert(HEAD_W2.into(), pairs.clone());
        plan.row_maps.insert(HEAD_B2.into(), pairs);
    }

    for name in out.tensors.keys() {
        if !plan.row_maps.contains_key(name) {
            plan.retained.insert(name.clone());
        }
    }
    out.check_shapes()?;
    Ok((out, plan))
}

/// Builds a model for another domain: transformer blocks and the head's
/// hidden layer are copied, the embedding tables and output projection are
/// drawn fresh for `target_vocab`, and positional rows are copied up to the
/// shorter of the two lengths.
pub fn transfer_cross_domain<T: Scalar>(source: &Parameters<T>, target_vocab: VocabSizes, seed: u64) -> Result<(Parameters<T>, TransferPlan)> {
    let mut target = source.config;
    target.vocab = target_vocab;
    transfer_cross_domain_to(source, &target, seed)
}

/// As [`transfer_cross_domain`] with an explicit target config, which must
/// agree with the source on every shape the transfer keeps.
pub fn transfer_cross_domain_to<T: Scalar>(source: &Parameters<T>, target: &ModelConfig, seed: u64) -> Result<(Parameters<T>, TransferPlan)> {
    let s = source.config;
    if target.d != s.d {
        return Err(Error::Transfer(format!(
            "target width 4·{} differs from source width 4·{}",
            target.d, s.d
        )));
    }
    if (target.n_layers, target.n_heads, target.ffn_mult, target.head_hidden) != (s.n_layers, s.n_heads, s.ffn_mult, s.head_hidden) {
        return Err(Error::Transfer("target depth, heads, ffn or head width differ from the source".into()));
    }
    let mut config = *target;
    config.precision = T::PRECISION;
    config.validate()?;
    let mut fresh_params = net::init_model::<T>(&config, seed)?;
    let mut plan = TransferPlan::default();
    for (name, t) in &source.tensors {
        let keep = name.starts_with("layer.") || name == HEAD_W1 || name == HEAD_B1;
        if keep {
            fresh_params.tensors.insert(name.clone(), t.clone());
            plan.retained.insert(name.clone());
        }
    }
    let rows = s.max_len.min(config.max_len);
    let w = config.width();
    let src_pos = source.get(EMB_POS);
    fresh_params.get_mut(EMB_POS).data[..rows * w].copy_from_slice(&src_pos.data[..rows * w]);
    plan.row_maps.insert(EMB_POS.into(), (0..rows).map(|i| (i, i)).collect());
    for name in [EMB_DAY, EMB_SLOT, EMB_LOC, EMB_EVENT, HEAD_W2, HEAD_B2] {
        plan.reinitialized.insert(name.into());
    }
    fresh_params.check_shapes()?;
    Ok((fresh_params, plan))
}

pub fn apply_freeze_policy<T>(params: &Parameters<T>, policy: FreezePolicy) -> TrainMask {
    let frozen = params
        .tensors
        .keys()
        .filter(|name| match policy {
            FreezePolicy::None => false,
            FreezePolicy::TransformerFrozen => name.starts_with("layer."),
            FreezePolicy::HeadOnly => !name.starts_with("head."),
        })
        .cloned()
        .collect();
    TrainMask {
        frozen,
        frozen_elements: BTreeMap::new(),
    }
}

/// Additionally freezes the output-projection entries of behaviors the plan
/// retained, so only new behaviors' head weights move.
pub fn freeze_retained_head_rows<T>(mask: &mut TrainMask, params: &Parameters<T>, plan: &TransferPlan) {
    let Some(pairs) = plan.row_maps.get(HEAD_W2) else {
        return;
    };
    let w2 = params.tensors.get(HEAD_W2).map(|t| t.shape.clone());
    let Some(shape) = w2 else { return };
    let (k, nb) = (shape[0], shape[1]);
    let mut w = vec![false; k * nb];
    let mut b = vec![false; nb];
    for &(_, col) in pairs {
        for r in 0..k {
            w[r * nb + col] = true;
        }
        b[col] = true;
    }
    mask.frozen_elements.insert(HEAD_W2.into(), w);
    mask.frozen_elements.insert(HEAD_B2.into(), b);
}

pub fn finetune<T: Scalar>(
    params: Parameters<T>,
    train_data: &dyn SampleSource,
    val_data: &dyn SampleSource,
    cfg: &TrainConfig,
    mask: &TrainMask,
) -> Result<TrainOutcome<T>> {
    train_masked(params, train_data, val_data, cfg, mask)
}
