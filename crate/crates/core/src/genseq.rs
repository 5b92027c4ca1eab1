//! Autoregressive generation of future behavior sequences.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BehaviorRecord, Vocabulary};
use crate::net::{forward, FeatureBatch, ForwardOptions, Parameters};
use crate::tensor::Scalar;
use crate::trainer::mix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SamplingMode {
    Greedy,
    Temperature { t: f64 },
    TopK { k: usize, t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(flatten)]
    pub mode: SamplingMode,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplingMode::TopK { k: 10, t: 1.0 },
            horizon: 50,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy(horizon: usize) -> Self {
        Self {
            mode: SamplingMode::Greedy,
            horizon,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        match self.mode {
            SamplingMode::Greedy => Ok(()),
            SamplingMode::Temperature { t } if t > 0.0 && t.is_finite() => Ok(()),
            SamplingMode::TopK { k, t } if k >= 1 && t > 0.0 && t.is_finite() => Ok(()),
            m => Err(Error::InvalidConfig(format!("bad sampler parameters {m:?}"))),
        }
    }
}

/// Next input record after predicting `behavior`: its canonical event, one
/// slot later (rolling the day over after the last slot), same location.
pub fn advance_context(last: &BehaviorRecord, behavior: u32, vocab: &Vocabulary) -> BehaviorRecord {
    let n_t = vocab.sizes.n_t as u32;
    let n_d = vocab.sizes.n_d as u32;
    let (slot, day) = if last.slot + 1 >= n_t {
        (0, (last.day + 1) % n_d)
    } else {
        (last.slot + 1, last.day)
    };
    BehaviorRecord {
        user_id: last.user_id,
        day,
        slot,
        location: last.location,
        event: vocab.canonical_event(behavior),
        behavior,
        seq_pos: last.seq_pos + 1,
        date: last.date.map(|d| if slot == 0 { d + 1 } else { d }),
    }
}

fn pick(logits: &[f64], mode: SamplingMode, rng: &mut ChaCha8Rng) -> u32 {
    let argmax = || {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best as u32
    };
    let (cands, t): (Vec<usize>, f64) = match mode {
        SamplingMode::Greedy => return argmax(),
        SamplingMode::Temperature { t } => ((0..logits.len()).collect(), t),
        SamplingMode::TopK { k, t } => {
            let mut idx: Vec<usize> = (0..logits.len()).collect();
            // stable sort keeps lower ids first among equal logits
            idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
            idx.truncate(k.min(logits.len()));
            (idx, t)
        }
    };
    let m = cands.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = cands.iter().map(|&i| ((logits[i] - m) / t).exp()).collect();
    let total: f64 = w.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return argmax();
    }
    let mut u = rng.random::<f64>() * total;
    for (&i, &wi) in cands.iter().zip(&w) {
        if u < wi {
            return i as u32;
        }
        u -= wi;
    }
    // rounding left a sliver past the end
    *cands.iter().zip(&w).rev().find(|(_, &wi)| wi > 0.0).map(|(i, _)| i).unwrap() as u32
}

/// One generated continuation: the sampled behaviors and the records fed
/// back to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub behaviors: Vec<u32>,
    pub records: Vec<BehaviorRecord>,
}

/// Generates `horizon` behaviors following `context`. Same as the first
/// entry of [`generate_batch`] with a single context.
pub fn generate<T: Scalar>(params: &Parameters<T>, vocab: &Vocabulary, context: &[BehaviorRecord], sampler: &SamplerConfig) -> Result<Generated> {
    Ok(generate_batch(params, vocab, &[context.to_vec()], sampler)?.remove(0))
}

/// Generates continuations for many contexts. Context `i` draws from its
/// own ChaCha stream keyed by `(seed, i)`; contexts of equal length are
/// stepped together through one batched forward pass.
pub fn generate_batch<T: Scalar>(
    params: &Parameters<T>,
    vocab: &Vocabulary,
    contexts: &[Vec<BehaviorRecord>],
    sampler: &SamplerConfig,
) -> Result<Vec<Generated>> {
    sampler.validate()?;
    let max_len = params.config.max_len;
    let mut windows: Vec<Vec<BehaviorRecord>> = Vec::with_capacity(contexts.len());
    for (i, c) in contexts.iter().enumerate() {
        if c.is_empty() {
            return Err(Error::InvalidConfig(format!("context {i} is empty")));
        }
        windows.push(c[c.len().saturating_sub(max_len)..].to_vec());
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..contexts.len())
        .map(|i| ChaCha8Rng::seed_from_u64(mix(sampler.seed, i as u64)))
        .collect();
    let mut out: Vec<Generated> = vec![
        Generated {
            behaviors: Vec::with_capacity(sampler.horizon),
            records: Vec::with_capacity(sampler.horizon),
        };
        contexts.len()
    ];

    // chunk so very large batches do not blow up activation memory
    const CHUNK: usize = 64;
    for _ in 0..sampler.horizon {
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, w) in windows.iter().enumerate() {
            groups.entry(w.len()).or_default().push(i);
        }
        for (len, members) in groups {
            for chunk in members.chunks(CHUNK) {
                let feats: Vec<Vec<[u32; 4]>> = chunk.iter().map(|&i| windows[i].iter().map(|r| r.features()).collect()).collect();
                let batch = FeatureBatch::from_windows(feats.iter().map(|f| f.as_slice()));
                let trace = forward(params, &batch, ForwardOptions::inference())?;
                for (j, &i) in chunk.iter().enumerate() {
                    let logits: Vec<f64> = trace.logits_row(j * len + len - 1).iter().map(|v| v.as_f64()).collect();
                    let b = pick(&logits, sampler.mode, &mut rngs[i]);
                    let next = advance_context(windows[i].last().unwrap(), b, vocab);
                    out[i].behaviors.push(b);
                    out[i].records.push(next);
                    windows[i].push(next);
                    if windows[i].len() > max_len {
                        windows[i].remove(0);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct GeneratedLine<'a> {
    #[serde(flatten)]
    record: &'a BehaviorRecord,
    context: usize,
    generated: bool,
}

/// Writes generated records as JSONL in the corpus record format with
/// `context` and `generated: true` fields added.
pub fn write_generated_jsonl(runs: &[Generated], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (context, g) in runs.iter().enumerate() {
        for record in &g.records {
            serde_json::to_writer(&mut w, &GeneratedLine { record, context, generated: true }).map_err(|e| Error::Parse(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
