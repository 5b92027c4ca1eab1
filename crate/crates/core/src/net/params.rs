use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Normal,
    Ones,
    Zeros,
}

pub const EMB_DAY: &str = "embed.day";
pub const EMB_SLOT: &str = "embed.slot";
pub const EMB_LOC: &str = "embed.loc";
pub const EMB_EVENT: &str = "embed.event";
pub const EMB_POS: &str = "embed.pos";
pub const HEAD_W1: &str = "head.w1";
pub const HEAD_B1: &str = "head.b1";
pub const HEAD_W2: &str = "head.w2";
pub const HEAD_B2: &str = "head.b2";

pub fn layer_name(layer: usize, leaf: &str) -> String {
    format!("layer.{layer}.{leaf}")
}

pub const LAYER_LEAVES: [&str; 12] = [
    "ln1.gain",
    "ln1.bias",
    "attn.w_q",
    "attn.w_k",
    "attn.w_v",
    "attn.w_o",
    "ln2.gain",
    "ln2.bias",
    "ffn.w_in",
    "ffn.b_in",
    "ffn.w_out",
    "ffn.b_out",
];

/// Every tensor the config declares, in initialization order.
pub fn tensor_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let v = &config.vocab;
    let d = config.d;
    let w = config.width();
    let f = config.ffn_hidden();
    let mut specs = vec![
        (EMB_DAY.to_string(), vec![v.n_d, d], InitKind::Normal),
        (EMB_SLOT.to_string(), vec![v.n_t, d], InitKind::Normal),
        (EMB_LOC.to_string(), vec![v.n_l, d], InitKind::Normal),
        (EMB_EVENT.to_string(), vec![v.n_e, d], InitKind::Normal),
        (EMB_POS.to_string(), vec![config.max_len, w], InitKind::Normal),
    ];
    for l in 0..config.n_layers {
        for leaf in LAYER_LEAVES {
            let (shape, kind) = match leaf {
                "ln1.gain" | "ln2.gain" => (vec![w], InitKind::Ones),
                "ln1.bias" | "ln2.bias" | "ffn.b_out" => (vec![w], InitKind::Zeros),
                "ffn.b_in" => (vec![f], InitKind::Zeros),
                "ffn.w_in" => (vec![w, f], InitKind::Normal),
                "ffn.w_out" => (vec![f, w], InitKind::Normal),
                _ => (vec![w, w], InitKind::Normal),
            };
            specs.push((layer_name(l, leaf), shape, kind));
        }
    }
    if config.head_hidden > 0 {
        let k = config.head_hidden;
        specs.push((HEAD_W1.to_string(), vec![w, k], InitKind::Normal));
        specs.push((HEAD_B1.to_string(), vec![k], InitKind::Zeros));
        specs.push((HEAD_W2.to_string(), vec![k, v.n_b], InitKind::Normal));
    } else {
        specs.push((HEAD_W2.to_string(), vec![w, v.n_b], InitKind::Normal));
    }
    specs.push((HEAD_B2.to_string(), vec![v.n_b], InitKind::Zeros));
    specs
}

/// The complete named-tensor set of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

pub(crate) fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize) -> impl Iterator<Item = f64> + '_ {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n).map(move |_| normal.sample(rng))
}

pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Parameters<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape, kind) in tensor_specs(config) {
        let len: usize = shape.iter().product();
        let t = match kind {
            InitKind::Ones => Tensor::filled(&shape, T::one()),
            InitKind::Zeros => Tensor::zeros(&shape),
            InitKind::Normal => Tensor::from_vec(
                &shape,
                gaussian_rows(&mut rng, len).map(T::from_f64_lossy).collect(),
            ),
        };
        tensors.insert(name, t);
    }
    Ok(Parameters {
        config: *config,
        tensors,
    })
}

impl<T: Scalar> Parameters<T> {
    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing tensor `{name}`"))
    }

    /// Zero tensors shaped like `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let mut config = self.config;
        config.precision = U::PRECISION;
        Parameters {
            config,
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }

    /// Checks that tensor names and shapes match what the config declares.
    pub fn check_shapes(&self) -> Result<()> {
        let specs = tensor_specs(&self.config);
        for (name, shape, _) in &specs {
            match self.tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
                Some(t) if &t.shape != shape => {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape.clone(),
                    })
                }
                _ => {}
            }
        }
        if specs.len() != self.tensors.len() {
            let known: std::collections::BTreeSet<_> = specs.iter().map(|s| s.0.as_str()).collect();
            let extra = self.tensors.keys().find(|k| !known.contains(k.as_str())).cloned();
            return Err(Error::Checkpoint(format!("unexpected tensor {extra:?}")));
        }
        Ok(())
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (k, t) in self.tensors.iter_mut() {
            let o = other.get(k);
            for (a, b) in t.data.iter_mut().zip(&o.data) {
                *a += *b * scale;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::VocabSizes;
    use crate::net::config::count_params;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d: 64,
            n_layers: 4,
            n_heads: 4,
            max_len: 32,
            head_hidden: 256,
            ffn_mult: 4,
            vocab: VocabSizes { n_d: 7, n_t: 48, n_l: 50, n_e: 114, n_b: 39 },
            dropout: 0.1,
            precision: crate::tensor::Precision::Single,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model::<f32>(&cfg(), 3).unwrap();
        let b = init_model::<f32>(&cfg(), 3).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = init_model::<f32>(&cfg(), 4).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn count_matches_symbolic_shape_count() {
        // independent count: walk the declared shapes by hand
        let c = cfg();
        let w = 4 * c.d;
        let f = 4 * w;
        let emb = 7 * c.d + 48 * c.d + 50 * c.d + 114 * c.d + 32 * w;
        let layer = 2 * w + 4 * w * w + 2 * w + w * f + f + f * w + w;
        let head = w * 256 + 256 + 256 * 39 + 39;
        let expected = emb + 4 * layer + head;
        assert_eq!(count_params(&c).total(), expected);
        assert_eq!(init_model::<f32>(&c, 0).unwrap().num_scalars(), expected);
    }

    #[test]
    fn init_statistics() {
        let p = init_model::<f64>(&cfg(), 1).unwrap();
        let w = p.get("layer.0.attn.w_q");
        let n = w.len() as f64;
        let mean = w.data.iter().sum::<f64>() / n;
        let std = (w.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-3);
        assert!((std - 0.02).abs() < 1e-3);
        assert!(p.get("layer.0.ln1.gain").data.iter().all(|&g| g == 1.0));
        assert!(p.get("head.b2").data.iter().all(|&g| g == 0.0));
        p.check_shapes().unwrap();
    }
}
