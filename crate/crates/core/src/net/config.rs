use serde::{Deserialize, Serialize};

use crate::corpus::VocabSizes;
use crate::tensor::Precision;
use crate::{Error, Result};

fn default_ffn_mult() -> usize {
    4
}

/// Shape of the model. The concatenated stream width is `4·d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Per-stream embedding width.
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Longest input window the positional table supports.
    pub max_len: usize,
    /// Hidden width of the prediction MLP; 0 gives a single linear projection.
    pub head_hidden: usize,
    /// FFN hidden width as a multiple of `4·d`.
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(flatten)]
    pub vocab: VocabSizes,
    pub dropout: f64,
    pub precision: Precision,
}

impl ModelConfig {
    /// Desk defaults: d=64, 4 layers, 4 heads, I=32, head_hidden=256.
    pub fn desk(vocab: VocabSizes) -> Self {
        Self {
            d: 64,
            n_layers: 4,
            n_heads: 4,
            max_len: 32,
            head_hidden: 256,
            ffn_mult: 4,
            vocab,
            dropout: 0.1,
            precision: Precision::Single,
        }
    }

    pub fn width(&self) -> usize {
        4 * self.d
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.width()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.d == 0 {
            return fail("d must be positive".into());
        }
        if self.n_heads == 0 {
            return fail("n_heads must be positive".into());
        }
        if self.width() % self.n_heads != 0 {
            return fail(format!(
                "4·d = {} is not divisible by n_heads = {}",
                self.width(),
                self.n_heads
            ));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.vocab.validate()
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Scalar parameter counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub embeddings: usize,
    pub per_layer: usize,
    pub layers: usize,
    pub head: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.embeddings + self.layers + self.head
    }
}

pub fn count_params(config: &ModelConfig) -> ParamCount {
    let v = &config.vocab;
    let w = config.width();
    let f = config.ffn_hidden();
    let embeddings = config.d * (v.n_d + v.n_t + v.n_l + v.n_e) + config.max_len * w;
    let per_layer = 4 * w * w + 4 * w + (w * f + f) + (f * w + w);
    let head = if config.head_hidden == 0 {
        w * v.n_b + v.n_b
    } else {
        let k = config.head_hidden;
        w * k + k + k * v.n_b + v.n_b
    };
    ParamCount {
        embeddings,
        per_layer,
        layers: per_layer * config.n_layers,
        head,
    }
}
