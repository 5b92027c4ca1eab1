use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("line {line}: field `{field}` = {value} out of range (size {size})")]
    OutOfRange {
        line: usize,
        field: &'static str,
        value: u64,
        size: usize,
    },

    #[error("line {line}: duplicate record for user {user} at pos {pos}")]
    DuplicateRecord { line: usize, user: u64, pos: u64 },

    #[error("event {event} labeled with behaviors {first} and {second}")]
    InconsistentEvent { event: u32, first: u32, second: u32 },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },

    #[error("forward trace was produced without gradient caches")]
    MissingCache,

    #[error("total capacity {0} < 1 after masking")]
    InsufficientCapacity(f64),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint is truncated ({0})")]
    Truncated(String),

    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("transfer: {0}")]
    Transfer(String),

    #[error("fit: {0}")]
    Fit(String),

    #[error("fit did not converge from any start (best rss {})", .0.rss)]
    FitNotConverged(Box<crate::scalelab::FitResult>),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
