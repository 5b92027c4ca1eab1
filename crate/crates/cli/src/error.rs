use std::path::PathBuf;

use bfm_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 usage/configuration, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) | Self::Io { .. } => 2,
            Self::Numeric(_) => 3,
            Self::Core(e) => match e {
                CoreError::InvalidConfig(_) => 1,
                CoreError::NonFinite { .. }
                | CoreError::Diverged { .. }
                | CoreError::InsufficientCapacity(_)
                | CoreError::Fit(_)
                | CoreError::FitNotConverged(_) => 3,
                _ => 2,
            },
        }
    }
}
