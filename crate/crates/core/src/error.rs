use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AcmtError>;

#[derive(Debug, Error)]
pub enum AcmtError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corrupt dataset at {path}: {reason}")]
    CorruptDataset { path: PathBuf, reason: String },

    #[error("corrupt checkpoint at {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A loss component or intermediate state became NaN/inf.
    #[error("non-finite value in {component}: {detail}")]
    NonFinite { component: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AcmtError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        AcmtError::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        AcmtError::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AcmtError::Io {
            path: path.into(),
            source,
        }
    }
}
