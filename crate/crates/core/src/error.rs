use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("odd or too small {axis} dimension: {size} (must be even and >= 2)")]
    Dimension { axis: &'static str, size: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("numeric divergence at {stage} step {step}: {detail}")]
    Divergence {
        stage: &'static str,
        step: usize,
        detail: String,
    },

    #[error("cannot plan cascade: {reason}; valid targets: {valid:?}")]
    Plan { reason: String, valid: Vec<usize> },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            context,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
