use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("IDX parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid task mask {0}: both binary classes must be nonempty")]
    InvalidTask(u16),

    #[error("unsupported primitive in gradient graph: {0}")]
    UnsupportedPrimitive(&'static str),

    #[error("non-finite gradient at optimizer step {step}")]
    NonFiniteGradient { step: u64 },

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }
}
