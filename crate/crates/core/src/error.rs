use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid label: {0}")]
    Label(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sum of correlation coefficients reached {0} (must stay below 1)")]
    RhoSum(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("covariance matrix is not positive definite (coordinate {0})")]
    NotPositiveDefinite(usize),

    #[error("training diverged {0} consecutive times")]
    Diverged(usize),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
