use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Input tensor or image dimensions do not satisfy a geometric requirement.
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Inconsistent model or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Loss became non-finite during optimization.
    #[error("training failure at step {step}: {reason}")]
    Training { step: usize, reason: String },

    /// A dataset file is missing or malformed.
    #[error("ingestion error in {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
