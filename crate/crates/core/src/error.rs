use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every layer of the crate.
#[derive(Debug, Error)]
pub enum SimNetError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite gradient in parameter group `{group}`")]
    NonFinite { group: String },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimNetError>;

impl SimNetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimNetError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        SimNetError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
