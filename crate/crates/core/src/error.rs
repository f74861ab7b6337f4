//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or argument values (maps to CLI exit code 1).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or unusable corpus data.
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Tensor/shape mismatch between operands or against a model config.
    #[error("shape error: {0}")]
    Shape(String),

    /// Checkpoint file is malformed or incompatible with the loaded vocab/config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Numeric failure at run time (non-finite values, degenerate inputs).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 for usage/config problems, 2 for
    /// runtime/numeric problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
