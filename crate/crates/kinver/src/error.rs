//! Crate-wide error type and process exit-code mapping.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by dataset ingestion, sampling, model evaluation and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or usage (exit code 1).
    #[error("configuration error: {0}")]
    Config(String),

    /// A malformed row in an index or manifest file (exit code 1).
    #[error("parse error in {path}, line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Data that parsed but violates a dataset invariant (exit code 1).
    #[error("validation error: {0}")]
    Validation(String),

    /// Vector or layer dimensions that do not agree (exit code 1).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A mathematical precondition was violated (zero-norm input, non-positive
    /// temperature, ...) (exit code 1).
    #[error("domain error: {0}")]
    Domain(String),

    /// A sampler or batch invariant failed at runtime (exit code 2).
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Training produced a non-finite loss (exit code 3).
    #[error("non-finite loss at step {step} (batch families: {families:?})")]
    NonFiniteLoss { step: usize, families: Vec<String> },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 invariant violation,
    /// 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invariant(_) => 2,
            Error::NonFiniteLoss { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
