use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch { context: &'static str, expected: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient negatives: eligible pool holds {pool}, need {requested}")]
    InsufficientNegatives { pool: usize, requested: usize },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("checkpoint was written for config {found}, current config is {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("non-finite loss at step {step} (epoch {epoch})")]
    Divergence { step: u64, epoch: usize },

    #[error("unknown sample id {0}")]
    MissingId(String),

    #[error("{0}")]
    Protocol(String),

    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub(crate) fn ensure_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { context, expected, got })
    }
}
