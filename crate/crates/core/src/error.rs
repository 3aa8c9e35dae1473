use std::path::PathBuf;

use thiserror::Error;

use crate::model_io::BundleError;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input row.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    /// Well-formed input that breaks an ordering or consistency rule.
    #[error("validation error at line {line}: {msg}")]
    Validation { line: u64, msg: String },

    /// Argument outside an operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse, e.g. backpropagating an inference-only pass.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("training aborted at epoch {epoch}: {msg}")]
    Training {
        epoch: usize,
        msg: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("quantization error in {layer}: {msg}")]
    Quantization { layer: String, msg: String },

    #[error(transparent)]
    Bundle(#[from] BundleError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
