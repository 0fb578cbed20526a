//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by prerankcal operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Vector or matrix dimensions do not agree.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A projection was requested without the context field it needs.
    #[error("pre-rank `{prerank}` requires a {field} in the projection context")]
    MissingContext {
        prerank: &'static str,
        field: &'static str,
    },

    /// Not enough samples for the requested operation.
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    /// A metric was requested on an empty batch.
    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    /// A parameter violates its contract.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A data file could not be interpreted.
    #[error("data format error: {0}")]
    Format(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch_index}")]
    NanLoss { epoch: usize, batch_index: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
