use std::io;

use thiserror::Error;

/// Errors raised by estimators, data generators and file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter lies outside its valid domain (non-positive bandwidth, empty data, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Dimensions of two operands do not agree.
    #[error("shape error: expected dimension {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    /// Input data is malformed (NaN/Inf entries, ragged rows, unparsable values).
    #[error("data error: {0}")]
    Data(String),
    /// An operation was called on a model that is not in the required state.
    #[error("state error: {0}")]
    State(String),
    /// An internal invariant was violated.
    #[error("internal error: {0}")]
    Internal(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { expected, got })
    }
}
