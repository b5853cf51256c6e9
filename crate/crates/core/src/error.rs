//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("pipeline parse error: {0}")]
    Parse(String),
    #[error("pipeline validation failed: {0:?}")]
    InvalidPipeline(Vec<String>),
    #[error("operator precondition violated: {0}")]
    Precondition(String),
    #[error("missing measurement(s): {0:?}")]
    MissingMeasurements(Vec<String>),
    #[error("empty dataset: {0}")]
    EmptyData(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
