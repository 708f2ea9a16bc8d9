//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error at byte offset {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    #[error("attack failed: {0}")]
    Attack(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("unsupported input dimension {dim} (grid oracle supports at most {max})")]
    UnsupportedDimension { dim: usize, max: usize },

    #[error("stage `{stage}` failed: {detail}")]
    Stage { stage: String, detail: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
