use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid scene spec field `{field}`: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error("numeric failure (non-finite value) at iteration {iter}")]
    NumericFailure { iter: usize },
    #[error("missing state: {0}")]
    MissingState(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
