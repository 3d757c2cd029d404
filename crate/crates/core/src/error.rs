use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero-norm row for class {0}")]
    ZeroRow(String),

    #[error("zero-norm embedding")]
    ZeroEmbedding,

    #[error("non-deterministic loss: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("class alignment: {0}")]
    Alignment(String),

    #[error("no classes found under {0}")]
    NoClasses(PathBuf),

    #[error("unreadable image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("checkpoint version mismatch: file has v{found}, this build reads v{expected}")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch (file truncated or corrupted)")]
    Checksum,

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
