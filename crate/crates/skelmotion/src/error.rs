//! Crate-wide error type.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("insufficient frames: need at least {need}, got {got}")]
    InsufficientFrames { need: usize, got: usize },
    #[error("degenerate rotation: {0}")]
    DegenerateRotation(String),
    #[error("behind camera: {0}")]
    BehindCamera(String),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("corpus stats error: {0}")]
    Stats(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("sequence length error: {0}")]
    Length(String),
    #[error("shape audit failed:\n{0}")]
    Audit(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn parse(location: impl std::fmt::Display, message: impl Into<String>) -> Self {
        Error::Parse { location: location.to_string(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
