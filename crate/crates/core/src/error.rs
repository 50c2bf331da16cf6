//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("state error: {0}")]
    State(String),
    #[error("insufficient batch: need at least {need} samples, got {got}")]
    InsufficientBatch { need: usize, got: usize },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("undefined metric: empty cell {0}")]
    UndefinedMetric(String),
    #[error("insufficient class: {0}")]
    InsufficientClass(String),
    #[error("degenerate probe: zero weight direction")]
    DegenerateProbe,
    #[error("config error: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("underdetermined fit: {0}")]
    Underdetermined(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
