//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value or combination.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Operation is not valid in the current object state (merged/unmerged, stale cache, ...).
    #[error("invalid state: {0}")]
    State(String),

    /// Input that makes the operation undefined (zero vector, too-short trace, ...).
    #[error("degenerate input: {0}")]
    Input(String),

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss at step {step} (clamp events so far: {clamp_events})")]
    NonFinite { step: usize, clamp_events: usize },

    /// Malformed or unsupported checkpoint bytes.
    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
