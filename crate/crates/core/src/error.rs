//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by codecs, model construction, training, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Array shapes do not agree with what the operation requires.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Input values violate a precondition (negative intensities, bad ranges, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Configuration is internally inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Checkpoint file is malformed or incompatible with the requested config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training loss became non-finite; a diagnostic dump is written next to the run dir.
    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFiniteLoss { iter: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
