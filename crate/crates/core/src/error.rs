use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite or degenerate raw value at pixel {pixel}: {reason}")]
    Decode { pixel: usize, reason: String },

    #[error("clip `{clip}`: {reason}")]
    Dataset { clip: String, reason: String },

    #[error("no clips found in {}", .0.display())]
    NoClips(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} on batch `{batch}`: {reason}")]
    Diverged {
        step: usize,
        batch: String,
        reason: String,
    },

    #[error("metric: {0}")]
    Metric(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

