use std::io;

use climdiff_autograd::NnError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension too small: {0}")]
    DimensionTooSmall(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),

    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("timestep {t} out of range for {timesteps} steps")]
    TimestepOutOfRange { t: usize, timesteps: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error(transparent)]
    Nn(#[from] NnError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}
