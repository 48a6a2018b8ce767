use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("channel count {channels} is not divisible by {groups} groups")]
    Divisibility { channels: usize, groups: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
