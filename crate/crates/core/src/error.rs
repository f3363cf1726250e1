use std::fmt;

use thiserror::Error;

/// Row/column shape used in dimension errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimensionMismatch {
        context: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("model format version {found} is not supported (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("malformed model file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },

    #[error("model checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: u64, reason: String },

    #[error("channel count mismatch: model expects {expected}, data has {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
