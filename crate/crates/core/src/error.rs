use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration; the message names the key.
    #[error("config error: {0}")]
    Config(String),

    #[error("failed to load frame {frame}: {reason}")]
    Load { frame: String, reason: String },

    #[error("index {index} out of range {lo}..={hi}")]
    Index { index: usize, lo: usize, hi: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bitstream error at byte {offset}: {reason}")]
    Bitstream { offset: usize, reason: String },

    #[error("checkpoint error in {path:?}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("non-finite loss at epoch {epoch}, step {step} (level {level})")]
    NonFinite { epoch: usize, step: usize, level: usize },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn bitstream(offset: usize, reason: impl Into<String>) -> Self {
        Error::Bitstream {
            offset,
            reason: reason.into(),
        }
    }
}
