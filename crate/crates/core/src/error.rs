use std::io;

use thiserror::Error;

use crate::rolling_hash::Fingerprint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input is empty")]
    EmptyInput,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index {index} out of range for {len} elements")]
    OutOfRange { index: usize, len: usize },

    #[error("corrupt index at byte {offset}: {reason}")]
    CorruptIndex { offset: usize, reason: String },

    #[error("unknown version {0}")]
    UnknownVersion(String),

    #[error("tag {0:?} already exists")]
    TagConflict(String),

    #[error("chunk {0} is missing from the store")]
    MissingChunk(Fingerprint),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("store is locked by another process: {0}")]
    Locked(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("transfer failed: {0}")]
    Transfer(String),

    #[error("storage error: {0}")]
    Storage(#[from] io::Error),
}

impl Error {
    pub(crate) fn corrupt(offset: usize, reason: impl Into<String>) -> Self {
        Error::CorruptIndex {
            offset,
            reason: reason.into(),
        }
    }

    /// Transfer errors caused by the connection rather than by content can be retried.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transfer(_))
    }
}
