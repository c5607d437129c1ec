use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Missing or malformed metadata on disk.
    #[error("schema error at {path}: {reason}")]
    Schema { path: PathBuf, reason: String },

    /// Image data that violates a record invariant.
    #[error("integrity error in set {set_id}: {reason}")]
    Integrity { set_id: String, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    /// A NaN or infinity appeared; `stage` names where.
    #[error("non-finite value at {stage}")]
    NonFinite { stage: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn integrity(set_id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Integrity {
            set_id: set_id.into(),
            reason: reason.into(),
        }
    }
}
