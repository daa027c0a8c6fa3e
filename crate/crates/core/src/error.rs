use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte {offset}{}: {message}", record.map(|r| format!(" (record {r})")).unwrap_or_default())]
    Format {
        offset: u64,
        record: Option<usize>,
        message: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn format(offset: u64, record: Option<usize>, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            record,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
