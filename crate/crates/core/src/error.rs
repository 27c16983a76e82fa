use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("capacity error: {gts} ground-truth instances exceed {queries} queries")]
    Capacity { gts: usize, queries: usize },

    #[error("objectness window lies outside the attention grid: {0}")]
    Score(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("parse error in {context} at record {line}: {message}")]
    Parse {
        context: String,
        line: usize,
        message: String,
    },

    #[error("unsupported schema version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: file is corrupted")]
    Checksum,

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("missing prerequisite: {}", .0.display())]
    Missing(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
