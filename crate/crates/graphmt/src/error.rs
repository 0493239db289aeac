use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A record-level problem tied to a 1-based line number of an input file.
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },

    #[error("empty {0}")]
    EmptyGraph(&'static str),

    #[error("unknown embedding label: {0}")]
    MissingLabel(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("graph/stage mismatch: {0}")]
    StageMismatch(String),

    #[error("non-finite gradient in tensor {0}")]
    NonFinite(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
