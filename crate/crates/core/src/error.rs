use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum DpgError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: file is empty")]
    EmptyFile { path: PathBuf },

    #[error("line {line}: unknown domain label {label:?}")]
    UnknownDomain { line: usize, label: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no users survive filtering: {0}")]
    NoSurvivors(String),

    #[error("index {index} out of range for table of {size} rows ({what})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed training example: {0}")]
    MalformedExample(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl DpgError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DpgError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = DpgError> = std::result::Result<T, E>;
