use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline. Each variant corresponds to one error
/// class of the data contracts.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("bad magic bytes in {0}")]
    Magic(String),
    #[error("truncated payload: expected {expected} values, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("index out of range: {0}")]
    Index(String),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("size mismatch: {0}")]
    Size(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
