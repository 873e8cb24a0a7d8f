//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("duplicate article id {id} at line {line}")]
    DuplicateArticleId { id: String, line: usize },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("index out of range: {what} = {got}, limit {limit}")]
    OutOfRange {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("stage {stage} failed: {msg}")]
    Stage { stage: String, msg: String },

    #[error("stale artifact {path}: recorded hash does not match file contents (use force to rebuild)")]
    StaleArtifact { path: String },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
