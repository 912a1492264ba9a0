use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {layer}: expected {expected}, found {found}")]
    Shape {
        layer: String,
        expected: usize,
        found: usize,
    },

    #[error("stale activation trace: {0}")]
    Trace(String),

    #[error("answer id {id} outside vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("value {value} outside [0, 1] for {what}")]
    Range { what: String, value: f64 },

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("{path}:{line}: field `{field}`: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("embedding error: {0}")]
    Embedding(String),

    #[error("strategy state error: {0}")]
    State(String),

    #[error("head error: {0}")]
    Head(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("prediction log incomplete: {0}")]
    LogIncomplete(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("training diverged in task {task} at step {step}: {message}")]
    Diverged {
        task: usize,
        step: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is numeric (divergence or non-finite values).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}
