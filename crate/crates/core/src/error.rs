use std::path::PathBuf;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, symmetry, or other structural contracts violated.
    #[error("structural error: {0}")]
    Structural(String),

    /// Not enough nodes to satisfy a request.
    #[error("capacity error: {what} needs {needed} nodes but only {available} are available")]
    Capacity {
        what: String,
        needed: usize,
        available: usize,
    },

    /// An operation was called outside its precondition.
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value appeared in a computation.
    #[error("numeric error in {layer}: non-finite value")]
    Numeric { layer: String },

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("unknown dataset {name:?}; known datasets: {known}")]
    UnknownDataset { name: String, known: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Rejected(#[from] crate::active::AnswerRejection),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
