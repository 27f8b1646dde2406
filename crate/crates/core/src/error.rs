use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("capacity exceeded: sequence length {len} above oracle limit {limit}")]
    Capacity { len: usize, limit: usize },

    #[error("invalid segment boundaries: {0}")]
    Boundary(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("user {user} has {count} interactions, at least 3 are required for a leave-one-out split")]
    Split { user: String, count: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Training {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
