use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar hyper-parameter outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A caller broke an API precondition (non-scalar loss, misaligned gradients, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Zero-norm vectors, zero-variance distributions and similar.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// NaN or Inf in an intermediate value.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path} at offset {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training produced a NaN/Inf loss; carries the ids of the offending batch.
    #[error("non-finite loss at epoch {epoch}, step {step} (videos: {video_ids:?}, queries: {query_ids:?})")]
    NonFinite {
        epoch: usize,
        step: usize,
        video_ids: Vec<String>,
        query_ids: Vec<String>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
