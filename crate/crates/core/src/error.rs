use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("cholesky factorization failed even with jitter {last_jitter:e}")]
    FactorizationFailed { last_jitter: f64 },

    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("label {label} is invalid for a head with {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("prior precision must be positive, got {0}")]
    NonPositiveDelta(f64),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset has {available} examples but {requested} were requested")]
    DatasetTooSmall { requested: usize, available: usize },

    #[error("bad IDX magic number {found:#010x} in {path} (expected {expected:#010x})")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated file {path}: needed {needed} bytes, found {found}")]
    TruncatedFile {
        path: PathBuf,
        needed: usize,
        found: usize,
    },

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("class {0} is not present in the dataset")]
    UnknownClass(usize),

    #[error("accuracy matrix is incomplete: {0}")]
    IncompleteMatrix(String),

    #[error("transfer metrics need at least two tasks")]
    SingleTask,

    #[error("forward transfer needs independent per-task accuracies")]
    MissingIndependentRuns,

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user-supplied configuration rather than numerics or IO.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Json(_))
    }

    /// True for failures of the numerical machinery itself.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NotSymmetric { .. } | Error::FactorizationFailed { .. } | Error::NonFinite(_)
        )
    }
}
