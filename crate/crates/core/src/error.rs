use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate softmax row {row}: no finite entries")]
    DegenerateRow { row: usize },

    #[error("cosine similarity undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("cache error: {0}")]
    Cache(String),

    #[error("eviction decision references position {position} absent from layer {layer} head {head}")]
    UnknownPosition {
        layer: usize,
        head: usize,
        position: usize,
    },

    #[error("allocation error: {0}")]
    Allocation(String),

    #[error("degenerate uncertainty profile: every LMBA is zero")]
    DegenerateProfile,

    #[error("observation window {window} exceeds sequence length {len}")]
    Window { window: usize, len: usize },

    #[error("policy config error: {0}")]
    Policy(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("trace version mismatch: expected {expected:?}, found {found:?}")]
    Version { expected: String, found: String },

    #[error("row sum {sum} outside 1 ± 1e-6 at layer {layer}, head {head}, row {row}")]
    RowSum {
        layer: usize,
        head: usize,
        row: usize,
        sum: f64,
    },

    #[error("trace error at line {line}: {message}")]
    Trace { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
