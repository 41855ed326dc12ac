use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("low-rank rank {rank} must be below min(rows, cols) = {limit} for every dense layer")]
    InvalidRank { rank: usize, limit: usize },

    #[error("metric `{0}` is not supported for this loss")]
    UnsupportedMetric(&'static str),

    #[error("cosine similarity is undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("need at least {needed} records to estimate variance, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at round {round}: {detail}")]
    Diverged { round: usize, detail: String },

    #[error("wire format: {0}")]
    Wire(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            context,
            expected,
            actual,
        }
    }
}
