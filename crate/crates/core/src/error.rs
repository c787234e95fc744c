use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("inconsistent M: episode `{episode}` has {found} bins, expected {expected}")]
    InconsistentM {
        episode: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid bar in episode `{episode}`, bin {bin}, asset `{asset}`: {reason}")]
    InvalidBar {
        episode: String,
        bin: usize,
        asset: String,
        reason: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parameter `{name}` out of range: {reason}")]
    OutOfRange { name: &'static str, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("no manipulation found within {iterations} halvings")]
    NoManipulation { iterations: usize },

    #[error("degenerate abscissa: {0}")]
    DegenerateAbscissa(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn out_of_range(name: &'static str, reason: impl Into<String>) -> Self {
        Error::OutOfRange {
            name,
            reason: reason.into(),
        }
    }
}
