use thiserror::Error;

/// Errors shared by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A data value outside the support of the observation family.
    #[error("{family} support violated at row {row}, column {col}: {value}")]
    Support {
        family: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("load error at row {row}, column {col}: {msg}")]
    Load { row: usize, col: usize, msg: String },

    #[error("holdout split infeasible: {0}")]
    SplitInfeasible(String),

    #[error("non-finite predictive log-probability at test index {index}")]
    NonFinitePrediction { index: usize },

    #[error("empty chain: at least one kept sample is required")]
    EmptyChain,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("metadata: {0}")]
    Metadata(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
