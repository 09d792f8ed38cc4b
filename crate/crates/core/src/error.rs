use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row} has {found} fields, header has {expected}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("pivot {index} is singular (|g_kk| = {value:e})")]
    SingularPivot { index: usize, value: f64 },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),
    #[error("missingness pattern is not monotone")]
    NotMonotone,
    #[error("insufficient cases: {0}")]
    InsufficientCases(String),
    #[error("rank-deficient design: {0}")]
    RankDeficient(String),
    #[error("logistic fit diverged (coefficient norm {norm:.1}); data appear separated")]
    Separation { norm: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown discrepancy `{0}`")]
    UnknownDiscrepancy(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
