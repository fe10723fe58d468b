use thiserror::Error;

use crate::gee_fit::FitResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("invalid treatment sequence: {0}")]
    InvalidSequence(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model specification: {0}")]
    InvalidModel(String),

    #[error("mean {mu} is outside the mean space of the {family} family")]
    MeanOutOfRange { mu: f64, family: &'static str },

    #[error("{structure} correlation requires {lower} < alpha < {upper}, got {alpha}")]
    AlphaOutOfRange {
        structure: &'static str,
        alpha: f64,
        lower: f64,
        upper: f64,
    },

    #[error("enumerating {count} sequences exceeds the cap of {cap}; supply an explicit list")]
    EnumerationCap { count: u128, cap: usize },

    #[error("working covariance is numerically singular (reciprocal condition {rcond:.3e})")]
    SingularCovariance { rcond: f64 },

    #[error("non-estimable under this design: information has rank {rank} of {dim}")]
    NonEstimable { rank: usize, dim: usize },

    #[error("prior point {index} is non-estimable under this design: information has rank {rank} of {dim}")]
    NonEstimablePoint {
        index: usize,
        rank: usize,
        dim: usize,
    },

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),

    #[error("no estimable starting design: best information rank {rank} of {dim}")]
    NoEstimableStart { rank: usize, dim: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("design matrix is rank deficient: rank {rank} of {dim}")]
    RankDeficient { rank: usize, dim: usize },

    #[error("GEE iteration diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("separation detected in binary data: {reason}")]
    Separation {
        reason: String,
        partial: Option<Box<FitResult>>,
    },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("{failed} of {total} replications failed to converge")]
    ExcessiveFailures { failed: usize, total: usize },

    #[error("unsupported layout for catalog: {0}")]
    UnsupportedCatalog(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
