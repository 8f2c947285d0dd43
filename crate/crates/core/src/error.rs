use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("integration failed at t = {t}: step size {step:e} underflowed")]
    StepUnderflow { t: f64, step: f64 },

    #[error("integration failed at t = {t}: non-finite state")]
    NonFiniteState { t: f64 },

    #[error("{what} is numerically singular: effective rank {rank} of {size}")]
    RankDeficient {
        what: &'static str,
        rank: usize,
        size: usize,
    },

    #[error("{what} is ill-conditioned (condition number {condition:e})")]
    IllConditioned { what: &'static str, condition: f64 },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("principal logarithm undefined: eigenvalue {re} {im:+}i lies on or near the negative real axis")]
    BranchCut { re: f64, im: f64 },

    #[error("non-finite values at {count} grid points (first at {first:?})")]
    NonFinite { count: usize, first: Vec<f64> },

    #[error("sample {index} failed: {source}")]
    SampleFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures of the numerics rather than of the caller's input or
    /// the filesystem.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::StepUnderflow { .. }
                | Error::NonFiniteState { .. }
                | Error::RankDeficient { .. }
                | Error::IllConditioned { .. }
                | Error::Eigen(_)
                | Error::BranchCut { .. }
                | Error::NonFinite { .. }
                | Error::SampleFailed { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Csv(_))
    }
}
