use thiserror::Error;

use crate::estimators::DetectorTrace;

/// Errors produced by the detectors, the priors and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is numerically singular (estimated condition number {cond:.3e})")]
    Conditioning { cond: f64 },

    #[error("rank-one update is singular (denominator {denom:.3e})")]
    SingularUpdate { denom: f64 },

    #[error("surrogate curvature underflow at device {device}: q = {q:.3e} below bound {bound:.3e}")]
    DegenerateCurvature { device: usize, q: f64, bound: f64 },

    #[error("unknown method id `{0}`")]
    UnknownMethod(String),

    #[error("detector aborted at iteration {iteration}: {reason}")]
    Aborted {
        iteration: usize,
        reason: Box<Error>,
        trace: Box<DetectorTrace>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
