use alloc::string::String;
use core::fmt;

use crate::linalg::LinalgError;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    Linalg(LinalgError),
    InvalidArgument(String),
    /// Dataset or cluster structure violates its invariants.
    InvalidData(String),
    /// `μ'(xᵀβ)` was not strictly positive.
    InvalidVariance {
        cluster: usize,
        obs: usize,
        value: f64,
    },
    /// Working correlation for cluster `cluster` is not positive definite.
    WorkingCorrelationNotPd {
        cluster: usize,
        lambda_min: f64,
    },
    /// Diagonal of a conditional covariance disagrees with the model variances.
    InconsistentMoments {
        index: usize,
        sigma: f64,
        variance: f64,
    },
    SingularDenominator {
        det: f64,
    },
    SingularDesign {
        lambda_min: f64,
    },
    SingularJacobian,
    UnsupportedMethod(&'static str),
    Config {
        field: String,
        reason: String,
    },
}

impl Error {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Linalg(e) => write!(f, "{e}"),
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::InvalidData(m) => write!(f, "invalid data: {m}"),
            Error::InvalidVariance { cluster, obs, value } => write!(
                f,
                "non-positive variance {value:e} at cluster {cluster}, observation {obs}"
            ),
            Error::WorkingCorrelationNotPd { cluster, lambda_min } => write!(
                f,
                "working correlation for cluster {cluster} is not positive definite (lambda_min = {lambda_min:e})"
            ),
            Error::InconsistentMoments { index, sigma, variance } => write!(
                f,
                "covariance diagonal {sigma} at position {index} does not match variance {variance}"
            ),
            Error::SingularDenominator { det } => {
                write!(f, "denominator determinant {det:e} is numerically singular")
            }
            Error::SingularDesign { lambda_min } => {
                write!(f, "normal matrix is singular (lambda_min = {lambda_min:e})")
            }
            Error::SingularJacobian => write!(f, "Jacobian is singular after ridge regularization"),
            Error::UnsupportedMethod(m) => write!(f, "unsupported method: {m}"),
            Error::Config { field, reason } => write!(f, "invalid config field `{field}`: {reason}"),
        }
    }
}

impl From<LinalgError> for Error {
    fn from(e: LinalgError) -> Self {
        Error::Linalg(e)
    }
}

impl core::error::Error for Error {}
