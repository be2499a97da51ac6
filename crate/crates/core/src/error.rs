use thiserror::Error;

use crate::linalg::LinalgError;
use crate::trajectory::Trajectory;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("input covariance is not the identity (|sigma_xx - I|_F = {deviation:.3e}); whiten the dataset first")]
    NotWhitened { deviation: f64 },

    /// The partial trajectory up to the last finite step is kept so callers
    /// can still flush it.
    #[error("divergence at step {step}: {reason}")]
    Divergence {
        step: usize,
        reason: String,
        partial: Box<Option<Trajectory>>,
    },

    #[error("{what} index {index} out of range (valid: {valid})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        valid: String,
    },

    #[error("need at least {needed} snapshots, trajectory has {got}")]
    InsufficientSnapshots { needed: usize, got: usize },

    #[error("alignment broken at layer {layer}: off-diagonal projection residual {residual:.3e}")]
    AlignmentBroken { layer: usize, residual: f64 },

    #[error("{what}: value {value} outside domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: String,
    },

    #[error(
        "input covariance is singular: eigenvalue {eigenvalue:.3e} at or below {threshold:.0e}"
    )]
    RankDeficient { eigenvalue: f64, threshold: f64 },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error(transparent)]
    Idx(#[from] crate::data::IdxError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
