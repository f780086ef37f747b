use thiserror::Error;

/// Errors raised by model construction and the numerical drivers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid base space: {0}")]
    InvalidSpace(String),

    #[error("dimension mismatch: expected {expected} atoms, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unknown atom index {index} (space has {len} atoms)")]
    UnknownAtom { index: usize, len: usize },

    #[error("invalid mixing measure: {0}")]
    InvalidMixing(String),

    #[error("moment of order {order} diverges or is not resolved: {reason}")]
    DivergentMoment { order: u32, reason: String },

    #[error("scale normalizer underflows for total count {count}: {hint}")]
    NormalizerUnderflow { count: u64, hint: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("functional `{0}` has no declared sup bound")]
    UnboundedFunctional(String),

    #[error("error budget overflow: {0}")]
    BudgetOverflow(String),

    #[error("hypothesis not met: {0}")]
    HypothesisUnmet(String),

    #[error("eigensolver did not converge after {iterations} iterations (bracket [{lower}, {upper}])")]
    NoConvergence {
        iterations: usize,
        lower: f64,
        upper: f64,
    },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
