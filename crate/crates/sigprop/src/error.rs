//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A correlation or covariance argument left its mathematical domain by
    /// more than the clamping tolerance.
    #[error("{name} = {value} outside [{lo}, {hi}] beyond tolerance")]
    Domain {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// A covariance pair violated q > 0 or |p| <= q.
    #[error("invalid covariance pair (q = {q}, p = {p}): {reason}")]
    InvalidCovariance { q: f64, p: f64, reason: &'static str },

    /// Doubling the quadrature order moved the result by more than the
    /// convergence tolerance.
    #[error("quadrature did not converge: relative change {rel_change} after doubling to order {order}")]
    QuadratureNoConverge { rel_change: f64, order: usize },

    /// The requested operation is undefined for this nonlinearity.
    #[error("operation not defined for {0}")]
    UnsupportedNonlinearity(&'static str),

    /// Theory driver restriction: p0 < 0 dynamics are out of scope.
    #[error("unsupported regime: initial p = {p} < 0")]
    UnsupportedRegime { p: f64 },

    /// Extended (J, K) recurrences need a finite context size.
    #[error("extended recurrence requires a finite context size")]
    InfiniteContext,

    /// Root bracketing failed: g has no sign change on the interval.
    #[error("no interior root: g({lo}) = {g_lo}, g({hi}) = {g_hi} have the same sign")]
    NoInteriorRoot { lo: f64, hi: f64, g_lo: f64, g_hi: f64 },

    /// Hyperparameter validation failure.
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),

    /// Simulator forward pass produced a non-finite activation.
    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },

    /// An array had the wrong shape for the requested operation.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// GMFE and log-space comparisons need strictly positive curves.
    #[error("curve value {value} at index {index} is not strictly positive")]
    NonPositiveCurve { index: usize, value: f64 },

    /// Experiment configuration error; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),

    #[error("unknown figure tag `{0}`")]
    UnknownFigure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidHyper(_) | Error::UnknownFigure(_) => 2,
            _ => 3,
        }
    }
}
