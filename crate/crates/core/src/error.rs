use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite coefficient `{name}` at (t={t}, y={y:?})")]
    NonFinite { name: String, t: f64, y: Vec<f64> },

    #[error("observation noise covariance singular at (t={t}, y={y:?}): condition number {condition:e}")]
    SingularObservationNoise { t: f64, y: Vec<f64>, condition: f64 },

    #[error("model assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("state blow-up on path {path} at step {step} (t={t}): |z|={norm:e}")]
    BlowUp { path: usize, step: usize, t: f64, norm: f64 },

    #[error("non-finite exponent at step {step}")]
    NonFiniteExponent { step: usize },

    #[error("time grids do not match: {0}")]
    GridMismatch(String),

    #[error("W lost positive definiteness at t={t} (step too large?)")]
    NotPositiveDefinite { t: f64 },

    #[error("density mass {mass:e} is not positive")]
    NonPositiveMass { mass: f64 },

    #[error("linear solve failed: {0}")]
    SolveFailed(String),

    #[error("correlated signal/observation noise is not supported by the particle oracle: |sigma|={norm:e} at t={t}")]
    CorrelatedNoise { t: f64, norm: f64 },

    #[error("test function support reaches the grid boundary")]
    SupportViolation,
}
