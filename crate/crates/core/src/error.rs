use thiserror::Error;

use crate::expr::{DomainError, ExprError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("finite escape at t = {time:e}: {reason}")]
    FiniteEscape { time: f64, reason: String },
    #[error("flow oracle exceeded {max_steps} steps")]
    MaxStepsExceeded { max_steps: usize },
    #[error("unknown tableau `{0}`")]
    UnknownTableau(String),
    #[error("invalid tableau: {0}")]
    InvalidTableau(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("system is not control-affine with identity input (residual {residual:e})")]
    NotControlAffine { residual: f64 },
    #[error("no certificate: {0}")]
    NoCertificate(String),
    #[error("no admissible sampling period down to {floor:e}")]
    NoAdmissiblePeriod { floor: f64 },
    #[error("parameters must satisfy 0 < eta < delta < 1 (got delta = {delta}, eta = {eta})")]
    ParameterOrder { delta: f64, eta: f64 },
    #[error("oracle re-integration differs from trajectory at step {step} by {deviation:e}")]
    OracleMismatch { step: usize, deviation: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
}
