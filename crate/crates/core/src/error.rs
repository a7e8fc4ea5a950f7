//! Error types shared across the crate.

use thiserror::Error;

/// Invalid mesh or field dimensions.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ShapeError {
    #[error("expected {expected} rows, got {got}")]
    RowCount { expected: usize, got: usize },
    #[error("state dimension mismatch: expected {expected}, got {got}")]
    StateDim { expected: usize, got: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Failures while assembling or factoring the linear blocks.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeecError {
    #[error("mass matrix is singular; assembly is inconsistent")]
    SingularMass,
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Failures raised by nonlinearity models.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("non-finite value in model input")]
    NonFiniteInput,
    #[error("non-finite value in model output")]
    NonFiniteOutput,
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("parameter vector has length {got}, model expects {expected}")]
    ParamLength { expected: usize, got: usize },
}

/// Failures of a single per-domain nonlinear solve.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("Newton did not converge within the iteration budget (residual norm {residual_norm:.3e})")]
    NonConvergence { residual_norm: f64 },
    #[error("singular Jacobian in the linear solver")]
    SingularJacobian,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// A solve failure tagged with the rollout domain where it occurred.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("rollout failed at domain {domain}: {source}")]
pub struct RolloutError {
    pub domain: usize,
    #[source]
    pub source: SolveError,
}
