//! Pluggable models of the nonlinearity `N(u, J, z; theta)`.
//!
//! Every model supplies its value on the cells together with exact partial
//! derivatives with respect to the cell field `u` and the nodal field `J`,
//! and a vector-Jacobian product against its trainable parameters. The
//! derivative contract is what the implicit solver and the adjoint sweep
//! build on, so it is checked against finite differences in the tests.

mod analytic;
mod transformer;

pub use analytic::{DissipativeModel, HamiltonianModel, Potential, ZeroModel};
pub use transformer::{LocalTransformer, LocalTransformerConfig};

use nalgebra::{DMatrix, DVector};

use crate::error::ModelError;
use crate::mesh::{DgP0Field, P1Field};

/// Problem parameters injected into the nonlinearity (e.g. a damping
/// coefficient or a log-Reynolds number). May be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningVector(pub DVector<f64>);

impl ConditioningVector {
    pub fn new(z: Vec<f64>) -> Result<Self, ModelError> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteInput);
        }
        Ok(Self(DVector::from_vec(z)))
    }

    pub fn empty() -> Self {
        Self(DVector::zeros(0))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Dynamic tanh normalization: `gamma .* tanh(alpha * x) + beta`.
pub fn dyt(x: &[f64], alpha: f64, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), gamma.len());
    assert_eq!(x.len(), beta.len());
    x.iter()
        .zip(gamma.iter().zip(beta.iter()))
        .map(|(&xi, (&g, &b))| g * (alpha * xi).tanh() + b)
        .collect()
}

/// A nonlinearity with exact derivatives.
///
/// Partial-derivative matrices use the flat index `cell * d + component` for
/// cell quantities and `node * d + component` for nodal quantities, matching
/// a row-major flattening of the field matrices.
pub trait NonlinearityModel: Send + Sync {
    fn state_dim(&self) -> usize;

    fn conditioning_dim(&self) -> usize {
        0
    }

    /// Number of trainable parameters.
    fn n_params(&self) -> usize;

    /// Current parameter values, length `n_params`.
    fn theta(&self) -> Vec<f64>;

    /// Replace the parameters.
    fn set_theta(&mut self, theta: &[f64]) -> Result<(), ModelError>;

    /// Cell values of the nonlinearity.
    fn evaluate(
        &self,
        u: &DgP0Field,
        j: &P1Field,
        z: &ConditioningVector,
    ) -> Result<DgP0Field, ModelError>;

    /// `(dN/du, dN/dJ)` with shapes `(M d) x (M d)` and `(M d) x ((M+1) d)`.
    fn partials(
        &self,
        u: &DgP0Field,
        j: &P1Field,
        z: &ConditioningVector,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError>;

    /// `cotangent^T dN/dtheta`, length `n_params`. The cotangent has the
    /// output's shape.
    fn theta_vjp(
        &self,
        u: &DgP0Field,
        j: &P1Field,
        z: &ConditioningVector,
        cotangent: &DgP0Field,
    ) -> Result<DVector<f64>, ModelError>;
}

pub(crate) fn check_inputs(
    dim: usize,
    u: &DgP0Field,
    j: &P1Field,
    z: &ConditioningVector,
) -> Result<(), ModelError> {
    if u.dim() != dim || j.dim() != dim {
        return Err(ModelError::Shape(crate::error::ShapeError::StateDim {
            expected: dim,
            got: u.dim(),
        }));
    }
    if j.values.nrows() != u.values.nrows() + 1 {
        return Err(ModelError::Shape(crate::error::ShapeError::RowCount {
            expected: u.values.nrows() + 1,
            got: j.values.nrows(),
        }));
    }
    if !u.is_finite() || !j.is_finite() || z.0.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteInput);
    }
    Ok(())
}

/// Largest absolute entry of the input partials over a sampled ball of
/// inputs. Finiteness of this bound is the precondition for the uniform
/// gradient estimates, so it is exposed as a diagnostic sweep.
pub fn partial_bound_sweep(
    model: &dyn NonlinearityModel,
    m_cells: usize,
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64, ModelError> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = model.state_dim();
    let p = model.conditioning_dim();
    let mut bound = 0.0f64;
    for _ in 0..n_samples {
        let u = DgP0Field::new(DMatrix::from_fn(m_cells, d, |_, _| {
            rng.random_range(-radius..radius)
        }));
        let j = P1Field::new(DMatrix::from_fn(m_cells + 1, d, |_, _| {
            rng.random_range(-radius..radius)
        }));
        let z = ConditioningVector::new((0..p).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let (du, dj) = model.partials(&u, &j, &z)?;
        bound = bound.max(du.amax()).max(dj.amax());
    }
    if !bound.is_finite() {
        return Err(ModelError::NonFiniteOutput);
    }
    Ok(bound)
}
