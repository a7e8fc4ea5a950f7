//! Closed-form nonlinearities used by the energy diagnostics and as cheap
//! gradient-check subjects.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_inputs, ConditioningVector, NonlinearityModel};
use crate::error::ModelError;
use crate::mesh::{DgP0Field, P1Field};

/// Scalar potential applied component-wise. `v_prime` is the forcing that
/// enters the dynamics as `u'' = V'(u)`; the harmonic oscillator with
/// frequency `w` is `coeff = w^2` of the quadratic kind, giving
/// `V'(u) = -w^2 u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Potential {
    Zero,
    /// `V(u) = -coeff * u^2 / 2`, `V'(u) = -coeff * u`.
    Quadratic { coeff: f64 },
    /// `V(u) = coeff * cos(u)`, `V'(u) = -coeff * sin(u)` (pendulum).
    Pendulum { coeff: f64 },
}

impl Potential {
    pub fn v(&self, u: f64) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Quadratic { coeff } => -0.5 * coeff * u * u,
            Potential::Pendulum { coeff } => coeff * u.cos(),
        }
    }

    pub fn v_prime(&self, u: f64) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Quadratic { coeff } => -coeff * u,
            Potential::Pendulum { coeff } => -coeff * u.sin(),
        }
    }

    pub fn v_double_prime(&self, u: f64) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Quadratic { coeff } => -coeff,
            Potential::Pendulum { coeff } => -coeff * u.cos(),
        }
    }

    fn coeff(&self) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Quadratic { coeff } | Potential::Pendulum { coeff } => *coeff,
        }
    }

    fn with_coeff(&self, c: f64) -> Potential {
        match self {
            Potential::Zero => Potential::Zero,
            Potential::Quadratic { .. } => Potential::Quadratic { coeff: c },
            Potential::Pendulum { .. } => Potential::Pendulum { coeff: c },
        }
    }

    /// Derivative of `V'(u)` with respect to the coefficient.
    fn v_prime_dcoeff(&self, u: f64) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Quadratic { .. } => -u,
            Potential::Pendulum { .. } => -u.sin(),
        }
    }
}

/// The trivial nonlinearity `N = 0`; the solved dynamics are free motion.
#[derive(Debug, Clone)]
pub struct ZeroModel {
    pub dim: usize,
}

impl NonlinearityModel for ZeroModel {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn n_params(&self) -> usize {
        0
    }

    fn theta(&self) -> Vec<f64> {
        Vec::new()
    }

    fn set_theta(&mut self, theta: &[f64]) -> Result<(), ModelError> {
        if !theta.is_empty() {
            return Err(ModelError::ParamLength { expected: 0, got: theta.len() });
        }
        Ok(())
    }

    fn evaluate(
        &self,
        u: &DgP0Field,
        j: &P1Field,
        z: &ConditioningVector,
    ) -> Result<DgP0Field, ModelError> {
        check_inputs(self.dim, u, j, z)?;
        Ok(DgP0Field::zeros(u.m_cells(), self.dim))
    }

    fn partials(
        &self,
        u: &DgP0Field,
        j: &P1Field,
        z: &ConditioningVector,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        check_inputs(self.dim, u, j, z)?;
        let m = u.m_cells();
        Ok((DMatrix::zeros(m * self.dim, m * self.dim), DMatrix::zeros(m * self.dim, (m + 1) * self.dim)))
    }

    fn theta_vjp(
        &self,
        _u: &DgP0Field,
        _j: &P1Field,
        _z: &ConditioningVector,
        _cotangent: &DgP0Field,
    ) -> Result<DVector<f64>, ModelError> {
        Ok(DVector::zeros(0))
    }
}

/// `N = V'(u)` applied cell-wise and component-wise. When `trainable`, the
/// potential coefficient is the single parameter.
#[derive(Debug, Clone)]
pub struct HamiltonianModel {
    dim: usize,
    potential: Potential,
    trainable: bool,
}

impl HamiltonianModel {
    pub fn new(dim: usize, potential: Potential) -> Self {
        Self { dim, potential, trainable: false }
    }

    pub fn trainable(dim: usize, potential: Potential) -> Self {
        Self { dim, potential, trainable: true }
    }

    pub fn potential(&self) -> Potential {
        self.potential
    }
}

impl NonlinearityModel for HamiltonianModel {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn n_params(&self) -> usize {
        if self.trainable {
            1
        } else {
            0
        }
    }

    fn theta(&self) -> Vec<f64> {
        if self.trainable {
            vec![self.potential.coeff()]
        } else {
            Vec::new()
        }
    }

    fn set_theta(&mut self, theta: &[f64]) -> Result<(), ModelError> {
        if theta.len() != self.n_params() {
            return Err(ModelError::ParamLength { expected: self.n_params(), got: theta.len() });
        }
        if self.trainable {
            self.potential = self.potential.with_coeff(theta[0]);
        }
        Ok(())
    }

    fn evaluate(
        &self,
        u: &DgP0Field,
        j: &P1Field,
        z: &ConditioningVector,
    ) -> Result<DgP0Field, ModelError> {
        check_inputs(self.dim, u, j, z)?;
        Ok(DgP0Field::new(u.values.map(|v| self.potential.v_prime(v))))
    }

    fn partials(
        &self,
        u: &DgP0Field,
        j: &P1Field,
        z: &ConditioningVector,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        check_inputs(self.dim, u, j, z)?;
        let m = u.m_cells();
        let d = self.dim;
        let mut du = DMatrix::zeros(m * d, m * d);
        for k in 0..m {
            for c in 0..d {
                let idx = k * d + c;
                du[(idx, idx)] = self.potential.v_double_prime(u.values[(k, c)]);
            }
        }
        Ok((du, DMatrix::zeros(m * d, (m + 1) * d)))
    }

    fn theta_vjp(
        &self,
        u: &DgP0Field,
        j: &P1Field,
        z: &ConditioningVector,
        cotangent: &DgP0Field,
    ) -> Result<DVector<f64>, ModelError> {
        check_inputs(self.dim, u, j, z)?;
        if !self.trainable {
            return Ok(DVector::zeros(0));
        }
        let mut acc = 0.0;
        for k in 0..u.m_cells() {
            for c in 0..self.dim {
                acc += cotangent.values[(k, c)] * self.potential.v_prime_dcoeff(u.values[(k, c)]);
            }
        }
        Ok(DVector::from_vec(vec![acc]))
    }
}

/// `N = V'(u) - beta * (pi J)`: a conservative force plus linear damping on
/// the cell average of the rate. `beta > 0` makes every rollout domain
/// dissipate the discrete energy. When `trainable_beta`, `theta = (beta)`.
#[derive(Debug, Clone)]
pub struct DissipativeModel {
    dim: usize,
    potential: Potential,
    beta: f64,
    trainable_beta: bool,
}

impl DissipativeModel {
    pub fn new(dim: usize, potential: Potential, beta: f64) -> Self {
        Self { dim, potential, beta, trainable_beta: false }
    }

    pub fn trainable(dim: usize, potential: Potential, beta: f64) -> Self {
        Self { dim, potential, beta, trainable_beta: true }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn potential(&self) -> Potential {
        self.potential
    }

    fn cell_average(j: &P1Field, k: usize, c: usize) -> f64 {
        0.5 * (j.values[(k, c)] + j.values[(k + 1, c)])
    }
}

impl NonlinearityModel for DissipativeModel {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn n_params(&self) -> usize {
        if self.trainable_beta {
            1
        } else {
            0
        }
    }

    fn theta(&self) -> Vec<f64> {
        if self.trainable_beta {
            vec![self.beta]
        } else {
            Vec::new()
        }
    }

    fn set_theta(&mut self, theta: &[f64]) -> Result<(), ModelError> {
        if theta.len() != self.n_params() {
            return Err(ModelError::ParamLength { expected: self.n_params(), got: theta.len() });
        }
        if self.trainable_beta {
            self.beta = theta[0];
        }
        Ok(())
    }

    fn evaluate(
        &self,
        u: &DgP0Field,
        j: &P1Field,
        z: &ConditioningVector,
    ) -> Result<DgP0Field, ModelError> {
        check_inputs(self.dim, u, j, z)?;
        let m = u.m_cells();
        let mut out = DMatrix::zeros(m, self.dim);
        for k in 0..m {
            for c in 0..self.dim {
                out[(k, c)] = self.potential.v_prime(u.values[(k, c)])
                    - self.beta * Self::cell_average(j, k, c);
            }
        }
        Ok(DgP0Field::new(out))
    }

    fn partials(
        &self,
        u: &DgP0Field,
        j: &P1Field,
        z: &ConditioningVector,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        check_inputs(self.dim, u, j, z)?;
        let m = u.m_cells();
        let d = self.dim;
        let mut du = DMatrix::zeros(m * d, m * d);
        let mut dj = DMatrix::zeros(m * d, (m + 1) * d);
        for k in 0..m {
            for c in 0..d {
                let row = k * d + c;
                du[(row, row)] = self.potential.v_double_prime(u.values[(k, c)]);
                dj[(row, k * d + c)] = -0.5 * self.beta;
                dj[(row, (k + 1) * d + c)] = -0.5 * self.beta;
            }
        }
        Ok((du, dj))
    }

    fn theta_vjp(
        &self,
        u: &DgP0Field,
        j: &P1Field,
        z: &ConditioningVector,
        cotangent: &DgP0Field,
    ) -> Result<DVector<f64>, ModelError> {
        check_inputs(self.dim, u, j, z)?;
        if !self.trainable_beta {
            return Ok(DVector::zeros(0));
        }
        let mut acc = 0.0;
        for k in 0..u.m_cells() {
            for c in 0..self.dim {
                acc -= cotangent.values[(k, c)] * Self::cell_average(j, k, c);
            }
        }
        Ok(DVector::from_vec(vec![acc]))
    }
}
