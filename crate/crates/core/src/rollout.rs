//! Per-domain nonlinear system and the autoregressive rollout.
//!
//! One domain solves, per state component,
//!
//! ```text
//!   M_V J + delta^T u - e_last lam_out + e_first lam_in = 0   (M+1 rows)
//!   delta J - h N(u, J, z; theta)                       = 0   (M rows)
//!   J_0 - j_prev                                        = 0
//!   lam_in - lam_out_prev                               = 0
//! ```
//!
//! The unknown vector per component is ordered `(J_0..J_M, u_0..u_{M-1},
//! lam_out, lam_in)`; components are stacked block-wise so the linear part of
//! the Jacobian is block-diagonal and only the nonlinearity couples
//! components. Chaining `restrict . solve` over domains is the autoregressive
//! rollout.

use nalgebra::{DMatrix, DVector};

use crate::error::{RolloutError, ShapeError, SolveError};
use crate::feec::LinearBlocks;
use crate::mesh::{DgP0Field, P1Field};
use crate::nonlinearity::{ConditioningVector, NonlinearityModel};

/// Mortar pair of a domain: incoming and outgoing Dirichlet data for `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct MortarPair {
    pub lambda_in: DVector<f64>,
    pub lambda_out: DVector<f64>,
}

/// Full unknowns of one solved (or guessed) domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainState {
    pub j: P1Field,
    pub u: DgP0Field,
    pub mortars: MortarPair,
}

impl DomainState {
    pub fn zeros(m_cells: usize, dim: usize) -> Self {
        Self {
            j: P1Field::zeros(m_cells, dim),
            u: DgP0Field::zeros(m_cells, dim),
            mortars: MortarPair {
                lambda_in: DVector::zeros(dim),
                lambda_out: DVector::zeros(dim),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.u.dim()
    }

    pub fn m_cells(&self) -> usize {
        self.u.m_cells()
    }

    /// Length of the flattened unknown vector, `d * (2M + 3)`.
    pub fn n_unknowns(&self) -> usize {
        self.dim() * (2 * self.m_cells() + 3)
    }
}

/// The autoregressive carrier between domains: `J` at the domain end and the
/// outgoing mortar.
#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceState {
    pub j_end: DVector<f64>,
    pub lambda_out: DVector<f64>,
}

impl InterfaceState {
    pub fn new(j_end: DVector<f64>, lambda_out: DVector<f64>) -> Self {
        Self { j_end, lambda_out }
    }

    /// Interface carrying initial conditions `u(t0)` and `J(t0)`.
    pub fn from_initial_conditions(u0: &[f64], j0: &[f64]) -> Self {
        Self {
            j_end: DVector::from_row_slice(j0),
            lambda_out: DVector::from_row_slice(u0),
        }
    }

    pub fn dim(&self) -> usize {
        self.j_end.len()
    }
}

/// Newton iteration controls. The defaults favour tight tolerances; each
/// domain system is small and well conditioned at practical mesh sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iters: usize,
    pub damping_halvings: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self { rel_tol: 1e-10, abs_tol: 1e-12, max_iters: 50, damping_halvings: 10 }
    }
}

/// A converged domain together with solver statistics.
#[derive(Debug, Clone)]
pub struct NewtonSolve {
    pub state: DomainState,
    pub iterations: usize,
    pub residual_norm: f64,
}

pub(crate) fn pack_state(state: &DomainState) -> DVector<f64> {
    let m = state.m_cells();
    let d = state.dim();
    let stride = 2 * m + 3;
    let mut out = DVector::zeros(d * stride);
    for c in 0..d {
        let base = c * stride;
        for k in 0..=m {
            out[base + k] = state.j.values[(k, c)];
        }
        for k in 0..m {
            out[base + m + 1 + k] = state.u.values[(k, c)];
        }
        out[base + 2 * m + 1] = state.mortars.lambda_out[c];
        out[base + 2 * m + 2] = state.mortars.lambda_in[c];
    }
    out
}

pub(crate) fn unpack_state(v: &DVector<f64>, m: usize, d: usize) -> DomainState {
    let stride = 2 * m + 3;
    let mut state = DomainState::zeros(m, d);
    for c in 0..d {
        let base = c * stride;
        for k in 0..=m {
            state.j.values[(k, c)] = v[base + k];
        }
        for k in 0..m {
            state.u.values[(k, c)] = v[base + m + 1 + k];
        }
        state.mortars.lambda_out[c] = v[base + 2 * m + 1];
        state.mortars.lambda_in[c] = v[base + 2 * m + 2];
    }
    state
}

fn check_shapes(
    state: &DomainState,
    y_prev: &InterfaceState,
    blocks: &LinearBlocks,
) -> Result<(), ShapeError> {
    if state.m_cells() != blocks.m_cells {
        return Err(ShapeError::RowCount { expected: blocks.m_cells, got: state.m_cells() });
    }
    if y_prev.dim() != state.dim() {
        return Err(ShapeError::StateDim { expected: state.dim(), got: y_prev.dim() });
    }
    if state.j.m_cells() != state.u.m_cells() {
        return Err(ShapeError::Invalid("J and u span different cell counts".into()));
    }
    Ok(())
}

/// Residual of the per-domain system, stacked per component.
pub fn assemble_residual(
    state: &DomainState,
    y_prev: &InterfaceState,
    model: &dyn NonlinearityModel,
    z: &ConditioningVector,
    blocks: &LinearBlocks,
) -> Result<DVector<f64>, SolveError> {
    check_shapes(state, y_prev, blocks)?;
    let m = blocks.m_cells;
    let d = state.dim();
    let h = blocks.h;
    let stride = 2 * m + 3;

    let n_hat = model.evaluate(&state.u, &state.j, z)?;
    if !n_hat.is_finite() {
        return Err(SolveError::Model(crate::error::ModelError::NonFiniteOutput));
    }

    let mv_j = &blocks.mass_v * &state.j.values;
    let dt_u = blocks.incidence.transpose() * &state.u.values;
    let d_j = &blocks.incidence * &state.j.values;

    let mut r = DVector::zeros(d * stride);
    for c in 0..d {
        let base = c * stride;
        for k in 0..=m {
            r[base + k] = mv_j[(k, c)] + dt_u[(k, c)]
                - blocks.e_last[k] * state.mortars.lambda_out[c]
                + blocks.e_first[k] * state.mortars.lambda_in[c];
        }
        for k in 0..m {
            r[base + m + 1 + k] = d_j[(k, c)] - h * n_hat.values[(k, c)];
        }
        r[base + 2 * m + 1] = state.j.values[(0, c)] - y_prev.j_end[c];
        r[base + 2 * m + 2] = state.mortars.lambda_in[c] - y_prev.lambda_out[c];
    }
    Ok(r)
}

/// Jacobian of [`assemble_residual`] with respect to the domain unknowns: the
/// constant block plus the `h`-scaled nonlinearity partials in the derivative
/// rows.
pub fn assemble_jacobian(
    state: &DomainState,
    y_prev: &InterfaceState,
    model: &dyn NonlinearityModel,
    z: &ConditioningVector,
    blocks: &LinearBlocks,
) -> Result<DMatrix<f64>, SolveError> {
    check_shapes(state, y_prev, blocks)?;
    let m = blocks.m_cells;
    let d = state.dim();
    let h = blocks.h;
    let stride = 2 * m + 3;
    let mut jac = DMatrix::zeros(d * stride, d * stride);

    for c in 0..d {
        let base = c * stride;
        // First block: d(M_V J + delta^T u - e_last lo + e_first li).
        for k in 0..=m {
            for l in 0..=m {
                jac[(base + k, base + l)] = blocks.mass_v[(k, l)];
            }
            for l in 0..m {
                jac[(base + k, base + m + 1 + l)] = blocks.incidence[(l, k)];
            }
            jac[(base + k, base + 2 * m + 1)] = -blocks.e_last[k];
            jac[(base + k, base + 2 * m + 2)] = blocks.e_first[k];
        }
        // Second block, linear part: delta J.
        for k in 0..m {
            for l in 0..=m {
                jac[(base + m + 1 + k, base + l)] = blocks.incidence[(k, l)];
            }
        }
        // Continuity rows.
        jac[(base + 2 * m + 1, base)] = 1.0;
        jac[(base + 2 * m + 2, base + 2 * m + 2)] = 1.0;
    }

    // Nonlinearity contributions couple components.
    let (dn_du, dn_dj) = model.partials(&state.u, &state.j, z)?;
    for c_out in 0..d {
        for k in 0..m {
            let row = c_out * stride + m + 1 + k;
            let flat_row = k * d + c_out;
            for c_in in 0..d {
                for l in 0..m {
                    jac[(row, c_in * stride + m + 1 + l)] -= h * dn_du[(flat_row, l * d + c_in)];
                }
                for l in 0..=m {
                    jac[(row, c_in * stride + l)] -= h * dn_dj[(flat_row, l * d + c_in)];
                }
            }
        }
    }
    Ok(jac)
}

/// Constant-extension initial guess: `J` and the mortars copy the incoming
/// interface, `u` copies the incoming mortar. Exact for the zero model.
pub fn constant_extension_guess(y_prev: &InterfaceState, m_cells: usize) -> DomainState {
    let d = y_prev.dim();
    let mut state = DomainState::zeros(m_cells, d);
    for c in 0..d {
        for k in 0..=m_cells {
            state.j.values[(k, c)] = y_prev.j_end[c];
        }
        for k in 0..m_cells {
            state.u.values[(k, c)] = y_prev.lambda_out[c];
        }
        state.mortars.lambda_in[c] = y_prev.lambda_out[c];
        state.mortars.lambda_out[c] = y_prev.lambda_out[c];
    }
    state
}

/// Damped Newton with residual-norm backtracking.
pub fn newton_solve_domain(
    y_prev: &InterfaceState,
    model: &dyn NonlinearityModel,
    z: &ConditioningVector,
    blocks: &LinearBlocks,
    settings: &NewtonSettings,
    guess: DomainState,
) -> Result<NewtonSolve, SolveError> {
    let m = blocks.m_cells;
    let d = guess.dim();
    let mut state = guess;
    let mut r = assemble_residual(&state, y_prev, model, z, blocks)?;
    let initial_norm = r.norm();
    let tol = settings.abs_tol.max(settings.rel_tol * initial_norm);
    let mut norm = initial_norm;

    for iter in 0..settings.max_iters {
        if norm <= tol {
            return Ok(NewtonSolve { state, iterations: iter, residual_norm: norm });
        }
        let jac = assemble_jacobian(&state, y_prev, model, z, blocks)?;
        let lu = jac.lu();
        let step = lu.solve(&(-&r)).ok_or(SolveError::SingularJacobian)?;

        let packed = pack_state(&state);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=settings.damping_halvings {
            let candidate = unpack_state(&(&packed + scale * &step), m, d);
            match assemble_residual(&candidate, y_prev, model, z, blocks) {
                Ok(r_new) => {
                    let n_new = r_new.norm();
                    if n_new < norm || n_new <= tol {
                        state = candidate;
                        r = r_new;
                        norm = n_new;
                        accepted = true;
                        break;
                    }
                }
                // A trial step may leave the model's domain; shrink and retry.
                Err(SolveError::Model(_)) => {}
                Err(e) => return Err(e),
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(SolveError::NonConvergence { residual_norm: norm });
        }
    }
    if norm <= tol {
        Ok(NewtonSolve { state, iterations: settings.max_iters, residual_norm: norm })
    } else {
        Err(SolveError::NonConvergence { residual_norm: norm })
    }
}

/// Restriction to the interface variables `(J_M, lambda_out)` per component.
pub fn restrict(state: &DomainState) -> InterfaceState {
    let m = state.m_cells();
    let d = state.dim();
    let mut j_end = DVector::zeros(d);
    for c in 0..d {
        j_end[c] = state.j.values[(m, c)];
    }
    InterfaceState { j_end, lambda_out: state.mortars.lambda_out.clone() }
}

/// Autoregressive rollout: solve each domain from the previous interface.
pub fn rollout(
    y0: &InterfaceState,
    n_domains: usize,
    model: &dyn NonlinearityModel,
    z: &ConditioningVector,
    blocks: &LinearBlocks,
    settings: &NewtonSettings,
) -> Result<Vec<DomainState>, RolloutError> {
    let mut states = Vec::with_capacity(n_domains);
    let mut carrier = y0.clone();
    for domain in 0..n_domains {
        let guess = constant_extension_guess(&carrier, blocks.m_cells);
        let solve = newton_solve_domain(&carrier, model, z, blocks, settings, guess)
            .map_err(|source| RolloutError { domain, source })?;
        carrier = restrict(&solve.state);
        states.push(solve.state);
    }
    Ok(states)
}
