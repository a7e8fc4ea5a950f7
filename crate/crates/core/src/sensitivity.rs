//! Exact parameter gradients through the rollout.
//!
//! Each domain solve defines its unknowns implicitly through the residual
//! `H(Y_i; y_{i-1}, theta) = 0`. Differentiating implicitly and sweeping the
//! domains in reverse gives the loss gradient with transposed solves only:
//! per domain solve `J_i^T w = g_i`, accumulate `-w^T dH/dtheta` through the
//! model's parameter VJP, and pass the interface cotangent to the previous
//! domain through the two continuity rows. The derivative-of-theta block is
//! never materialized.
//!
//! The forward (matrix product) form of the same recurrence drives
//! [`gradient_norm_sweep`], which tracks the norm of the interface gradient
//! as the rollout length grows.

use nalgebra::{DMatrix, DVector};

use crate::error::{RolloutError, ShapeError, SolveError};
use crate::feec::LinearBlocks;
use crate::mesh::DgP0Field;
use crate::nonlinearity::{ConditioningVector, NonlinearityModel};
use crate::rollout::{
    assemble_jacobian, constant_extension_guess, newton_solve_domain, restrict, DomainState,
    InterfaceState, NewtonSettings,
};

/// Training loss selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    L1,
}

/// Loss data: per-domain cell targets, optional per-domain weights, and an
/// optional penalty on the nodal rate field.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Per-domain `M x d` target matrices for the cell field.
    pub targets: Vec<DMatrix<f64>>,
    /// Optional per-domain scalar weights (default 1).
    pub weights: Option<Vec<f64>>,
    /// Optional per-domain `(M+1) x d` targets for the rate field.
    pub j_targets: Option<Vec<DMatrix<f64>>>,
}

impl LossSpec {
    pub fn mse(targets: Vec<DMatrix<f64>>) -> Self {
        Self { kind: LossKind::Mse, targets, weights: None, j_targets: None }
    }

    pub fn l1(targets: Vec<DMatrix<f64>>) -> Self {
        Self { kind: LossKind::L1, targets, weights: None, j_targets: None }
    }
}

/// Loss value with its exact cotangents on the rollout fields.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub loss: f64,
    pub u_cotangents: Vec<DMatrix<f64>>,
    pub j_cotangents: Option<Vec<DMatrix<f64>>>,
}

fn pointwise(kind: LossKind, diff: f64) -> (f64, f64) {
    match kind {
        LossKind::Mse => (diff * diff, 2.0 * diff),
        LossKind::L1 => (diff.abs(), if diff == 0.0 { 0.0 } else { diff.signum() }),
    }
}

/// Mean loss over all (domain, cell, component) entries and its derivative
/// with respect to every `u` entry (and `J` entry when rate targets are set).
pub fn loss_and_cotangents(
    states: &[DomainState],
    spec: &LossSpec,
) -> Result<LossGradients, ShapeError> {
    let n = states.len();
    if spec.targets.len() != n {
        return Err(ShapeError::Invalid(format!(
            "{} targets for {} domains",
            spec.targets.len(),
            n
        )));
    }
    if let Some(w) = &spec.weights {
        if w.len() != n {
            return Err(ShapeError::Invalid("weights length mismatch".into()));
        }
    }
    if n == 0 {
        return Ok(LossGradients { loss: 0.0, u_cotangents: Vec::new(), j_cotangents: None });
    }
    let m = states[0].m_cells();
    let d = states[0].dim();
    let norm_u = (n * m * d) as f64;

    let mut loss = 0.0;
    let mut u_cot = Vec::with_capacity(n);
    for (i, state) in states.iter().enumerate() {
        let t = &spec.targets[i];
        if t.nrows() != m || t.ncols() != d {
            return Err(ShapeError::Invalid(format!("target {i} has wrong shape")));
        }
        let w = spec.weights.as_ref().map_or(1.0, |ws| ws[i]);
        let mut cot = DMatrix::zeros(m, d);
        for k in 0..m {
            for c in 0..d {
                let (v, g) = pointwise(spec.kind, state.u.values[(k, c)] - t[(k, c)]);
                loss += w * v / norm_u;
                cot[(k, c)] = w * g / norm_u;
            }
        }
        u_cot.push(cot);
    }

    let mut j_cot = None;
    if let Some(jt) = &spec.j_targets {
        if jt.len() != n {
            return Err(ShapeError::Invalid("j_targets length mismatch".into()));
        }
        let norm_j = (n * (m + 1) * d) as f64;
        let mut cots = Vec::with_capacity(n);
        for (i, state) in states.iter().enumerate() {
            let t = &jt[i];
            if t.nrows() != m + 1 || t.ncols() != d {
                return Err(ShapeError::Invalid(format!("j_target {i} has wrong shape")));
            }
            let w = spec.weights.as_ref().map_or(1.0, |ws| ws[i]);
            let mut cot = DMatrix::zeros(m + 1, d);
            for k in 0..=m {
                for c in 0..d {
                    let (v, g) = pointwise(spec.kind, state.j.values[(k, c)] - t[(k, c)]);
                    loss += w * v / norm_j;
                    cot[(k, c)] = w * g / norm_j;
                }
            }
            cots.push(cot);
        }
        j_cot = Some(cots);
    }

    Ok(LossGradients { loss, u_cotangents: u_cot, j_cotangents: j_cot })
}

/// Adjoint sweep: the exact gradient of the loss with respect to theta.
pub fn backward(
    states: &[DomainState],
    model: &dyn NonlinearityModel,
    z: &ConditioningVector,
    blocks: &LinearBlocks,
    cotangents: &LossGradients,
) -> Result<DVector<f64>, SolveError> {
    let n = states.len();
    let n_params = model.n_params();
    let mut grad = DVector::zeros(n_params);
    if n == 0 {
        return Ok(grad);
    }
    let m = blocks.m_cells;
    let d = states[0].dim();
    let stride = 2 * m + 3;
    let h = blocks.h;
    let dummy_prev = InterfaceState::new(DVector::zeros(d), DVector::zeros(d));

    // Interface cotangent flowing in from later domains: (on j_end, on lambda_out).
    let mut carry = DVector::zeros(2 * d);

    for i in (0..n).rev() {
        let state = &states[i];
        let mut g = DVector::zeros(d * stride);
        for c in 0..d {
            let base = c * stride;
            for k in 0..m {
                g[base + m + 1 + k] = cotangents.u_cotangents[i][(k, c)];
            }
            if let Some(jc) = &cotangents.j_cotangents {
                for k in 0..=m {
                    g[base + k] += jc[i][(k, c)];
                }
            }
            // Lift of the interface cotangent through P.
            g[base + m] += carry[c];
            g[base + 2 * m + 1] += carry[d + c];
        }

        let jac = assemble_jacobian(state, &dummy_prev, model, z, blocks)?;
        let w = jac
            .transpose()
            .lu()
            .solve(&g)
            .ok_or(SolveError::SingularJacobian)?;

        if n_params > 0 {
            // -w^T dH/dtheta with dH/dtheta = -h dN/dtheta in the derivative
            // rows, evaluated through the model VJP.
            let mut cot = DgP0Field::zeros(m, d);
            for c in 0..d {
                for k in 0..m {
                    cot.values[(k, c)] = w[c * stride + m + 1 + k];
                }
            }
            let vjp = model.theta_vjp(&state.u, &state.j, z, &cot)?;
            grad += h * vjp;
        }

        // Cotangent on y_{i-1} through the continuity rows (-K^T w).
        for c in 0..d {
            carry[c] = w[c * stride + 2 * m + 1];
            carry[d + c] = w[c * stride + 2 * m + 2];
        }
    }
    Ok(grad)
}

/// Spectral norm via the Gram matrix of the thinner side.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let gram = if m.nrows() <= m.ncols() { m * m.transpose() } else { m.transpose() * m };
    let eig = gram.symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(0.0, f64::max).max(0.0).sqrt()
}

/// Norms of the interface operators at one converged domain.
#[derive(Debug, Clone)]
pub struct InterfaceNorms {
    /// Spectral norm of `P^T J^{-1}`.
    pub p_jinv_norm: f64,
    /// Spectral norm of `P^T J^{-1} Q` (the interface propagator).
    pub propagator_norm: f64,
    /// The `2d x 2d` propagator itself, rows (j_end, lambda_out), columns
    /// (J-continuity, lambda-continuity) per component.
    pub propagator: DMatrix<f64>,
}

/// Solve `J^T w = P e_l` for every interface direction; the stacked `w` rows
/// are `P^T J^{-1}`.
fn interface_rows(
    state: &DomainState,
    model: &dyn NonlinearityModel,
    z: &ConditioningVector,
    blocks: &LinearBlocks,
) -> Result<DMatrix<f64>, SolveError> {
    let m = blocks.m_cells;
    let d = state.dim();
    let stride = 2 * m + 3;
    let dummy_prev = InterfaceState::new(DVector::zeros(d), DVector::zeros(d));
    let jac = assemble_jacobian(state, &dummy_prev, model, z, blocks)?;
    let lu = jac.transpose().lu();

    let mut rows = DMatrix::zeros(2 * d, d * stride);
    for l in 0..2 * d {
        let mut rhs = DVector::zeros(d * stride);
        let c = l % d;
        if l < d {
            rhs[c * stride + m] = 1.0;
        } else {
            rhs[c * stride + 2 * m + 1] = 1.0;
        }
        let w = lu.solve(&rhs).ok_or(SolveError::SingularJacobian)?;
        rows.row_mut(l).copy_from(&w.transpose());
    }
    Ok(rows)
}

fn propagator_from_rows(rows: &DMatrix<f64>, m: usize, d: usize) -> DMatrix<f64> {
    let stride = 2 * m + 3;
    let mut a = DMatrix::zeros(2 * d, 2 * d);
    for l in 0..2 * d {
        for c in 0..d {
            a[(l, c)] = rows[(l, c * stride + 2 * m + 1)];
            a[(l, d + c)] = rows[(l, c * stride + 2 * m + 2)];
        }
    }
    a
}

/// Solve each sampled interface and report the interface operator norms.
pub fn interface_jacobian_norms(
    model: &dyn NonlinearityModel,
    z: &ConditioningVector,
    blocks: &LinearBlocks,
    settings: &NewtonSettings,
    y_samples: &[InterfaceState],
) -> Result<Vec<InterfaceNorms>, SolveError> {
    let m = blocks.m_cells;
    let mut out = Vec::with_capacity(y_samples.len());
    for y_prev in y_samples {
        let solve = newton_solve_domain(
            y_prev,
            model,
            z,
            blocks,
            settings,
            constant_extension_guess(y_prev, m),
        )?;
        let rows = interface_rows(&solve.state, model, z, blocks)?;
        let propagator = propagator_from_rows(&rows, m, solve.state.dim());
        out.push(InterfaceNorms {
            p_jinv_norm: spectral_norm(&rows),
            propagator_norm: spectral_norm(&propagator),
            propagator,
        });
    }
    Ok(out)
}

/// Forward accumulation of the interface gradient `d y_N / d theta`,
/// reporting its spectral norm at the requested rollout lengths
/// (`n_list` must be ascending).
pub fn gradient_norm_sweep(
    model: &dyn NonlinearityModel,
    z: &ConditioningVector,
    blocks: &LinearBlocks,
    settings: &NewtonSettings,
    y0: &InterfaceState,
    n_list: &[usize],
) -> Result<Vec<(usize, f64)>, RolloutError> {
    let m = blocks.m_cells;
    let d = y0.dim();
    let h = blocks.h;
    let stride = 2 * m + 3;
    let n_params = model.n_params();
    let max_n = n_list.iter().cloned().max().unwrap_or(0);

    let mut sensitivity = DMatrix::zeros(2 * d, n_params);
    let mut results = Vec::with_capacity(n_list.len());
    let mut next = 0usize;
    let mut carrier = y0.clone();

    for domain in 1..=max_n {
        let err = |source: SolveError| RolloutError { domain: domain - 1, source };
        let solve = newton_solve_domain(
            &carrier,
            model,
            z,
            blocks,
            settings,
            constant_extension_guess(&carrier, m),
        )
        .map_err(err)?;
        let rows = interface_rows(&solve.state, model, z, blocks).map_err(err)?;
        let a = propagator_from_rows(&rows, m, d);

        if n_params > 0 {
            // B = P^T J^{-1} R, one VJP per interface direction.
            let mut b = DMatrix::zeros(2 * d, n_params);
            for l in 0..2 * d {
                let mut cot = DgP0Field::zeros(m, d);
                for c in 0..d {
                    for k in 0..m {
                        cot.values[(k, c)] = rows[(l, c * stride + m + 1 + k)];
                    }
                }
                let vjp = model
                    .theta_vjp(&solve.state.u, &solve.state.j, z, &cot)
                    .map_err(|e| err(SolveError::Model(e)))?;
                // w^T R = -h * vjp.
                for p in 0..n_params {
                    b[(l, p)] = -h * vjp[p];
                }
            }
            sensitivity = &a * &sensitivity - b;
        }

        carrier = restrict(&solve.state);
        while next < n_list.len() && n_list[next] == domain {
            results.push((domain, spectral_norm(&sensitivity)));
            next += 1;
        }
    }
    // A request for N = 0 reads the zero initialization.
    while next < n_list.len() {
        results.push((n_list[next], spectral_norm(&sensitivity)));
        next += 1;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feec::assemble_blocks;
    use crate::mesh::TimeMesh;
    use crate::nonlinearity::{HamiltonianModel, Potential, ZeroModel};
    use crate::rollout::rollout;
    use approx::assert_relative_eq;

    fn blocks_for(m: usize, h: f64) -> LinearBlocks {
        let mesh = TimeMesh::new(1, m, h * m as f64, 0.0).unwrap();
        assemble_blocks(&mesh)
    }

    fn z0() -> ConditioningVector {
        ConditioningVector::empty()
    }

    #[test]
    fn loss_is_zero_when_states_match_targets() {
        let blocks = blocks_for(2, 0.1);
        let model = ZeroModel { dim: 1 };
        let y0 = InterfaceState::from_initial_conditions(&[1.0], &[0.5]);
        let states = rollout(&y0, 3, &model, &z0(), &blocks, &NewtonSettings::default()).unwrap();
        let targets: Vec<_> = states.iter().map(|s| s.u.values.clone()).collect();
        let lg = loss_and_cotangents(&states, &LossSpec::mse(targets)).unwrap();
        assert_eq!(lg.loss, 0.0);
        for cot in &lg.u_cotangents {
            assert_eq!(cot.amax(), 0.0);
        }
    }

    #[test]
    fn single_cell_mse_example() {
        let mut state = DomainState::zeros(1, 1);
        state.u.values[(0, 0)] = 2.0;
        let spec = LossSpec::mse(vec![DMatrix::zeros(1, 1)]);
        let lg = loss_and_cotangents(&[state], &spec).unwrap();
        assert_eq!(lg.loss, 4.0);
        assert_eq!(lg.u_cotangents[0][(0, 0)], 4.0);
    }

    #[test]
    fn cotangents_match_finite_differences_of_the_loss() {
        let blocks = blocks_for(3, 0.1);
        let model = HamiltonianModel::new(1, Potential::Pendulum { coeff: 1.0 });
        let y0 = InterfaceState::from_initial_conditions(&[0.8], &[0.0]);
        let states = rollout(&y0, 2, &model, &z0(), &blocks, &NewtonSettings::default()).unwrap();
        let targets = vec![DMatrix::from_element(3, 1, 0.2); 2];
        for kind in [LossKind::Mse, LossKind::L1] {
            let spec = LossSpec { kind, targets: targets.clone(), weights: None, j_targets: None };
            let lg = loss_and_cotangents(&states, &spec).unwrap();
            let step = 1e-6;
            for i in 0..2 {
                for k in 0..3 {
                    let mut sp = states.clone();
                    let mut sm = states.clone();
                    sp[i].u.values[(k, 0)] += step;
                    sm[i].u.values[(k, 0)] -= step;
                    let lp = loss_and_cotangents(&sp, &spec).unwrap().loss;
                    let lm = loss_and_cotangents(&sm, &spec).unwrap().loss;
                    let fd = (lp - lm) / (2.0 * step);
                    assert_relative_eq!(lg.u_cotangents[i][(k, 0)], fd, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn backward_with_no_parameters_returns_empty_gradient() {
        let blocks = blocks_for(2, 0.1);
        let model = ZeroModel { dim: 1 };
        let y0 = InterfaceState::from_initial_conditions(&[1.0], &[0.0]);
        let states = rollout(&y0, 2, &model, &z0(), &blocks, &NewtonSettings::default()).unwrap();
        let targets = vec![DMatrix::zeros(2, 1); 2];
        let lg = loss_and_cotangents(&states, &LossSpec::mse(targets)).unwrap();
        let grad = backward(&states, &model, &z0(), &blocks, &lg).unwrap();
        assert_eq!(grad.len(), 0);
    }

    #[test]
    fn zero_model_propagator_is_the_shift_matrix() {
        // For the zero nonlinearity the interface propagator is exactly
        // [[1, 0], [M h, 1]]: J passes through, the mortar gains J * dt.
        for &(m, h) in &[(1usize, 0.3), (4, 0.3), (7, 0.05)] {
            let blocks = blocks_for(m, h);
            let model = ZeroModel { dim: 1 };
            let samples = [InterfaceState::from_initial_conditions(&[0.4], &[1.3])];
            let norms =
                interface_jacobian_norms(&model, &z0(), &blocks, &NewtonSettings::default(), &samples)
                    .unwrap();
            let a = &norms[0].propagator;
            assert_relative_eq!(a[(0, 0)], 1.0, epsilon = 1e-12);
            assert_relative_eq!(a[(0, 1)], 0.0, epsilon = 1e-12);
            assert_relative_eq!(a[(1, 0)], m as f64 * h, epsilon = 1e-12);
            assert_relative_eq!(a[(1, 1)], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn propagator_norm_approaches_one_for_small_h() {
        // Fixed cell count, shrinking h: the propagator tends to the
        // identity and its norm to 1 from above.
        let model = ZeroModel { dim: 1 };
        let mut last = f64::INFINITY;
        for &h in &[0.2, 0.1, 0.05, 0.025] {
            let blocks = blocks_for(2, h);
            let samples = [InterfaceState::from_initial_conditions(&[0.0], &[1.0])];
            let norms =
                interface_jacobian_norms(&model, &z0(), &blocks, &NewtonSettings::default(), &samples)
                    .unwrap();
            let n = norms[0].propagator_norm;
            assert!(n > 1.0);
            assert!(n < last);
            last = n;
        }
        assert!(last < 1.06);
    }

    #[test]
    fn p_jinv_norm_scales_like_inverse_sqrt_h() {
        // Fixed span 1.0; h in {2^-2 .. 2^-7}. Log-log slope near -1/2.
        let model = ZeroModel { dim: 1 };
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for e in 2..=7u32 {
            let m = 1usize << e;
            let h = 1.0 / m as f64;
            let blocks = blocks_for(m, h);
            let samples = [InterfaceState::from_initial_conditions(&[0.2], &[0.7])];
            let norms =
                interface_jacobian_norms(&model, &z0(), &blocks, &NewtonSettings::default(), &samples)
                    .unwrap();
            xs.push(h.ln());
            ys.push(norms[0].p_jinv_norm.ln());
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let slope: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
        assert!((slope + 0.5).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn sweep_without_parameters_is_identically_zero() {
        let blocks = blocks_for(2, 0.1);
        let model = ZeroModel { dim: 1 };
        let y0 = InterfaceState::from_initial_conditions(&[1.0], &[0.0]);
        let series = gradient_norm_sweep(
            &model,
            &z0(),
            &blocks,
            &NewtonSettings::default(),
            &y0,
            &[1, 5, 10],
        )
        .unwrap();
        for (_, norm) in series {
            assert_eq!(norm, 0.0);
        }
    }
}
