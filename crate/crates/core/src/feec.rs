//! Linear building blocks of the 1D complex on one rollout domain.
//!
//! The pair (piecewise linear, piecewise constant) forms an exact complex
//! under `d/dt`: the oriented incidence matrix `delta` encodes the weak
//! derivative, and `M_Q * D = delta` ties the strong derivative `D` to it
//! without quadrature error. Everything here is assembled from closed-form
//! hat-function integrals.

use nalgebra::{DMatrix, DVector};

use crate::error::{FeecError, ShapeError};
use crate::mesh::{DgP0Field, P1Field, TimeMesh};
use crate::rollout::DomainState;

/// Assembled per-domain operators. All matrices are dense; the sizes stay in
/// the hundreds at the scales this crate targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBlocks {
    pub m_cells: usize,
    pub h: f64,
    /// P1 mass matrix, `(M+1) x (M+1)`, tridiagonal SPD.
    pub mass_v: DMatrix<f64>,
    /// dgP0 mass matrix, `M x M`, equals `h * I`.
    pub mass_q: DMatrix<f64>,
    /// Oriented incidence `delta`, `M x (M+1)`: row k is `(-1, +1)` at nodes k, k+1.
    pub incidence: DMatrix<f64>,
    /// Strong derivative `D = delta / h`, `M x (M+1)`.
    pub strong_deriv: DMatrix<f64>,
    /// Cell-averaging projection from nodal to cell values, `M x (M+1)`.
    pub proj_v_to_q: DMatrix<f64>,
    /// First nodal unit vector, length `M+1`.
    pub e_first: DVector<f64>,
    /// Last nodal unit vector, length `M+1`.
    pub e_last: DVector<f64>,
}

/// Assemble all operators for one domain of the mesh.
pub fn assemble_blocks(mesh: &TimeMesh) -> LinearBlocks {
    let m = mesh.m_cells();
    let h = mesh.h();

    // Exact hat-function integrals: diag h/3 at the ends, 2h/3 inside,
    // off-diagonal h/6 between neighbours.
    let mut mass_v = DMatrix::zeros(m + 1, m + 1);
    for k in 0..m {
        mass_v[(k, k)] += h / 3.0;
        mass_v[(k + 1, k + 1)] += h / 3.0;
        mass_v[(k, k + 1)] += h / 6.0;
        mass_v[(k + 1, k)] += h / 6.0;
    }

    let mass_q = DMatrix::from_diagonal_element(m, m, h);

    let mut incidence = DMatrix::zeros(m, m + 1);
    let mut proj = DMatrix::zeros(m, m + 1);
    for k in 0..m {
        incidence[(k, k)] = -1.0;
        incidence[(k, k + 1)] = 1.0;
        proj[(k, k)] = 0.5;
        proj[(k, k + 1)] = 0.5;
    }
    let strong_deriv = &incidence / h;

    let mut e_first = DVector::zeros(m + 1);
    e_first[0] = 1.0;
    let mut e_last = DVector::zeros(m + 1);
    e_last[m] = 1.0;

    LinearBlocks {
        m_cells: m,
        h,
        mass_v,
        mass_q,
        incidence,
        strong_deriv,
        proj_v_to_q: proj,
        e_first,
        e_last,
    }
}

fn check_nodal_shape(j: &P1Field, blocks: &LinearBlocks) -> Result<(), ShapeError> {
    if j.values.nrows() != blocks.m_cells + 1 {
        return Err(ShapeError::RowCount { expected: blocks.m_cells + 1, got: j.values.nrows() });
    }
    Ok(())
}

/// Exact cell-wise derivative of a nodal field: cell k gets `(J_{k+1} - J_k)/h`.
pub fn strong_derivative(j: &P1Field, blocks: &LinearBlocks) -> Result<DgP0Field, ShapeError> {
    check_nodal_shape(j, blocks)?;
    Ok(DgP0Field::new(&blocks.strong_deriv * &j.values))
}

/// L2 projection of a nodal field onto cell constants: cell k gets the
/// average of its end nodes.
pub fn project_v_to_q(j: &P1Field, blocks: &LinearBlocks) -> Result<DgP0Field, ShapeError> {
    check_nodal_shape(j, blocks)?;
    Ok(DgP0Field::new(&blocks.proj_v_to_q * &j.values))
}

/// Discrete Hodge Laplacian `delta * M_V^{-1} * delta^T`, an `M x M` SPD matrix.
pub fn hodge_laplacian(blocks: &LinearBlocks) -> Result<DMatrix<f64>, FeecError> {
    let lu = blocks.mass_v.clone().lu();
    let rhs = blocks.incidence.transpose();
    let solved = lu.solve(&rhs).ok_or(FeecError::SingularMass)?;
    Ok(&blocks.incidence * solved)
}

/// Smallest eigenvalue of the pencil `(L, M_Q)`; with `M_Q = h I` this is the
/// smallest eigenvalue of `L / h`. Its uniform lower bound as `h` shrinks at
/// fixed domain span is the discrete Poincare inequality.
pub fn smallest_poincare_eigenvalue(blocks: &LinearBlocks) -> Result<f64, FeecError> {
    let l = hodge_laplacian(blocks)?;
    let scaled = l / blocks.h;
    let eig = scaled.symmetric_eigen();
    Ok(eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// Residual of the global summation-by-parts identity on a solved rollout.
///
/// For every domain the first block of the solved system gives, per component,
/// `v^T M_V J + v^T delta^T u = lambda_out v(t_{i+1}) - lambda_in v(t_i)`.
/// Summing over domains against a continuous global test function telescopes
/// through the mortar continuity conditions, leaving only the trace values of
/// `u` (the mortars) at the ends of the rollout window:
///
/// `sum_i [ (J, v) + (u, v') ]  =  lambda_{N-1,N} v(T) - lambda_{0,0} v(t_0)`.
///
/// Returns LHS - RHS summed over components; near zero (solver tolerance) for
/// converged rollouts and arbitrary `v`.
pub fn sbp_residual(
    states: &[DomainState],
    v: &P1Field,
    mesh: &TimeMesh,
    blocks: &LinearBlocks,
) -> Result<f64, ShapeError> {
    let n = states.len();
    let m = blocks.m_cells;
    if n == 0 {
        return Err(ShapeError::Invalid("empty rollout".into()));
    }
    if mesh.m_cells() != m {
        return Err(ShapeError::Invalid("mesh does not match blocks".into()));
    }
    let expected_nodes = n * m + 1;
    if v.values.nrows() != expected_nodes {
        return Err(ShapeError::RowCount { expected: expected_nodes, got: v.values.nrows() });
    }
    let d = states[0].dim();
    if v.dim() != d {
        return Err(ShapeError::StateDim { expected: d, got: v.dim() });
    }

    let mut lhs = 0.0;
    for (i, state) in states.iter().enumerate() {
        if state.j.m_cells() != m || state.dim() != d {
            return Err(ShapeError::Invalid(format!("state {i} has inconsistent shape")));
        }
        let v_local = v.values.rows(i * m, m + 1);
        // (J, v) through the mass matrix and (u, v') through the incidence.
        let mv_j = &blocks.mass_v * &state.j.values;
        let dt_u = blocks.incidence.transpose() * &state.u.values;
        for c in 0..d {
            for r in 0..=m {
                lhs += v_local[(r, c)] * (mv_j[(r, c)] + dt_u[(r, c)]);
            }
        }
    }

    let first = &states[0].mortars.lambda_in;
    let last = &states[n - 1].mortars.lambda_out;
    let mut rhs = 0.0;
    for c in 0..d {
        rhs += last[c] * v.values[(n * m, c)] - first[c] * v.values[(0, c)];
    }
    Ok(lhs - rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn blocks_for(m: usize, h: f64) -> LinearBlocks {
        let mesh = TimeMesh::new(1, m, h * m as f64, 0.0).unwrap();
        assemble_blocks(&mesh)
    }

    /// Simpson's rule per cell; exact for the quadratic hat products, so this
    /// is an independent route to the mass matrix.
    fn mass_v_by_quadrature(m: usize, h: f64) -> DMatrix<f64> {
        let hat = |idx: usize, t: f64| -> f64 {
            let center = idx as f64 * h;
            let w = 1.0 - (t - center).abs() / h;
            w.max(0.0)
        };
        let mut mass = DMatrix::zeros(m + 1, m + 1);
        for i in 0..=m {
            for j in 0..=m {
                let mut total = 0.0;
                for k in 0..m {
                    let a = k as f64 * h;
                    let b = a + h;
                    let mid = 0.5 * (a + b);
                    let f = |t: f64| hat(i, t) * hat(j, t);
                    total += (b - a) / 6.0 * (f(a) + 4.0 * f(mid) + f(b));
                }
                mass[(i, j)] = total;
            }
        }
        mass
    }

    #[test]
    fn incidence_m2_is_oriented_boundary() {
        let blocks = blocks_for(2, 0.5);
        let expected = dmatrix![-1.0, 1.0, 0.0; 0.0, -1.0, 1.0];
        assert_eq!(blocks.incidence, expected);
    }

    #[test]
    fn mass_q_is_h_times_identity() {
        let blocks = blocks_for(3, 0.1);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.1 } else { 0.0 };
                assert_relative_eq!(blocks.mass_q[(i, j)], expected, max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn mass_v_single_cell_closed_form() {
        let h = 0.37;
        let blocks = blocks_for(1, h);
        let expected = dmatrix![h / 3.0, h / 6.0; h / 6.0, h / 3.0];
        assert_relative_eq!(blocks.mass_v, expected, max_relative = 1e-15);
    }

    #[test]
    fn mass_v_matches_quadrature_oracle() {
        for &(m, h) in &[(1usize, 0.5), (3, 0.2), (8, 0.05)] {
            let blocks = blocks_for(m, h);
            let oracle = mass_v_by_quadrature(m, h);
            for i in 0..=m {
                for j in 0..=m {
                    assert_relative_eq!(blocks.mass_v[(i, j)], oracle[(i, j)], epsilon = 1e-14);
                }
            }
        }
    }

    #[test]
    fn incidence_rows_sum_to_zero_and_kill_constants() {
        let blocks = blocks_for(7, 0.3);
        let ones = DVector::from_element(8, 1.0);
        let image = &blocks.incidence * ones;
        assert!(image.amax() == 0.0);
        for k in 0..7 {
            let row_sum: f64 = blocks.incidence.row(k).iter().sum();
            assert_eq!(row_sum, 0.0);
        }
    }

    #[test]
    fn strong_derivative_examples() {
        let blocks = blocks_for(2, 1.0);
        let j = P1Field::new(dmatrix![0.0; 1.0; 2.0]);
        let d = strong_derivative(&j, &blocks).unwrap();
        assert_relative_eq!(d.values, dmatrix![1.0; 1.0], max_relative = 1e-15);

        let j_const = P1Field::constant(2, &[4.2]);
        let d0 = strong_derivative(&j_const, &blocks).unwrap();
        assert!(d0.values.amax() == 0.0);

        // t^2 sampled at nodes (0, 0.25, 1) of an h = 0.5 mesh: slopes of the
        // interpolant are finite differences.
        let blocks_h = blocks_for(2, 0.5);
        let j_sq = P1Field::new(dmatrix![0.0; 0.25; 1.0]);
        let d_sq = strong_derivative(&j_sq, &blocks_h).unwrap();
        assert_relative_eq!(d_sq.values, dmatrix![0.5; 1.5], max_relative = 1e-14);
    }

    #[test]
    fn projection_examples() {
        let blocks = blocks_for(1, 1.0);
        let j = P1Field::new(dmatrix![0.0; 2.0]);
        let p = project_v_to_q(&j, &blocks).unwrap();
        assert_relative_eq!(p.values[(0, 0)], 1.0, max_relative = 1e-15);

        let blocks2 = blocks_for(2, 0.25);
        let j2 = P1Field::new(dmatrix![1.0; 3.0; 5.0]);
        let p2 = project_v_to_q(&j2, &blocks2).unwrap();
        assert_relative_eq!(p2.values, dmatrix![2.0; 4.0], max_relative = 1e-15);

        let c = P1Field::constant(2, &[7.0, -3.0]);
        let pc = project_v_to_q(&c, &blocks2).unwrap();
        for k in 0..2 {
            assert_eq!(pc.values[(k, 0)], 7.0);
            assert_eq!(pc.values[(k, 1)], -3.0);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let blocks = blocks_for(3, 0.1);
        let j = P1Field::zeros(2, 1);
        assert!(strong_derivative(&j, &blocks).is_err());
        assert!(project_v_to_q(&j, &blocks).is_err());
    }

    #[test]
    fn hodge_laplacian_is_symmetric_and_positive() {
        for &(m, h) in &[(1usize, 0.5), (4, 0.2), (16, 0.05)] {
            let blocks = blocks_for(m, h);
            let l = hodge_laplacian(&blocks).unwrap();
            for i in 0..m {
                for j in 0..m {
                    assert!((l[(i, j)] - l[(j, i)]).abs() < 1e-14);
                }
            }
            let eig = l.symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn hodge_laplacian_single_cell_oracle() {
        // delta = (-1, 1); M_V^{-1} inverted by hand: (2/h) [[2,-1],[-1,2]].
        let h = 0.8;
        let blocks = blocks_for(1, h);
        let l = hodge_laplacian(&blocks).unwrap();
        let inv = [[2.0, -1.0], [-1.0, 2.0]];
        let delta = [-1.0, 1.0];
        let mut oracle = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                oracle += delta[a] * 2.0 / h * inv[a][b] * delta[b];
            }
        }
        assert_relative_eq!(l[(0, 0)], oracle, max_relative = 1e-13);
        assert_relative_eq!(oracle, 12.0 / h, max_relative = 1e-13);
    }

    #[test]
    fn poincare_eigenvalue_stable_under_refinement() {
        // Fixed span 1.0, h in {0.1, 0.05, 0.025}.
        let eigs: Vec<f64> = [10usize, 20, 40]
            .iter()
            .map(|&m| {
                let mesh = TimeMesh::new(1, m, 1.0, 0.0).unwrap();
                smallest_poincare_eigenvalue(&assemble_blocks(&mesh)).unwrap()
            })
            .collect();
        let max = eigs.iter().cloned().fold(f64::MIN, f64::max);
        let min = eigs.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min < 2.0, "eigenvalues {eigs:?} vary by more than 2x");
    }

    proptest! {
        #[test]
        fn mass_q_times_strong_deriv_is_incidence(m in 1usize..128, h in 1e-3f64..1.0) {
            let blocks = blocks_for(m, h);
            let lhs = &blocks.mass_q * &blocks.strong_deriv;
            for i in 0..m {
                for j in 0..=m {
                    prop_assert!((lhs[(i, j)] - blocks.incidence[(i, j)]).abs() <= 1e-15);
                }
            }
        }

        #[test]
        fn strong_derivative_exact_on_affine(m in 1usize..32, h in 1e-3f64..1.0,
                                             a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let blocks = blocks_for(m, h);
            let nodes = DMatrix::from_fn(m + 1, 1, |k, _| a * (k as f64 * h) + b);
            let d = strong_derivative(&P1Field::new(nodes), &blocks).unwrap();
            for k in 0..m {
                prop_assert!((d.values[(k, 0)] - a).abs() < 1e-9_f64.max(a.abs() * 1e-12));
            }
        }
    }
}
