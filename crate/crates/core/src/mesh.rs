//! Time mesh and the two finite element field types.
//!
//! A rollout partitions `[t0, t0 + N*dt]` into `N` domains of span `dt`, each
//! subdivided into `M` uniform cells of width `h = dt / M`. Per domain, the
//! state `u` is a cell-wise constant ([`DgP0Field`], `M x d`) and its rate
//! `J` is a continuous piecewise-linear nodal field ([`P1Field`],
//! `(M+1) x d`).

use nalgebra::DMatrix;

use crate::error::ShapeError;

/// Uniform partition of the rollout window into domains and cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeMesh {
    n_domains: usize,
    m_cells: usize,
    delta_t: f64,
    t0: f64,
    h: f64,
}

impl TimeMesh {
    /// Build a mesh with `n_domains` domains of span `delta_t`, each cut into
    /// `m_cells` cells. Counts must be positive and `delta_t` finite positive.
    pub fn new(n_domains: usize, m_cells: usize, delta_t: f64, t0: f64) -> Result<Self, ShapeError> {
        if n_domains == 0 || m_cells == 0 {
            return Err(ShapeError::Invalid("domain and cell counts must be positive".into()));
        }
        if !(delta_t.is_finite() && delta_t > 0.0) || !t0.is_finite() {
            return Err(ShapeError::Invalid("delta_t must be finite positive, t0 finite".into()));
        }
        let h = delta_t / m_cells as f64;
        Ok(Self { n_domains, m_cells, delta_t, t0, h })
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    pub fn m_cells(&self) -> usize {
        self.m_cells
    }

    pub fn delta_t(&self) -> f64 {
        self.delta_t
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    /// Cell width `delta_t / m_cells`.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Time of node `k` in domain `i`, `t0 + i*dt + k*h`.
    pub fn node_time(&self, domain: usize, node: usize) -> f64 {
        self.t0 + domain as f64 * self.delta_t + node as f64 * self.h
    }

    /// Midpoint of cell `k` in domain `i`.
    pub fn cell_midpoint(&self, domain: usize, cell: usize) -> f64 {
        self.node_time(domain, cell) + 0.5 * self.h
    }

    pub fn total_span(&self) -> f64 {
        self.n_domains as f64 * self.delta_t
    }

    /// Number of distinct nodes across the whole rollout, `N*M + 1`.
    pub fn n_global_nodes(&self) -> usize {
        self.n_domains * self.m_cells + 1
    }
}

/// Cell-wise constant field: row `k` holds the value on cell `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DgP0Field {
    pub values: DMatrix<f64>,
}

impl DgP0Field {
    pub fn new(values: DMatrix<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(m_cells: usize, dim: usize) -> Self {
        Self { values: DMatrix::zeros(m_cells, dim) }
    }

    /// Constant field with the given per-component value.
    pub fn constant(m_cells: usize, value: &[f64]) -> Self {
        let mut values = DMatrix::zeros(m_cells, value.len());
        for k in 0..m_cells {
            for (c, v) in value.iter().enumerate() {
                values[(k, c)] = *v;
            }
        }
        Self { values }
    }

    pub fn m_cells(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Continuous piecewise-linear nodal field: row `k` holds the value at node `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct P1Field {
    pub values: DMatrix<f64>,
}

impl P1Field {
    pub fn new(values: DMatrix<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(m_cells: usize, dim: usize) -> Self {
        Self { values: DMatrix::zeros(m_cells + 1, dim) }
    }

    pub fn constant(m_cells: usize, value: &[f64]) -> Self {
        let mut values = DMatrix::zeros(m_cells + 1, value.len());
        for k in 0..=m_cells {
            for (c, v) in value.iter().enumerate() {
                values[(k, c)] = *v;
            }
        }
        Self { values }
    }

    /// Number of cells spanned by the nodes (`rows - 1`).
    pub fn m_cells(&self) -> usize {
        self.values.nrows() - 1
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mesh_cell_width_is_exact_division() {
        let mesh = TimeMesh::new(4, 8, 0.2, 0.0).unwrap();
        assert_eq!(mesh.h(), 0.2 / 8.0);
        assert_eq!(mesh.total_span(), 0.8);
        assert_eq!(mesh.n_global_nodes(), 33);
    }

    #[test]
    fn mesh_rejects_degenerate_input() {
        assert!(TimeMesh::new(0, 4, 0.1, 0.0).is_err());
        assert!(TimeMesh::new(4, 0, 0.1, 0.0).is_err());
        assert!(TimeMesh::new(4, 4, 0.0, 0.0).is_err());
        assert!(TimeMesh::new(4, 4, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn node_times_are_monotone() {
        let mesh = TimeMesh::new(3, 5, 0.7, -1.0).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..mesh.n_domains() {
            for k in 0..mesh.m_cells() {
                let t = mesh.node_time(i, k);
                assert!(t > prev);
                prev = t;
            }
        }
        // Shared node: end of domain i equals start of domain i+1.
        let end0 = mesh.node_time(0, mesh.m_cells());
        let start1 = mesh.node_time(1, 0);
        assert!((end0 - start1).abs() < 1e-15);
    }
}
