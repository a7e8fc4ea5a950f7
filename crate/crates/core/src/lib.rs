//! Mortar-coupled mixed finite elements in time with pluggable nonlinear dynamics.
//!
//! The integrator discretizes second-order dynamics `u'' = N(u, u', z)` on a
//! sequence of rollout domains. Within each domain the state `u` lives in the
//! piecewise-constant space and its rate `J = u'` in the piecewise-linear
//! space, so the time derivative maps one space exactly onto the other.
//! Mortar variables carry Dirichlet data between domains, which turns a long
//! rollout into a chain of small decoupled nonlinear solves.
//!
//! Crate layout:
//! - [`mesh`]: the time mesh and the two field types.
//! - [`feec`]: mass/incidence/projection blocks of the 1D complex, the Hodge
//!   Laplacian and the summation-by-parts residual.
//! - [`nonlinearity`]: analytic and transformer models of `N` together with
//!   their exact partial derivatives and parameter VJPs.
//! - [`rollout`]: the per-domain nonlinear system, Newton solver and
//!   autoregressive rollout.
//! - [`sensitivity`]: adjoint gradients through the rollout via implicit
//!   differentiation, plus interface-Jacobian diagnostics.
//! - [`diagnostics`]: numerical certification of the discrete energy laws and
//!   the explicit inverse of the constant system block.

pub mod diagnostics;
pub mod error;
pub mod feec;
pub mod mesh;
pub mod nonlinearity;
pub mod rollout;
pub mod sensitivity;

pub use error::{FeecError, ModelError, RolloutError, ShapeError, SolveError};
pub use feec::{
    assemble_blocks, hodge_laplacian, project_v_to_q, sbp_residual, smallest_poincare_eigenvalue,
    strong_derivative, LinearBlocks,
};
pub use mesh::{DgP0Field, P1Field, TimeMesh};
pub use nonlinearity::{
    dyt, ConditioningVector, DissipativeModel, HamiltonianModel, LocalTransformer,
    LocalTransformerConfig, NonlinearityModel, Potential, ZeroModel,
};
pub use rollout::{
    assemble_jacobian, assemble_residual, constant_extension_guess, newton_solve_domain, restrict,
    rollout, DomainState, InterfaceState, MortarPair, NewtonSettings, NewtonSolve,
};
pub use sensitivity::{
    backward, gradient_norm_sweep, interface_jacobian_norms, loss_and_cotangents, InterfaceNorms,
    LossGradients, LossKind, LossSpec,
};
