//! Nonlinear programming interface and the primal-dual interior-point solver.
//!
//! Problems are posed in the fixed form
//!
//! ```txt
//!   minimize    f(z)
//!   subject to  h(z)  = 0
//!               g(z) <= 0
//!               lo <= z <= hi
//! ```
//!
//! Inequalities receive slacks, simple bounds are handled by log barriers
//! directly, and the resulting perturbed KKT systems are solved by sparse
//! LDL^T with inertia correction. See [`solve`] for the algorithm outline.

mod solver;

pub use solver::{initialize, least_squares_multipliers, solve, InteriorPoint};

use crate::error::Error;
use serde::{Deserialize, Serialize};
use std::time::Duration;

/// Sparse problem callbacks. Jacobian and Hessian patterns are queried once
/// per solve; the value callbacks fill slices parallel to those patterns.
/// Implementations must be deterministic functions of their arguments.
pub trait NlpProblem {
    fn num_vars(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn num_ineq(&self) -> usize;

    /// Simple bounds, using infinities where a side is absent. Finite pairs
    /// must satisfy lo < hi strictly; fix a variable with an equality row
    /// instead of collapsing its bounds.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);

    fn objective(&self, z: &[f64]) -> Result<f64, Error>;
    fn gradient(&self, z: &[f64], grad: &mut [f64]) -> Result<(), Error>;

    fn eq_constraints(&self, z: &[f64], out: &mut [f64]) -> Result<(), Error>;
    fn ineq_constraints(&self, z: &[f64], out: &mut [f64]) -> Result<(), Error>;

    /// (row, col) positions of structurally nonzero equality Jacobian entries.
    fn eq_jacobian_pattern(&self) -> Vec<(usize, usize)>;
    fn eq_jacobian_values(&self, z: &[f64], vals: &mut [f64]) -> Result<(), Error>;

    fn ineq_jacobian_pattern(&self) -> Vec<(usize, usize)>;
    fn ineq_jacobian_values(&self, z: &[f64], vals: &mut [f64]) -> Result<(), Error>;

    /// Upper-triangular (row <= col) pattern of the Lagrangian Hessian
    /// sigma * f''(z) + sum_i y_i h_i''(z) + sum_i w_i g_i''(z).
    fn hessian_pattern(&self) -> Vec<(usize, usize)>;
    fn hessian_values(
        &self,
        z: &[f64],
        sigma: f64,
        eq_mult: &[f64],
        ineq_mult: &[f64],
        vals: &mut [f64],
    ) -> Result<(), Error>;
}

/// Termination state of one [`solve`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    /// All four KKT residuals met their tolerances.
    Optimal,
    /// Iteration budget exhausted; the returned point is the best iterate.
    MaxIterations,
    /// Feasibility restoration itself could not make progress.
    RestorationFailed,
    /// Restoration converged to a stationary point of the constraint
    /// violation that is not feasible; the problem looks locally infeasible.
    InfeasibleDetected,
}

/// Inf-norm KKT residuals at the returned point: stationarity of the
/// Lagrangian, primal feasibility, dual feasibility (multiplier sign), and
/// complementary slackness.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

/// Result of one NLP solve. Multiplier conventions: stationarity holds as
/// grad f + Jh^T y + Jg^T w - zl + zu = 0 with w, zl, zu >= 0, so an active
/// g row carries a nonnegative multiplier and equality multipliers are free.
#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub status: SolveStatus,
    pub z: Vec<f64>,
    pub objective: f64,
    pub eq_multipliers: Vec<f64>,
    pub ineq_multipliers: Vec<f64>,
    pub slacks: Vec<f64>,
    pub lower_bound_multipliers: Vec<f64>,
    pub upper_bound_multipliers: Vec<f64>,
    pub residuals: KktResiduals,
    pub iterations: usize,
    pub wall_time: Duration,
    /// Barrier parameter after each accepted iteration; non-increasing
    /// except across a feasibility-restoration restart.
    pub mu_history: Vec<f64>,
    /// Tab-separated iteration records when [`SolverOptions::log_iterations`]
    /// is set. Columns: iter, objective, stationarity, primal, dual,
    /// complementarity, mu, alpha.
    pub iteration_log: Vec<String>,
}

/// Primal (and optionally dual) starting information. Multiplier guesses
/// must be full-length when present; omit them to request the damped
/// least-squares stationarity fit.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub z: Vec<f64>,
    pub eq_multipliers: Option<Vec<f64>>,
    pub ineq_multipliers: Option<Vec<f64>>,
}

impl WarmStart {
    pub fn primal(z: Vec<f64>) -> Self {
        Self { z, eq_multipliers: None, ineq_multipliers: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Tolerance on stationarity, dual feasibility and complementarity.
    pub tol_kkt: f64,
    /// Tolerance on primal feasibility.
    pub tol_primal: f64,
    pub max_iterations: usize,
    /// Relative interior push-off for slacks and bound distances.
    pub slack_min: f64,
    /// Floor applied to inequality and bound multiplier initial values.
    pub mult_min: f64,
    /// Collect per-iteration log lines into the solution.
    pub log_iterations: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_kkt: 1e-8,
            tol_primal: 1e-8,
            max_iterations: 500,
            slack_min: 1e-2,
            mult_min: 1e-6,
            log_iterations: false,
        }
    }
}
