//! Optimal-control problem statement.
//!
//! A problem couples dynamics `xdot = f(x, u, t, p)` on `[t0, tf]` with a
//! running cost, an optional terminal cost, boundary conditions
//! `b(x(t0), x(tf), tf, p) = 0`, simple bounds on states, inputs, and
//! parameters, and named groups of path inequality constraints
//! `c(x, u, t, p) <= 0` (a group might be one no-fly zone, or one actuator
//! envelope). Grouping matters downstream: activity analysis and filtering
//! act on whole groups.
//!
//! All first and second derivatives used by the transcription come from
//! user callbacks when given and central finite differences otherwise.
//! Differences are exact for polynomials through degree two (first order)
//! and linear-quadratic forms (second order), and carry O(step^2) error in
//! general; supply analytic Jacobians when solving to tolerances near 1e-9.
//!
//! Derivative layouts are dense row-major over the per-node variable vector
//! `v = [x, u, p, t]` of length [`Ocp::node_dim`]. Terminal quantities use
//! `[xf, p, tf]`, boundary quantities `[x0, xf, p, tf]`.

use crate::error::Error;
use std::sync::Arc;

pub type DynamicsFn = Arc<dyn Fn(&[f64], &[f64], f64, &[f64], &mut [f64]) + Send + Sync>;
pub type RunningCostFn = Arc<dyn Fn(&[f64], &[f64], f64, &[f64]) -> f64 + Send + Sync>;
pub type TerminalCostFn = Arc<dyn Fn(&[f64], f64, &[f64]) -> f64 + Send + Sync>;
pub type BoundaryFn = Arc<dyn Fn(&[f64], &[f64], f64, &[f64], &mut [f64]) + Send + Sync>;
pub type PathFn = Arc<dyn Fn(&[f64], &[f64], f64, &[f64], &mut [f64]) + Send + Sync>;
/// Writes the dense row-major Jacobian of the owning quantity over `v`.
pub type NodeJacFn = Arc<dyn Fn(&[f64], &[f64], f64, &[f64], &mut [f64]) + Send + Sync>;
/// Writes the dense gradient of the running cost over `v`.
pub type NodeGradFn = Arc<dyn Fn(&[f64], &[f64], f64, &[f64], &mut [f64]) + Send + Sync>;
/// Writes a weighted second derivative: the extra slice carries the weights
/// (one per dynamics state or per constraint row), output is dense `d x d`.
pub type WeightedHessFn =
    Arc<dyn Fn(&[f64], &[f64], f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Writes the running-cost Hessian over `v`, dense `d x d`.
pub type NodeHessFn = Arc<dyn Fn(&[f64], &[f64], f64, &[f64], &mut [f64]) + Send + Sync>;

const FD_STEP: f64 = 1e-6;

/// Final-time treatment. The start time is always fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TfSpec {
    Fixed(f64),
    Free { guess: f64, lo: f64, hi: f64 },
}

/// Named group of path inequality rows `c(x, u, t, p) <= 0`, enforced at
/// every collocation node unless an activation filter narrows it.
#[derive(Clone)]
pub struct ConstraintSet {
    name: String,
    rows: usize,
    eval: PathFn,
    jacobian: Option<NodeJacFn>,
    hessian: Option<WeightedHessFn>,
}

impl ConstraintSet {
    pub fn new(
        name: impl Into<String>,
        rows: usize,
        eval: impl Fn(&[f64], &[f64], f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), rows, eval: Arc::new(eval), jacobian: None, hessian: None }
    }

    /// Analytic Jacobian, dense `rows x node_dim` row-major over `v`.
    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&[f64], &[f64], f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    /// Analytic weighted Hessian of `sum_l lambda_l c_l`, dense
    /// `node_dim x node_dim`; the weight slice has one entry per row.
    pub fn with_hessian(
        mut self,
        hess: impl Fn(&[f64], &[f64], f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.hessian = Some(Arc::new(hess));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

pub struct OcpBuilder {
    nx: usize,
    nu: usize,
    np: usize,
    t0: f64,
    tf: TfSpec,
    state_names: Option<Vec<String>>,
    input_names: Option<Vec<String>>,
    dynamics: Option<DynamicsFn>,
    dynamics_jacobian: Option<NodeJacFn>,
    dynamics_hessian: Option<WeightedHessFn>,
    running_cost: Option<RunningCostFn>,
    running_cost_gradient: Option<NodeGradFn>,
    running_cost_hessian: Option<NodeHessFn>,
    terminal_cost: Option<TerminalCostFn>,
    boundary: Option<(usize, BoundaryFn)>,
    sets: Vec<ConstraintSet>,
    x_lo: Vec<f64>,
    x_hi: Vec<f64>,
    u_lo: Vec<f64>,
    u_hi: Vec<f64>,
    p_lo: Vec<f64>,
    p_hi: Vec<f64>,
}

impl OcpBuilder {
    pub fn dynamics(
        mut self,
        f: impl Fn(&[f64], &[f64], f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.dynamics = Some(Arc::new(f));
        self
    }

    pub fn dynamics_jacobian(
        mut self,
        jac: impl Fn(&[f64], &[f64], f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.dynamics_jacobian = Some(Arc::new(jac));
        self
    }

    /// Analytic Hessian of `sum_i w_i f_i(x, u, t, p)` over `v`.
    pub fn dynamics_hessian(
        mut self,
        hess: impl Fn(&[f64], &[f64], f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.dynamics_hessian = Some(Arc::new(hess));
        self
    }

    pub fn running_cost(
        mut self,
        l: impl Fn(&[f64], &[f64], f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.running_cost = Some(Arc::new(l));
        self
    }

    pub fn running_cost_gradient(
        mut self,
        g: impl Fn(&[f64], &[f64], f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.running_cost_gradient = Some(Arc::new(g));
        self
    }

    pub fn running_cost_hessian(
        mut self,
        h: impl Fn(&[f64], &[f64], f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.running_cost_hessian = Some(Arc::new(h));
        self
    }

    pub fn terminal_cost(
        mut self,
        phi: impl Fn(&[f64], f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.terminal_cost = Some(Arc::new(phi));
        self
    }

    /// Boundary equalities `b(x(t0), x(tf), tf, p) = 0`, `rows` of them.
    pub fn boundary(
        mut self,
        rows: usize,
        b: impl Fn(&[f64], &[f64], f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.boundary = Some((rows, Arc::new(b)));
        self
    }

    pub fn constraint_set(mut self, set: ConstraintSet) -> Self {
        self.sets.push(set);
        self
    }

    pub fn state_bounds(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.x_lo = lo;
        self.x_hi = hi;
        self
    }

    pub fn input_bounds(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.u_lo = lo;
        self.u_hi = hi;
        self
    }

    pub fn param_bounds(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.p_lo = lo;
        self.p_hi = hi;
        self
    }

    pub fn state_names(mut self, names: &[&str]) -> Self {
        self.state_names = Some(names.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn input_names(mut self, names: &[&str]) -> Self {
        self.input_names = Some(names.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn build(self) -> Result<Ocp, Error> {
        let invalid = |reason: String| Err(Error::ModelInvalid { reason });
        let Some(dynamics) = self.dynamics else {
            return invalid("dynamics callback missing".into());
        };
        if !self.t0.is_finite() {
            return invalid(format!("t0 = {} is not finite", self.t0));
        }
        match self.tf {
            TfSpec::Fixed(tf) => {
                if !(tf.is_finite() && tf > self.t0) {
                    return invalid(format!("fixed tf = {tf} must be finite and exceed t0 = {}", self.t0));
                }
            }
            TfSpec::Free { guess, lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && guess.is_finite()) {
                    return invalid("free tf needs finite guess and range".into());
                }
                if !(self.t0 < lo && lo <= guess && guess <= hi) {
                    return invalid(format!(
                        "free tf needs t0 < lo <= guess <= hi, got t0 = {}, lo = {lo}, guess = {guess}, hi = {hi}",
                        self.t0
                    ));
                }
            }
        }
        for (what, lo, hi, len) in [
            ("state", &self.x_lo, &self.x_hi, self.nx),
            ("input", &self.u_lo, &self.u_hi, self.nu),
            ("parameter", &self.p_lo, &self.p_hi, self.np),
        ] {
            if lo.len() != len || hi.len() != len {
                return invalid(format!("{what} bounds must have length {len}"));
            }
            for j in 0..len {
                if lo[j].is_nan() || hi[j].is_nan() {
                    return invalid(format!("{what} bound {j} is NaN"));
                }
                if lo[j].is_finite() && hi[j].is_finite() && !(lo[j] < hi[j]) {
                    return invalid(format!(
                        "{what} bound {j} has no interior ({} .. {}); fix the value with a boundary row instead",
                        lo[j], hi[j]
                    ));
                }
                if lo[j] > hi[j] {
                    return invalid(format!("{what} bound {j} is inverted"));
                }
            }
        }
        for (i, set) in self.sets.iter().enumerate() {
            if set.rows == 0 {
                return invalid(format!("constraint set `{}` has zero rows", set.name));
            }
            if self.sets[..i].iter().any(|other| other.name == set.name) {
                return invalid(format!("constraint set name `{}` appears twice", set.name));
            }
        }
        let state_names = match self.state_names {
            Some(names) if names.len() != self.nx => {
                return invalid(format!("expected {} state names, got {}", self.nx, names.len()));
            }
            Some(names) => names,
            None => (0..self.nx).map(|i| format!("x{i}")).collect(),
        };
        let input_names = match self.input_names {
            Some(names) if names.len() != self.nu => {
                return invalid(format!("expected {} input names, got {}", self.nu, names.len()));
            }
            Some(names) => names,
            None => (0..self.nu).map(|i| format!("u{i}")).collect(),
        };

        Ok(Ocp {
            nx: self.nx,
            nu: self.nu,
            np: self.np,
            t0: self.t0,
            tf: self.tf,
            state_names,
            input_names,
            dynamics,
            dynamics_jacobian: self.dynamics_jacobian,
            dynamics_hessian: self.dynamics_hessian,
            running_cost: self.running_cost,
            running_cost_gradient: self.running_cost_gradient,
            running_cost_hessian: self.running_cost_hessian,
            terminal_cost: self.terminal_cost,
            boundary: self.boundary,
            sets: self.sets,
            x_lo: self.x_lo,
            x_hi: self.x_hi,
            u_lo: self.u_lo,
            u_hi: self.u_hi,
            p_lo: self.p_lo,
            p_hi: self.p_hi,
        })
    }
}

#[derive(Clone)]
pub struct Ocp {
    nx: usize,
    nu: usize,
    np: usize,
    t0: f64,
    tf: TfSpec,
    state_names: Vec<String>,
    input_names: Vec<String>,
    dynamics: DynamicsFn,
    dynamics_jacobian: Option<NodeJacFn>,
    dynamics_hessian: Option<WeightedHessFn>,
    running_cost: Option<RunningCostFn>,
    running_cost_gradient: Option<NodeGradFn>,
    running_cost_hessian: Option<NodeHessFn>,
    terminal_cost: Option<TerminalCostFn>,
    boundary: Option<(usize, BoundaryFn)>,
    sets: Vec<ConstraintSet>,
    x_lo: Vec<f64>,
    x_hi: Vec<f64>,
    u_lo: Vec<f64>,
    u_hi: Vec<f64>,
    p_lo: Vec<f64>,
    p_hi: Vec<f64>,
}

impl Ocp {
    /// Starts a builder for a problem with `nx` states, `nu` inputs, and
    /// `np` static parameters on the horizon `[t0, tf]`. Bounds default to
    /// unbounded.
    pub fn builder(nx: usize, nu: usize, np: usize, t0: f64, tf: TfSpec) -> OcpBuilder {
        OcpBuilder {
            nx,
            nu,
            np,
            t0,
            tf,
            state_names: None,
            input_names: None,
            dynamics: None,
            dynamics_jacobian: None,
            dynamics_hessian: None,
            running_cost: None,
            running_cost_gradient: None,
            running_cost_hessian: None,
            terminal_cost: None,
            boundary: None,
            sets: Vec::new(),
            x_lo: vec![f64::NEG_INFINITY; nx],
            x_hi: vec![f64::INFINITY; nx],
            u_lo: vec![f64::NEG_INFINITY; nu],
            u_hi: vec![f64::INFINITY; nu],
            p_lo: vec![f64::NEG_INFINITY; np],
            p_hi: vec![f64::INFINITY; np],
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn nu(&self) -> usize {
        self.nu
    }
    pub fn np(&self) -> usize {
        self.np
    }
    pub fn t0(&self) -> f64 {
        self.t0
    }
    pub fn tf_spec(&self) -> TfSpec {
        self.tf
    }
    pub fn state_names(&self) -> &[String] {
        &self.state_names
    }
    pub fn input_names(&self) -> &[String] {
        &self.input_names
    }
    pub fn state_bounds(&self) -> (&[f64], &[f64]) {
        (&self.x_lo, &self.x_hi)
    }
    pub fn input_bounds(&self) -> (&[f64], &[f64]) {
        (&self.u_lo, &self.u_hi)
    }
    pub fn param_bounds(&self) -> (&[f64], &[f64]) {
        (&self.p_lo, &self.p_hi)
    }
    pub fn constraint_sets(&self) -> &[ConstraintSet] {
        &self.sets
    }
    pub fn boundary_rows(&self) -> usize {
        self.boundary.as_ref().map_or(0, |(rows, _)| *rows)
    }
    pub fn has_running_cost(&self) -> bool {
        self.running_cost.is_some()
    }

    /// Length of the per-node variable vector `v = [x, u, p, t]`.
    pub fn node_dim(&self) -> usize {
        self.nx + self.nu + self.np + 1
    }

    // Endpoint evaluations (terminal cost, boundary rows) pass an empty
    // input slice; node evaluations pass exactly nu entries.
    fn check_args(&self, x: &[f64], u: &[f64], t: f64, p: &[f64]) -> Result<(), Error> {
        debug_assert_eq!(x.len(), self.nx);
        debug_assert!(u.len() == self.nu || u.is_empty());
        debug_assert_eq!(p.len(), self.np);
        // A NaN argument can still produce finite callback output (through
        // branches), so downstream output checks cannot replace this.
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "state passed to problem callbacks", index });
        }
        if let Some(index) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "input passed to problem callbacks", index });
        }
        if let Some(index) = p.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "parameter passed to problem callbacks", index });
        }
        if !t.is_finite() {
            return Err(Error::NonFinite { context: "time passed to problem callbacks", index: 0 });
        }
        Ok(())
    }

    pub fn dynamics(&self, x: &[f64], u: &[f64], t: f64, p: &[f64], out: &mut [f64]) -> Result<(), Error> {
        self.check_args(x, u, t, p)?;
        (self.dynamics)(x, u, t, p, out);
        Ok(())
    }

    pub fn running_cost(&self, x: &[f64], u: &[f64], t: f64, p: &[f64]) -> Result<f64, Error> {
        self.check_args(x, u, t, p)?;
        Ok(self.running_cost.as_ref().map_or(0.0, |l| l(x, u, t, p)))
    }

    pub fn terminal_cost(&self, xf: &[f64], tf: f64, p: &[f64]) -> Result<f64, Error> {
        self.check_args(xf, &[], tf, p)?;
        Ok(self.terminal_cost.as_ref().map_or(0.0, |phi| phi(xf, tf, p)))
    }

    pub fn boundary(&self, x0: &[f64], xf: &[f64], tf: f64, p: &[f64], out: &mut [f64]) -> Result<(), Error> {
        self.check_args(x0, &[], tf, p)?;
        self.check_args(xf, &[], tf, p)?;
        if let Some((rows, b)) = &self.boundary {
            debug_assert_eq!(out.len(), *rows);
            b(x0, xf, tf, p, out);
        }
        Ok(())
    }

    pub fn path_constraints(
        &self,
        set: usize,
        x: &[f64],
        u: &[f64],
        t: f64,
        p: &[f64],
        out: &mut [f64],
    ) -> Result<(), Error> {
        self.check_args(x, u, t, p)?;
        debug_assert_eq!(out.len(), self.sets[set].rows);
        (self.sets[set].eval)(x, u, t, p, out);
        Ok(())
    }

    /// Dynamics Jacobian over `v`, dense `nx x node_dim` row-major.
    pub fn dynamics_node_jacobian(
        &self,
        x: &[f64],
        u: &[f64],
        t: f64,
        p: &[f64],
        out: &mut [f64],
    ) -> Result<(), Error> {
        self.check_args(x, u, t, p)?;
        if let Some(jac) = &self.dynamics_jacobian {
            jac(x, u, t, p, out);
        } else {
            let eval = self.dynamics.clone();
            fd_node_jacobian(move |x, u, t, p, row| eval(x, u, t, p, row), self.nx, x, u, t, p, out);
        }
        Ok(())
    }

    /// Path-constraint Jacobian over `v`, dense `rows x node_dim` row-major.
    pub fn path_node_jacobian(
        &self,
        set: usize,
        x: &[f64],
        u: &[f64],
        t: f64,
        p: &[f64],
        out: &mut [f64],
    ) -> Result<(), Error> {
        self.check_args(x, u, t, p)?;
        let cs = &self.sets[set];
        if let Some(jac) = &cs.jacobian {
            jac(x, u, t, p, out);
        } else {
            let eval = cs.eval.clone();
            fd_node_jacobian(move |x, u, t, p, row| eval(x, u, t, p, row), cs.rows, x, u, t, p, out);
        }
        Ok(())
    }

    /// Running-cost gradient over `v`, length `node_dim`.
    pub fn running_cost_node_gradient(
        &self,
        x: &[f64],
        u: &[f64],
        t: f64,
        p: &[f64],
        out: &mut [f64],
    ) -> Result<(), Error> {
        self.check_args(x, u, t, p)?;
        match (&self.running_cost_gradient, &self.running_cost) {
            (Some(g), _) => g(x, u, t, p, out),
            (None, Some(l)) => {
                let l = l.clone();
                fd_node_jacobian(
                    move |x, u, t, p, row| row[0] = l(x, u, t, p),
                    1,
                    x,
                    u,
                    t,
                    p,
                    out,
                );
            }
            (None, None) => out.iter_mut().for_each(|v| *v = 0.0),
        }
        Ok(())
    }

    /// Terminal-cost gradient over `[xf, p, tf]`, length `nx + np + 1`.
    pub fn terminal_cost_gradient(
        &self,
        xf: &[f64],
        tf: f64,
        p: &[f64],
        out: &mut [f64],
    ) -> Result<(), Error> {
        self.check_args(xf, &[], tf, p)?;
        let Some(phi) = &self.terminal_cost else {
            out.iter_mut().for_each(|v| *v = 0.0);
            return Ok(());
        };
        let mut args = TerminalArgs { xf: xf.to_vec(), tf, p: p.to_vec() };
        for j in 0..out.len() {
            let base = args.get(j);
            let step = FD_STEP * (1.0 + base.abs());
            args.set(j, base + step);
            let hi = phi(&args.xf, args.tf, &args.p);
            args.set(j, base - step);
            let lo = phi(&args.xf, args.tf, &args.p);
            args.set(j, base);
            out[j] = (hi - lo) / (2.0 * step);
        }
        Ok(())
    }

    /// Boundary Jacobian over `[x0, xf, p, tf]`, dense row-major.
    pub fn boundary_jacobian(
        &self,
        x0: &[f64],
        xf: &[f64],
        tf: f64,
        p: &[f64],
        out: &mut [f64],
    ) -> Result<(), Error> {
        self.check_args(x0, &[], tf, p)?;
        self.check_args(xf, &[], tf, p)?;
        let Some((rows, b)) = &self.boundary else {
            return Ok(());
        };
        let (rows, b) = (*rows, b.clone());
        let width = 2 * self.nx + self.np + 1;
        debug_assert_eq!(out.len(), rows * width);
        let mut args = BoundaryArgs { x0: x0.to_vec(), xf: xf.to_vec(), tf, p: p.to_vec() };
        let mut plus = vec![0.0; rows];
        let mut minus = vec![0.0; rows];
        for j in 0..width {
            let base = args.get(j);
            let step = FD_STEP * (1.0 + base.abs());
            args.set(j, base + step);
            b(&args.x0, &args.xf, args.tf, &args.p, &mut plus);
            args.set(j, base - step);
            b(&args.x0, &args.xf, args.tf, &args.p, &mut minus);
            args.set(j, base);
            for r in 0..rows {
                out[r * width + j] = (plus[r] - minus[r]) / (2.0 * step);
            }
        }
        Ok(())
    }

    /// Weighted node Hessian over `v`:
    /// `sigma * running-cost + sum_i omega_i f_i + sum_sets lambda' c`.
    /// `lambdas` holds one weight slice per constraint set, in declaration
    /// order; pass empty slices for filtered-out sets. Output is dense
    /// `node_dim x node_dim`, symmetric.
    pub fn node_hessian(
        &self,
        x: &[f64],
        u: &[f64],
        t: f64,
        p: &[f64],
        sigma: f64,
        omega: &[f64],
        lambdas: &[&[f64]],
        out: &mut [f64],
    ) -> Result<(), Error> {
        self.check_args(x, u, t, p)?;
        let d = self.node_dim();
        debug_assert_eq!(out.len(), d * d);
        debug_assert_eq!(lambdas.len(), self.sets.len());
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut block = vec![0.0; d * d];

        if sigma != 0.0 && self.running_cost.is_some() {
            if let Some(h) = &self.running_cost_hessian {
                h(x, u, t, p, &mut block);
            } else {
                let this = self.clone();
                fd_node_hessian(
                    move |x, u, t, p, g| this.running_cost_node_gradient(x, u, t, p, g).unwrap(),
                    x,
                    u,
                    t,
                    p,
                    &mut block,
                );
            }
            for (o, b) in out.iter_mut().zip(&block) {
                *o += sigma * b;
            }
        }

        if omega.iter().any(|w| *w != 0.0) {
            if let Some(h) = &self.dynamics_hessian {
                h(x, u, t, p, omega, &mut block);
            } else {
                let this = self.clone();
                let omega = omega.to_vec();
                let nx = self.nx;
                let mut jac = vec![0.0; nx * d];
                fd_node_hessian(
                    move |x, u, t, p, g| {
                        this.dynamics_node_jacobian(x, u, t, p, &mut jac).unwrap();
                        for j in 0..g.len() {
                            g[j] = (0..nx).map(|i| omega[i] * jac[i * g.len() + j]).sum();
                        }
                    },
                    x,
                    u,
                    t,
                    p,
                    &mut block,
                );
            }
            for (o, b) in out.iter_mut().zip(&block) {
                *o += b;
            }
        }

        for (si, cs) in self.sets.iter().enumerate() {
            let lam = lambdas[si];
            if lam.is_empty() || lam.iter().all(|w| *w == 0.0) {
                continue;
            }
            debug_assert_eq!(lam.len(), cs.rows);
            if let Some(h) = &cs.hessian {
                h(x, u, t, p, lam, &mut block);
            } else {
                let this = self.clone();
                let lam = lam.to_vec();
                let rows = cs.rows;
                let mut jac = vec![0.0; rows * d];
                fd_node_hessian(
                    move |x, u, t, p, g| {
                        this.path_node_jacobian(si, x, u, t, p, &mut jac).unwrap();
                        for j in 0..g.len() {
                            g[j] = (0..rows).map(|r| lam[r] * jac[r * g.len() + j]).sum();
                        }
                    },
                    x,
                    u,
                    t,
                    p,
                    &mut block,
                );
            }
            for (o, b) in out.iter_mut().zip(&block) {
                *o += b;
            }
        }

        symmetrize(out, d);
        Ok(())
    }

    /// Terminal-cost Hessian over `[xf, p, tf]`, scaled by `sigma`. Always
    /// finite differences of [`Self::terminal_cost_gradient`].
    pub fn terminal_cost_hessian(
        &self,
        xf: &[f64],
        tf: f64,
        p: &[f64],
        sigma: f64,
        out: &mut [f64],
    ) -> Result<(), Error> {
        let d = self.nx + self.np + 1;
        debug_assert_eq!(out.len(), d * d);
        out.iter_mut().for_each(|v| *v = 0.0);
        if sigma == 0.0 || self.terminal_cost.is_none() {
            return Ok(());
        }
        let mut args = TerminalArgs { xf: xf.to_vec(), tf, p: p.to_vec() };
        let mut plus = vec![0.0; d];
        let mut minus = vec![0.0; d];
        for j in 0..d {
            let base = args.get(j);
            let step = FD_STEP.sqrt() * (1.0 + base.abs());
            args.set(j, base + step);
            self.terminal_cost_gradient(&args.xf, args.tf, &args.p, &mut plus)?;
            args.set(j, base - step);
            self.terminal_cost_gradient(&args.xf, args.tf, &args.p, &mut minus)?;
            args.set(j, base);
            for i in 0..d {
                out[i * d + j] = sigma * (plus[i] - minus[i]) / (2.0 * step);
            }
        }
        symmetrize(out, d);
        Ok(())
    }

    /// Weighted boundary Hessian `sum_r mult_r b_r` over `[x0, xf, p, tf]`.
    /// Always finite differences of [`Self::boundary_jacobian`].
    pub fn boundary_hessian(
        &self,
        x0: &[f64],
        xf: &[f64],
        tf: f64,
        p: &[f64],
        mults: &[f64],
        out: &mut [f64],
    ) -> Result<(), Error> {
        let d = 2 * self.nx + self.np + 1;
        debug_assert_eq!(out.len(), d * d);
        out.iter_mut().for_each(|v| *v = 0.0);
        let rows = self.boundary_rows();
        if rows == 0 || mults.iter().all(|m| *m == 0.0) {
            return Ok(());
        }
        let mut args = BoundaryArgs { x0: x0.to_vec(), xf: xf.to_vec(), tf, p: p.to_vec() };
        let mut plus = vec![0.0; rows * d];
        let mut minus = vec![0.0; rows * d];
        for j in 0..d {
            let base = args.get(j);
            let step = FD_STEP.sqrt() * (1.0 + base.abs());
            args.set(j, base + step);
            self.boundary_jacobian(&args.x0, &args.xf, args.tf, &args.p, &mut plus)?;
            args.set(j, base - step);
            self.boundary_jacobian(&args.x0, &args.xf, args.tf, &args.p, &mut minus)?;
            args.set(j, base);
            for i in 0..d {
                let grad_diff: f64 = (0..rows)
                    .map(|r| mults[r] * (plus[r * d + i] - minus[r * d + i]))
                    .sum();
                out[i * d + j] = grad_diff / (2.0 * step);
            }
        }
        symmetrize(out, d);
        Ok(())
    }
}

struct NodeArgs {
    x: Vec<f64>,
    u: Vec<f64>,
    t: f64,
    p: Vec<f64>,
}

impl NodeArgs {
    fn get(&self, j: usize) -> f64 {
        let (nx, nu, np) = (self.x.len(), self.u.len(), self.p.len());
        if j < nx {
            self.x[j]
        } else if j < nx + nu {
            self.u[j - nx]
        } else if j < nx + nu + np {
            self.p[j - nx - nu]
        } else {
            self.t
        }
    }
    fn set(&mut self, j: usize, value: f64) {
        let (nx, nu, np) = (self.x.len(), self.u.len(), self.p.len());
        if j < nx {
            self.x[j] = value;
        } else if j < nx + nu {
            self.u[j - nx] = value;
        } else if j < nx + nu + np {
            self.p[j - nx - nu] = value;
        } else {
            self.t = value;
        }
    }
}

struct TerminalArgs {
    xf: Vec<f64>,
    tf: f64,
    p: Vec<f64>,
}

impl TerminalArgs {
    fn get(&self, j: usize) -> f64 {
        let (nx, np) = (self.xf.len(), self.p.len());
        if j < nx {
            self.xf[j]
        } else if j < nx + np {
            self.p[j - nx]
        } else {
            self.tf
        }
    }
    fn set(&mut self, j: usize, value: f64) {
        let (nx, np) = (self.xf.len(), self.p.len());
        if j < nx {
            self.xf[j] = value;
        } else if j < nx + np {
            self.p[j - nx] = value;
        } else {
            self.tf = value;
        }
    }
}

struct BoundaryArgs {
    x0: Vec<f64>,
    xf: Vec<f64>,
    tf: f64,
    p: Vec<f64>,
}

impl BoundaryArgs {
    fn get(&self, j: usize) -> f64 {
        let (nx, np) = (self.x0.len(), self.p.len());
        if j < nx {
            self.x0[j]
        } else if j < 2 * nx {
            self.xf[j - nx]
        } else if j < 2 * nx + np {
            self.p[j - 2 * nx]
        } else {
            self.tf
        }
    }
    fn set(&mut self, j: usize, value: f64) {
        let (nx, np) = (self.x0.len(), self.p.len());
        if j < nx {
            self.x0[j] = value;
        } else if j < 2 * nx {
            self.xf[j - nx] = value;
        } else if j < 2 * nx + np {
            self.p[j - 2 * nx] = value;
        } else {
            self.tf = value;
        }
    }
}

/// Central-difference Jacobian of a vector function of `(x, u, t, p)` over
/// the node layout, dense `rows x node_dim` row-major.
fn fd_node_jacobian(
    mut eval: impl FnMut(&[f64], &[f64], f64, &[f64], &mut [f64]),
    rows: usize,
    x: &[f64],
    u: &[f64],
    t: f64,
    p: &[f64],
    out: &mut [f64],
) {
    let d = x.len() + u.len() + p.len() + 1;
    debug_assert_eq!(out.len(), rows * d);
    let mut args = NodeArgs { x: x.to_vec(), u: u.to_vec(), t, p: p.to_vec() };
    let mut plus = vec![0.0; rows];
    let mut minus = vec![0.0; rows];
    for j in 0..d {
        let base = args.get(j);
        let step = FD_STEP * (1.0 + base.abs());
        args.set(j, base + step);
        eval(&args.x, &args.u, args.t, &args.p, &mut plus);
        args.set(j, base - step);
        eval(&args.x, &args.u, args.t, &args.p, &mut minus);
        args.set(j, base);
        for r in 0..rows {
            out[r * d + j] = (plus[r] - minus[r]) / (2.0 * step);
        }
    }
}

/// Central-difference Hessian from a gradient function over the node layout.
/// The wider step keeps nested-difference noise in check.
fn fd_node_hessian(
    mut grad: impl FnMut(&[f64], &[f64], f64, &[f64], &mut [f64]),
    x: &[f64],
    u: &[f64],
    t: f64,
    p: &[f64],
    out: &mut [f64],
) {
    let d = x.len() + u.len() + p.len() + 1;
    debug_assert_eq!(out.len(), d * d);
    let mut args = NodeArgs { x: x.to_vec(), u: u.to_vec(), t, p: p.to_vec() };
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    for j in 0..d {
        let base = args.get(j);
        let step = FD_STEP.sqrt() * (1.0 + base.abs());
        args.set(j, base + step);
        grad(&args.x, &args.u, args.t, &args.p, &mut plus);
        args.set(j, base - step);
        grad(&args.x, &args.u, args.t, &args.p, &mut minus);
        args.set(j, base);
        for i in 0..d {
            out[i * d + j] = (plus[i] - minus[i]) / (2.0 * step);
        }
    }
}

fn symmetrize(m: &mut [f64], d: usize) {
    for i in 0..d {
        for j in i + 1..d {
            let avg = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = avg;
            m[j * d + i] = avg;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Van der Pol oscillator with a control input and one parameter: rich
    // enough to exercise every derivative path.
    fn vdp() -> Ocp {
        Ocp::builder(2, 1, 1, 0.0, TfSpec::Fixed(5.0))
            .dynamics(|x, u, t, p, out| {
                out[0] = x[1];
                out[1] = p[0] * (1.0 - x[0] * x[0]) * x[1] - x[0] + u[0] * (1.0 + 0.1 * t);
            })
            .running_cost(|x, u, _t, _p| x[0] * x[0] + x[1] * x[1] + u[0] * u[0])
            .terminal_cost(|xf, tf, p| xf[0] * xf[0] * p[0] + 0.5 * tf)
            .build()
            .unwrap()
    }

    #[test]
    fn fd_jacobian_matches_analytic_on_van_der_pol() {
        let ocp = Ocp::builder(2, 1, 1, 0.0, TfSpec::Fixed(5.0))
            .dynamics(|x, u, t, p, out| {
                out[0] = x[1];
                out[1] = p[0] * (1.0 - x[0] * x[0]) * x[1] - x[0] + u[0] * (1.0 + 0.1 * t);
            })
            .dynamics_jacobian(|x, u, t, p, jac| {
                // v = [x0, x1, u0, p0, t], rows are f0, f1.
                let d = 5;
                jac.iter_mut().for_each(|v| *v = 0.0);
                jac[0 * d + 1] = 1.0;
                jac[1 * d + 0] = -2.0 * p[0] * x[0] * x[1] - 1.0;
                jac[1 * d + 1] = p[0] * (1.0 - x[0] * x[0]);
                jac[1 * d + 2] = 1.0 + 0.1 * t;
                jac[1 * d + 3] = (1.0 - x[0] * x[0]) * x[1];
                jac[1 * d + 4] = 0.1 * u[0];
            })
            .build()
            .unwrap();
        let fd_only = Ocp::builder(2, 1, 1, 0.0, TfSpec::Fixed(5.0))
            .dynamics(|x, u, t, p, out| {
                out[0] = x[1];
                out[1] = p[0] * (1.0 - x[0] * x[0]) * x[1] - x[0] + u[0] * (1.0 + 0.1 * t);
            })
            .build()
            .unwrap();

        let (x, u, t, p) = ([0.7, -0.3], [0.4], 1.3, [2.0]);
        let mut analytic = vec![0.0; 2 * 5];
        let mut fd = vec![0.0; 2 * 5];
        ocp.dynamics_node_jacobian(&x, &u, t, &p, &mut analytic).unwrap();
        fd_only.dynamics_node_jacobian(&x, &u, t, &p, &mut fd).unwrap();
        for (a, f) in analytic.iter().zip(&fd) {
            assert_relative_eq!(a, f, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn fd_cost_gradient_matches_analytic() {
        let ocp = vdp();
        let (x, u, t, p) = ([0.7, -0.3], [0.4], 1.3, [2.0]);
        let mut grad = vec![0.0; 5];
        ocp.running_cost_node_gradient(&x, &u, t, &p, &mut grad).unwrap();
        let expected = [2.0 * x[0], 2.0 * x[1], 2.0 * u[0], 0.0, 0.0];
        for (g, e) in grad.iter().zip(&expected) {
            assert_relative_eq!(g, e, epsilon = 1e-8);
        }
    }

    #[test]
    fn node_hessian_matches_fd_of_gradient() {
        let ocp = vdp();
        let (x, u, t, p) = ([0.7, -0.3], [0.4], 1.3, [2.0]);
        let d = ocp.node_dim();
        let omega = [0.3, -1.2];
        let mut hess = vec![0.0; d * d];
        ocp.node_hessian(&x, &u, t, &p, 1.0, &omega, &[], &mut hess).unwrap();

        // Independent oracle: difference the combined gradient
        // sigma * grad L + J_f' omega directly.
        let combined = |x: &[f64], u: &[f64], t: f64, p: &[f64], g: &mut [f64]| {
            let mut lg = vec![0.0; d];
            ocp.running_cost_node_gradient(x, u, t, p, &mut lg).unwrap();
            let mut jac = vec![0.0; 2 * d];
            ocp.dynamics_node_jacobian(x, u, t, p, &mut jac).unwrap();
            for j in 0..d {
                g[j] = lg[j] + omega[0] * jac[j] + omega[1] * jac[d + j];
            }
        };
        let mut oracle = vec![0.0; d * d];
        fd_node_hessian(combined, &x, &u, t, &p, &mut oracle);
        symmetrize(&mut oracle, d);
        for (h, o) in hess.iter().zip(&oracle) {
            assert_relative_eq!(h, o, epsilon = 5e-4, max_relative = 5e-4);
        }
    }

    #[test]
    fn analytic_constraint_hessian_agrees_with_fd() {
        let disc = ConstraintSet::new("disc", 1, |x, _u, _t, _p, out| {
            out[0] = 4.0 - (x[0] - 1.0).powi(2) - (x[1] + 2.0).powi(2);
        })
        .with_jacobian(|x, _u, _t, _p, jac| {
            jac.iter_mut().for_each(|v| *v = 0.0);
            jac[0] = -2.0 * (x[0] - 1.0);
            jac[1] = -2.0 * (x[1] + 2.0);
        })
        .with_hessian(|_x, _u, _t, _p, lam, h| {
            h.iter_mut().for_each(|v| *v = 0.0);
            let d = 4;
            h[0] = -2.0 * lam[0];
            h[d + 1] = -2.0 * lam[0];
        });
        let with_analytic = Ocp::builder(2, 1, 0, 0.0, TfSpec::Fixed(1.0))
            .dynamics(|_x, u, _t, _p, out| {
                out[0] = u[0];
                out[1] = 0.0;
            })
            .constraint_set(disc)
            .build()
            .unwrap();
        let plain_set = ConstraintSet::new("disc", 1, |x, _u, _t, _p, out| {
            out[0] = 4.0 - (x[0] - 1.0).powi(2) - (x[1] + 2.0).powi(2);
        });
        let with_fd = Ocp::builder(2, 1, 0, 0.0, TfSpec::Fixed(1.0))
            .dynamics(|_x, u, _t, _p, out| {
                out[0] = u[0];
                out[1] = 0.0;
            })
            .constraint_set(plain_set)
            .build()
            .unwrap();

        let (x, u, t) = ([0.3, 0.8], [0.1], 0.5);
        let d = with_analytic.node_dim();
        let lam = [1.7];
        let omega = [0.0, 0.0];
        let mut ha = vec![0.0; d * d];
        let mut hf = vec![0.0; d * d];
        with_analytic.node_hessian(&x, &u, t, &[], 0.0, &omega, &[&lam], &mut ha).unwrap();
        with_fd.node_hessian(&x, &u, t, &[], 0.0, &omega, &[&lam], &mut hf).unwrap();
        for (a, f) in ha.iter().zip(&hf) {
            assert_relative_eq!(a, f, epsilon = 1e-5, max_relative = 1e-5);
        }
    }

    #[test]
    fn boundary_jacobian_is_exact_for_linear_rows() {
        let ocp = Ocp::builder(2, 1, 0, 0.0, TfSpec::Free { guess: 4.0, lo: 1.0, hi: 10.0 })
            .dynamics(|_x, u, _t, _p, out| {
                out[0] = u[0];
                out[1] = 0.0;
            })
            .boundary(3, |x0, xf, tf, _p, out| {
                out[0] = x0[0] - 1.0;
                out[1] = xf[1] + 2.0;
                out[2] = 3.0 * xf[0] - 0.5 * tf;
            })
            .build()
            .unwrap();
        // Columns follow [x0, xf, p, tf]; central differences are exact on
        // linear rows up to roundoff.
        let width = 2 * 2 + 0 + 1;
        let mut jac = vec![0.0; 3 * width];
        ocp.boundary_jacobian(&[1.0, 0.5], &[4.0, -2.0], 4.0, &[], &mut jac).unwrap();
        let expected = [
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 3.0, 0.0, -0.5],
        ];
        for r in 0..3 {
            for c in 0..width {
                assert_relative_eq!(jac[r * width + c], expected[r][c], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn builder_rejects_inverted_and_empty_interval_bounds() {
        let bad = Ocp::builder(1, 1, 0, 0.0, TfSpec::Fixed(1.0))
            .dynamics(|_x, u, _t, _p, out| out[0] = u[0])
            .state_bounds(vec![2.0], vec![1.0])
            .build();
        assert!(matches!(bad, Err(Error::ModelInvalid { .. })));
        let equal = Ocp::builder(1, 1, 0, 0.0, TfSpec::Fixed(1.0))
            .dynamics(|_x, u, _t, _p, out| out[0] = u[0])
            .input_bounds(vec![1.0], vec![1.0])
            .build();
        assert!(matches!(equal, Err(Error::ModelInvalid { .. })));
    }

    #[test]
    fn builder_rejects_bad_time_specs_and_duplicate_sets() {
        let backwards = Ocp::builder(1, 1, 0, 2.0, TfSpec::Fixed(1.0))
            .dynamics(|_x, u, _t, _p, out| out[0] = u[0])
            .build();
        assert!(matches!(backwards, Err(Error::ModelInvalid { .. })));
        let bad_free = Ocp::builder(1, 1, 0, 0.0, TfSpec::Free { guess: 5.0, lo: 1.0, hi: 4.0 })
            .dynamics(|_x, u, _t, _p, out| out[0] = u[0])
            .build();
        assert!(matches!(bad_free, Err(Error::ModelInvalid { .. })));
        let dup = Ocp::builder(1, 1, 0, 0.0, TfSpec::Fixed(1.0))
            .dynamics(|_x, u, _t, _p, out| out[0] = u[0])
            .constraint_set(ConstraintSet::new("zone", 1, |_x, _u, _t, _p, out| out[0] = -1.0))
            .constraint_set(ConstraintSet::new("zone", 1, |_x, _u, _t, _p, out| out[0] = -1.0))
            .build();
        assert!(matches!(dup, Err(Error::ModelInvalid { .. })));
        let no_dyn = Ocp::builder(1, 1, 0, 0.0, TfSpec::Fixed(1.0)).build();
        assert!(matches!(no_dyn, Err(Error::ModelInvalid { .. })));
    }

    #[test]
    fn nan_inputs_are_reported_even_when_output_would_be_finite() {
        // The branch hides the NaN: output is finite either way.
        let ocp = Ocp::builder(1, 1, 0, 0.0, TfSpec::Fixed(1.0))
            .dynamics(|x, _u, _t, _p, out| out[0] = if x[0] > 0.0 { 1.0 } else { 0.0 })
            .build()
            .unwrap();
        let mut out = [0.0];
        let err = ocp.dynamics(&[f64::NAN], &[0.0], 0.0, &[], &mut out);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
        let err = ocp.dynamics(&[1.0], &[0.0], f64::NAN, &[], &mut out);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn default_names_are_generated() {
        let ocp = Ocp::builder(2, 1, 0, 0.0, TfSpec::Fixed(1.0))
            .dynamics(|_x, u, _t, _p, out| {
                out[0] = u[0];
                out[1] = 0.0;
            })
            .build()
            .unwrap();
        assert_eq!(ocp.state_names(), ["x0".to_string(), "x1".to_string()]);
        assert_eq!(ocp.input_names(), ["u0".to_string()]);
        let named = Ocp::builder(2, 1, 0, 0.0, TfSpec::Fixed(1.0))
            .dynamics(|_x, u, _t, _p, out| {
                out[0] = u[0];
                out[1] = 0.0;
            })
            .state_names(&["pos", "vel"])
            .input_names(&["acc"])
            .build()
            .unwrap();
        assert_eq!(named.state_names()[0], "pos");
        assert_eq!(named.input_names()[0], "acc");
    }
}
