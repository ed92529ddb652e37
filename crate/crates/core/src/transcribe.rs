//! Separated Hermite-Simpson transcription.
//!
//! States and inputs become decision variables at every collocation node,
//! midpoints included; the interpolation and quadrature conditions become
//! equality rows. For interval `k` with endpoint nodes `a`, `b`, midpoint
//! `m`, width `h = (tau_{k+1} - tau_k)(tf - t0)`, and `f_i = f(x_i, u_i,
//! t_i, p)`:
//!
//! * Hermite rows:  `x_m - (x_a + x_b)/2 - (h/8)(f_a - f_b) = 0`
//! * Simpson rows:  `x_b - x_a - (h/6)(f_a + 4 f_m + f_b) = 0`
//!
//! Boundary rows follow all defect rows. The running cost integrates with
//! the matching Simpson weights `(h/6, 4h/6, h/6)`.
//!
//! Decision vector layout: all node states (node-major), all node inputs
//! (node-major), static parameters, then the final time when it is free.
//! Free final time enters defects both through `h` and through node times
//! `t_i = t0 + tau_i (tf - t0)`; derivatives carry both terms.
//!
//! An [`ActivationFilter`] chooses, per constraint set, which nodes receive
//! inequality rows: everywhere, nowhere, or inside given time windows.

use crate::error::Error;
use crate::mesh::Mesh;
use crate::nlp::NlpProblem;
use crate::ocp::{Ocp, TfSpec};

/// Node coverage for one constraint set.
#[derive(Debug, Clone, PartialEq)]
pub enum SetFilter {
    All,
    None,
    /// Closed windows `[a, b]` in absolute time; a node gets rows when it
    /// lies in any window. Requires a fixed final time.
    Windows(Vec<[f64; 2]>),
}

/// Per-set node coverage, parallel to [`Ocp::constraint_sets`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationFilter {
    by_set: Vec<SetFilter>,
}

impl ActivationFilter {
    /// Every set enforced at every node.
    pub fn all(ocp: &Ocp) -> Self {
        Self { by_set: vec![SetFilter::All; ocp.constraint_sets().len()] }
    }

    /// No set enforced anywhere (useful as a base for [`Self::set`]).
    pub fn none(ocp: &Ocp) -> Self {
        Self { by_set: vec![SetFilter::None; ocp.constraint_sets().len()] }
    }

    pub fn set(&mut self, ocp: &Ocp, name: &str, filter: SetFilter) -> Result<(), Error> {
        let Some(idx) = ocp.constraint_sets().iter().position(|s| s.name() == name) else {
            return Err(Error::UnknownConstraintSet { name: name.to_string() });
        };
        if let SetFilter::Windows(windows) = &filter {
            for w in windows {
                if !(w[0].is_finite() && w[1].is_finite() && w[0] <= w[1]) {
                    return Err(Error::BadFilterWindow { name: name.to_string(), a: w[0], b: w[1] });
                }
            }
        }
        self.by_set[idx] = filter;
        Ok(())
    }

    pub fn get(&self, set: usize) -> &SetFilter {
        &self.by_set[set]
    }

    pub fn len(&self) -> usize {
        self.by_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_set.is_empty()
    }

    fn is_active(&self, set: usize, t: f64, slop: f64) -> bool {
        match &self.by_set[set] {
            SetFilter::All => true,
            SetFilter::None => false,
            SetFilter::Windows(ws) => ws.iter().any(|w| t >= w[0] - slop && t <= w[1] + slop),
        }
    }
}

/// Provenance of one inequality row: which set, which row within it, which
/// node, and the node's mesh fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IneqRow {
    pub set: usize,
    pub row_in_set: usize,
    pub node: usize,
    pub frac: f64,
}

/// One transcription of a problem on a mesh under a filter. Implements
/// [`NlpProblem`] for the interior-point solver.
pub struct DiscretizedNlp {
    ocp: Ocp,
    mesh: Mesh,
    filter: ActivationFilter,
    node_fracs: Vec<f64>,
    free_tf: bool,
    n_vars: usize,
    n_eq: usize,
    n_ineq: usize,
    ineq_rows: Vec<IneqRow>,
    /// Per node: (set index, first inequality row) for each active set.
    node_sets: Vec<Vec<(usize, usize)>>,
    /// Simpson quadrature weight per node, in mesh-fraction units.
    quad_frac: Vec<f64>,
}

impl DiscretizedNlp {
    pub fn new(ocp: &Ocp, mesh: &Mesh, filter: &ActivationFilter) -> Result<Self, Error> {
        assert_eq!(
            filter.len(),
            ocp.constraint_sets().len(),
            "filter was built for a different problem"
        );
        let free_tf = matches!(ocp.tf_spec(), TfSpec::Free { .. });
        if free_tf && filter.by_set.iter().any(|f| matches!(f, SetFilter::Windows(_))) {
            return Err(Error::ModelInvalid {
                reason: "time-window filters need a fixed final time; use full activation instead"
                    .into(),
            });
        }
        let node_fracs = mesh.node_fractions();
        let n_nodes = node_fracs.len();
        let (nx, nu, np) = (ocp.nx(), ocp.nu(), ocp.np());
        let n_vars = n_nodes * (nx + nu) + np + usize::from(free_tf);
        let n_eq = 2 * mesh.intervals() * nx + ocp.boundary_rows();

        let tf_for_windows = match ocp.tf_spec() {
            TfSpec::Fixed(tf) => tf,
            TfSpec::Free { guess, .. } => guess,
        };
        let horizon = tf_for_windows - ocp.t0();
        let slop = 1e-9 * horizon.abs().max(1.0);
        let mut ineq_rows = Vec::new();
        let mut node_sets = vec![Vec::new(); n_nodes];
        for (i, &frac) in node_fracs.iter().enumerate() {
            let t = ocp.t0() + frac * horizon;
            for (si, set) in ocp.constraint_sets().iter().enumerate() {
                if !filter.is_active(si, t, slop) {
                    continue;
                }
                node_sets[i].push((si, ineq_rows.len()));
                for l in 0..set.rows() {
                    ineq_rows.push(IneqRow { set: si, row_in_set: l, node: i, frac });
                }
            }
        }
        let n_ineq = ineq_rows.len();

        let mut quad_frac = vec![0.0; n_nodes];
        for (k, pair) in mesh.fractions().windows(2).enumerate() {
            let dt = pair[1] - pair[0];
            quad_frac[2 * k] += dt / 6.0;
            quad_frac[2 * k + 1] += 4.0 * dt / 6.0;
            quad_frac[2 * k + 2] += dt / 6.0;
        }

        Ok(Self {
            ocp: ocp.clone(),
            mesh: mesh.clone(),
            filter: filter.clone(),
            node_fracs,
            free_tf,
            n_vars,
            n_eq,
            n_ineq,
            ineq_rows,
            node_sets,
            quad_frac,
        })
    }

    pub fn ocp(&self) -> &Ocp {
        &self.ocp
    }
    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }
    pub fn filter(&self) -> &ActivationFilter {
        &self.filter
    }
    pub fn num_nodes(&self) -> usize {
        self.node_fracs.len()
    }
    pub fn node_fractions(&self) -> &[f64] {
        &self.node_fracs
    }
    pub fn row_infos(&self) -> &[IneqRow] {
        &self.ineq_rows
    }
    pub fn has_free_tf(&self) -> bool {
        self.free_tf
    }

    pub fn state_index(&self, node: usize, j: usize) -> usize {
        node * self.ocp.nx() + j
    }
    pub fn input_index(&self, node: usize, j: usize) -> usize {
        self.num_nodes() * self.ocp.nx() + node * self.ocp.nu() + j
    }
    pub fn param_index(&self, j: usize) -> usize {
        self.num_nodes() * (self.ocp.nx() + self.ocp.nu()) + j
    }
    pub fn tf_index(&self) -> Option<usize> {
        self.free_tf.then(|| self.n_vars - 1)
    }

    pub fn state<'a>(&self, z: &'a [f64], node: usize) -> &'a [f64] {
        let at = self.state_index(node, 0);
        &z[at..at + self.ocp.nx()]
    }
    pub fn input<'a>(&self, z: &'a [f64], node: usize) -> &'a [f64] {
        let at = self.input_index(node, 0);
        &z[at..at + self.ocp.nu()]
    }
    pub fn params<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        let at = self.param_index(0);
        &z[at..at + self.ocp.np()]
    }
    pub fn tf_value(&self, z: &[f64]) -> f64 {
        match self.ocp.tf_spec() {
            TfSpec::Fixed(tf) => tf,
            TfSpec::Free { .. } => z[self.n_vars - 1],
        }
    }
    pub fn node_time(&self, z: &[f64], node: usize) -> f64 {
        self.ocp.t0() + self.node_fracs[node] * (self.tf_value(z) - self.ocp.t0())
    }

    /// Equality row of Hermite defect `j` in interval `k`.
    pub fn hermite_row(&self, k: usize, j: usize) -> usize {
        2 * k * self.ocp.nx() + j
    }
    /// Equality row of Simpson defect `j` in interval `k`.
    pub fn simpson_row(&self, k: usize, j: usize) -> usize {
        (2 * k + 1) * self.ocp.nx() + j
    }
    /// Equality row of boundary condition `r`.
    pub fn boundary_row(&self, r: usize) -> usize {
        2 * self.mesh.intervals() * self.ocp.nx() + r
    }

    /// Packs time profiles into a decision vector: states and inputs are
    /// sampled at node times (computed with the fixed or guessed final
    /// time), parameters and the final-time guess fill the tail.
    pub fn pack_profiles(
        &self,
        params: &[f64],
        state: impl Fn(f64) -> Vec<f64>,
        input: impl Fn(f64) -> Vec<f64>,
    ) -> Vec<f64> {
        assert_eq!(params.len(), self.ocp.np());
        let tf = match self.ocp.tf_spec() {
            TfSpec::Fixed(tf) => tf,
            TfSpec::Free { guess, .. } => guess,
        };
        let mut z = vec![0.0; self.n_vars];
        for (i, &frac) in self.node_fracs.iter().enumerate() {
            let t = self.ocp.t0() + frac * (tf - self.ocp.t0());
            let x = state(t);
            let u = input(t);
            assert_eq!(x.len(), self.ocp.nx());
            assert_eq!(u.len(), self.ocp.nu());
            z[self.state_index(i, 0)..self.state_index(i, 0) + x.len()].copy_from_slice(&x);
            z[self.input_index(i, 0)..self.input_index(i, 0) + u.len()].copy_from_slice(&u);
        }
        z[self.param_index(0)..self.param_index(0) + params.len()].copy_from_slice(params);
        if let Some(at) = self.tf_index() {
            z[at] = tf;
        }
        z
    }

    /// Evaluates the dynamics at every node. Returns `n_nodes * nx` values.
    fn all_dynamics(&self, z: &[f64]) -> Result<Vec<f64>, Error> {
        let nx = self.ocp.nx();
        let mut f = vec![0.0; self.num_nodes() * nx];
        for i in 0..self.num_nodes() {
            let t = self.node_time(z, i);
            self.ocp.dynamics(
                self.state(z, i),
                self.input(z, i),
                t,
                self.params(z),
                &mut f[i * nx..(i + 1) * nx],
            )?;
        }
        Ok(f)
    }

    /// Maps a node-local variable index (over `[x, u, p, t]`) to the
    /// decision-vector index; `t` maps to the final-time slot only.
    fn vidx(&self, node: usize, local: usize) -> Option<usize> {
        let (nx, nu, np) = (self.ocp.nx(), self.ocp.nu(), self.ocp.np());
        if local < nx {
            Some(self.state_index(node, local))
        } else if local < nx + nu {
            Some(self.input_index(node, local - nx))
        } else if local < nx + nu + np {
            Some(self.param_index(local - nx - nu))
        } else {
            self.tf_index()
        }
    }
}

impl NlpProblem for DiscretizedNlp {
    fn num_vars(&self) -> usize {
        self.n_vars
    }
    fn num_eq(&self) -> usize {
        self.n_eq
    }
    fn num_ineq(&self) -> usize {
        self.n_ineq
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n_nodes = self.num_nodes();
        let (x_lo, x_hi) = self.ocp.state_bounds();
        let (u_lo, u_hi) = self.ocp.input_bounds();
        let (p_lo, p_hi) = self.ocp.param_bounds();
        let mut lo = Vec::with_capacity(self.n_vars);
        let mut hi = Vec::with_capacity(self.n_vars);
        for _ in 0..n_nodes {
            lo.extend_from_slice(x_lo);
            hi.extend_from_slice(x_hi);
        }
        for _ in 0..n_nodes {
            lo.extend_from_slice(u_lo);
            hi.extend_from_slice(u_hi);
        }
        lo.extend_from_slice(p_lo);
        hi.extend_from_slice(p_hi);
        if let TfSpec::Free { lo: tlo, hi: thi, .. } = self.ocp.tf_spec() {
            lo.push(tlo);
            hi.push(thi);
        }
        (lo, hi)
    }

    fn objective(&self, z: &[f64]) -> Result<f64, Error> {
        let tf = self.tf_value(z);
        let scale = tf - self.ocp.t0();
        let mut j = self.ocp.terminal_cost(self.state(z, self.num_nodes() - 1), tf, self.params(z))?;
        if self.ocp.has_running_cost() {
            for i in 0..self.num_nodes() {
                let l = self.ocp.running_cost(
                    self.state(z, i),
                    self.input(z, i),
                    self.node_time(z, i),
                    self.params(z),
                )?;
                j += self.quad_frac[i] * scale * l;
            }
        }
        Ok(j)
    }

    fn gradient(&self, z: &[f64], grad: &mut [f64]) -> Result<(), Error> {
        grad.iter_mut().for_each(|v| *v = 0.0);
        let (nx, nu, np) = (self.ocp.nx(), self.ocp.nu(), self.ocp.np());
        let d = self.ocp.node_dim();
        let tf = self.tf_value(z);
        let scale = tf - self.ocp.t0();
        let p = self.params(z).to_vec();

        if self.ocp.has_running_cost() {
            let mut lgrad = vec![0.0; d];
            for i in 0..self.num_nodes() {
                let t = self.node_time(z, i);
                let (x, u) = (self.state(z, i), self.input(z, i));
                self.ocp.running_cost_node_gradient(x, u, t, &p, &mut lgrad)?;
                let qw = self.quad_frac[i];
                for local in 0..nx + nu + np {
                    grad[self.vidx(i, local).unwrap()] += qw * scale * lgrad[local];
                }
                if let Some(at) = self.tf_index() {
                    let l = self.ocp.running_cost(x, u, t, &p)?;
                    grad[at] += qw * l + qw * scale * lgrad[d - 1] * self.node_fracs[i];
                }
            }
        }

        // Terminal gradient over [xf, p, tf].
        let last = self.num_nodes() - 1;
        let mut tgrad = vec![0.0; nx + np + 1];
        self.ocp.terminal_cost_gradient(self.state(z, last), tf, &p, &mut tgrad)?;
        for j in 0..nx {
            grad[self.state_index(last, j)] += tgrad[j];
        }
        for j in 0..np {
            grad[self.param_index(j)] += tgrad[nx + j];
        }
        if let Some(at) = self.tf_index() {
            grad[at] += tgrad[nx + np];
        }
        Ok(())
    }

    fn eq_constraints(&self, z: &[f64], out: &mut [f64]) -> Result<(), Error> {
        let nx = self.ocp.nx();
        let f = self.all_dynamics(z)?;
        let scale = self.tf_value(z) - self.ocp.t0();
        for (k, pair) in self.mesh.fractions().windows(2).enumerate() {
            let h = (pair[1] - pair[0]) * scale;
            let (a, m, b) = (2 * k, 2 * k + 1, 2 * k + 2);
            let (xa, xm, xb) = (self.state(z, a), self.state(z, m), self.state(z, b));
            let (fa, fm, fb) =
                (&f[a * nx..(a + 1) * nx], &f[m * nx..(m + 1) * nx], &f[b * nx..(b + 1) * nx]);
            for j in 0..nx {
                out[self.hermite_row(k, j)] =
                    xm[j] - 0.5 * (xa[j] + xb[j]) - h / 8.0 * (fa[j] - fb[j]);
                out[self.simpson_row(k, j)] =
                    xb[j] - xa[j] - h / 6.0 * (fa[j] + 4.0 * fm[j] + fb[j]);
            }
        }
        let rows = self.ocp.boundary_rows();
        if rows > 0 {
            let at = self.boundary_row(0);
            self.ocp.boundary(
                self.state(z, 0),
                self.state(z, self.num_nodes() - 1),
                self.tf_value(z),
                self.params(z),
                &mut out[at..at + rows],
            )?;
        }
        Ok(())
    }

    fn ineq_constraints(&self, z: &[f64], out: &mut [f64]) -> Result<(), Error> {
        let p = self.params(z).to_vec();
        for i in 0..self.num_nodes() {
            let t = self.node_time(z, i);
            for &(si, first_row) in &self.node_sets[i] {
                let rows = self.ocp.constraint_sets()[si].rows();
                self.ocp.path_constraints(
                    si,
                    self.state(z, i),
                    self.input(z, i),
                    t,
                    &p,
                    &mut out[first_row..first_row + rows],
                )?;
            }
        }
        Ok(())
    }

    fn eq_jacobian_pattern(&self) -> Vec<(usize, usize)> {
        let (nx, nu, np) = (self.ocp.nx(), self.ocp.nu(), self.ocp.np());
        let mut pat = Vec::new();
        for k in 0..self.mesh.intervals() {
            let (a, m, b) = (2 * k, 2 * k + 1, 2 * k + 2);
            for family in 0..2 {
                for j in 0..nx {
                    let row = if family == 0 { self.hermite_row(k, j) } else { self.simpson_row(k, j) };
                    for node in [a, m, b] {
                        for c in 0..nx {
                            pat.push((row, self.state_index(node, c)));
                        }
                    }
                    for node in [a, m, b] {
                        for c in 0..nu {
                            pat.push((row, self.input_index(node, c)));
                        }
                    }
                    for c in 0..np {
                        pat.push((row, self.param_index(c)));
                    }
                    if let Some(at) = self.tf_index() {
                        pat.push((row, at));
                    }
                }
            }
        }
        let last = self.num_nodes() - 1;
        for r in 0..self.ocp.boundary_rows() {
            let row = self.boundary_row(r);
            for c in 0..nx {
                pat.push((row, self.state_index(0, c)));
            }
            for c in 0..nx {
                pat.push((row, self.state_index(last, c)));
            }
            for c in 0..np {
                pat.push((row, self.param_index(c)));
            }
            if let Some(at) = self.tf_index() {
                pat.push((row, at));
            }
        }
        pat
    }

    fn eq_jacobian_values(&self, z: &[f64], vals: &mut [f64]) -> Result<(), Error> {
        let (nx, nu, np) = (self.ocp.nx(), self.ocp.nu(), self.ocp.np());
        let d = self.ocp.node_dim();
        let scale = self.tf_value(z) - self.ocp.t0();
        let p = self.params(z).to_vec();
        let f = self.all_dynamics(z)?;
        // Node Jacobians, nx x d each.
        let mut jac = vec![0.0; self.num_nodes() * nx * d];
        for i in 0..self.num_nodes() {
            self.ocp.dynamics_node_jacobian(
                self.state(z, i),
                self.input(z, i),
                self.node_time(z, i),
                &p,
                &mut jac[i * nx * d..(i + 1) * nx * d],
            )?;
        }
        let jrow = |node: usize, j: usize| &jac[(node * nx + j) * d..(node * nx + j + 1) * d];

        let mut at = 0;
        let mut push = |vals: &mut [f64], v: f64| {
            vals[at] = v;
            at += 1;
        };
        for (k, pair) in self.mesh.fractions().windows(2).enumerate() {
            let dfr = pair[1] - pair[0];
            let h = dfr * scale;
            let (a, m, b) = (2 * k, 2 * k + 1, 2 * k + 2);
            for family in 0..2 {
                for j in 0..nx {
                    let (ja, jm, jb) = (jrow(a, j), jrow(m, j), jrow(b, j));
                    if family == 0 {
                        // Hermite row: x and u blocks for nodes a, m, b.
                        for c in 0..nx {
                            let delta = if c == j { 1.0 } else { 0.0 };
                            push(vals, -0.5 * delta - h / 8.0 * ja[c]);
                        }
                        for c in 0..nx {
                            push(vals, if c == j { 1.0 } else { 0.0 });
                        }
                        for c in 0..nx {
                            let delta = if c == j { 1.0 } else { 0.0 };
                            push(vals, -0.5 * delta + h / 8.0 * jb[c]);
                        }
                        for c in 0..nu {
                            push(vals, -h / 8.0 * ja[nx + c]);
                        }
                        for _c in 0..nu {
                            push(vals, 0.0);
                        }
                        for c in 0..nu {
                            push(vals, h / 8.0 * jb[nx + c]);
                        }
                        for c in 0..np {
                            push(vals, -h / 8.0 * (ja[nx + nu + c] - jb[nx + nu + c]));
                        }
                        if self.free_tf {
                            let v = -dfr / 8.0 * (f[a * nx + j] - f[b * nx + j])
                                - h / 8.0
                                    * (ja[d - 1] * self.node_fracs[a]
                                        - jb[d - 1] * self.node_fracs[b]);
                            push(vals, v);
                        }
                    } else {
                        // Simpson row.
                        for c in 0..nx {
                            let delta = if c == j { 1.0 } else { 0.0 };
                            push(vals, -delta - h / 6.0 * ja[c]);
                        }
                        for c in 0..nx {
                            push(vals, -4.0 * h / 6.0 * jm[c]);
                        }
                        for c in 0..nx {
                            let delta = if c == j { 1.0 } else { 0.0 };
                            push(vals, delta - h / 6.0 * jb[c]);
                        }
                        for c in 0..nu {
                            push(vals, -h / 6.0 * ja[nx + c]);
                        }
                        for c in 0..nu {
                            push(vals, -4.0 * h / 6.0 * jm[nx + c]);
                        }
                        for c in 0..nu {
                            push(vals, -h / 6.0 * jb[nx + c]);
                        }
                        for c in 0..np {
                            let col = nx + nu + c;
                            push(vals, -h / 6.0 * (ja[col] + 4.0 * jm[col] + jb[col]));
                        }
                        if self.free_tf {
                            let v = -dfr / 6.0
                                * (f[a * nx + j] + 4.0 * f[m * nx + j] + f[b * nx + j])
                                - h / 6.0
                                    * (ja[d - 1] * self.node_fracs[a]
                                        + 4.0 * jm[d - 1] * self.node_fracs[m]
                                        + jb[d - 1] * self.node_fracs[b]);
                            push(vals, v);
                        }
                    }
                }
            }
        }

        let rows = self.ocp.boundary_rows();
        if rows > 0 {
            let last = self.num_nodes() - 1;
            let width = 2 * nx + np + 1;
            let mut bjac = vec![0.0; rows * width];
            self.ocp.boundary_jacobian(
                self.state(z, 0),
                self.state(z, last),
                self.tf_value(z),
                &p,
                &mut bjac,
            )?;
            for r in 0..rows {
                for c in 0..2 * nx + np {
                    push(vals, bjac[r * width + c]);
                }
                if self.free_tf {
                    push(vals, bjac[r * width + width - 1]);
                }
            }
        }
        debug_assert_eq!(at, vals.len());
        Ok(())
    }

    fn ineq_jacobian_pattern(&self) -> Vec<(usize, usize)> {
        let (nx, nu, np) = (self.ocp.nx(), self.ocp.nu(), self.ocp.np());
        let mut pat = Vec::new();
        for (row, info) in self.ineq_rows.iter().enumerate() {
            for c in 0..nx {
                pat.push((row, self.state_index(info.node, c)));
            }
            for c in 0..nu {
                pat.push((row, self.input_index(info.node, c)));
            }
            for c in 0..np {
                pat.push((row, self.param_index(c)));
            }
            if let Some(at) = self.tf_index() {
                pat.push((row, at));
            }
        }
        pat
    }

    fn ineq_jacobian_values(&self, z: &[f64], vals: &mut [f64]) -> Result<(), Error> {
        let (nx, nu, np) = (self.ocp.nx(), self.ocp.nu(), self.ocp.np());
        let d = self.ocp.node_dim();
        let p = self.params(z).to_vec();
        let mut at = 0;
        for i in 0..self.num_nodes() {
            let t = self.node_time(z, i);
            for &(si, _) in &self.node_sets[i] {
                let rows = self.ocp.constraint_sets()[si].rows();
                let mut cjac = vec![0.0; rows * d];
                self.ocp.path_node_jacobian(si, self.state(z, i), self.input(z, i), t, &p, &mut cjac)?;
                for l in 0..rows {
                    let jr = &cjac[l * d..(l + 1) * d];
                    for c in 0..nx + nu + np {
                        vals[at] = jr[c];
                        at += 1;
                    }
                    if self.free_tf {
                        vals[at] = jr[d - 1] * self.node_fracs[i];
                        at += 1;
                    }
                }
            }
        }
        debug_assert_eq!(at, vals.len());
        Ok(())
    }

    fn hessian_pattern(&self) -> Vec<(usize, usize)> {
        let (nx, nu, np) = (self.ocp.nx(), self.ocp.nu(), self.ocp.np());
        let d_local = nx + nu + np + usize::from(self.free_tf);
        let mut pat = Vec::new();
        for i in 0..self.num_nodes() {
            for la in 0..d_local {
                for lb in la..d_local {
                    let a = self.vidx(i, la).unwrap();
                    let b = self.vidx(i, lb).unwrap();
                    pat.push((a.min(b), a.max(b)));
                }
            }
        }
        // Terminal block over [xf, p, tf].
        let last = self.num_nodes() - 1;
        let mut tidx: Vec<usize> = (0..nx).map(|j| self.state_index(last, j)).collect();
        tidx.extend((0..np).map(|j| self.param_index(j)));
        if let Some(at) = self.tf_index() {
            tidx.push(at);
        }
        for a in 0..tidx.len() {
            for b in a..tidx.len() {
                pat.push((tidx[a].min(tidx[b]), tidx[a].max(tidx[b])));
            }
        }
        // Boundary block over [x0, xf, p, tf].
        if self.ocp.boundary_rows() > 0 {
            let mut bidx: Vec<usize> = (0..nx).map(|j| self.state_index(0, j)).collect();
            bidx.extend((0..nx).map(|j| self.state_index(last, j)));
            bidx.extend((0..np).map(|j| self.param_index(j)));
            if let Some(at) = self.tf_index() {
                bidx.push(at);
            }
            for a in 0..bidx.len() {
                for b in a..bidx.len() {
                    pat.push((bidx[a].min(bidx[b]), bidx[a].max(bidx[b])));
                }
            }
        }
        pat
    }

    fn hessian_values(
        &self,
        z: &[f64],
        sigma: f64,
        eq_mult: &[f64],
        ineq_mult: &[f64],
        vals: &mut [f64],
    ) -> Result<(), Error> {
        let (nx, nu, np) = (self.ocp.nx(), self.ocp.nu(), self.ocp.np());
        let d = self.ocp.node_dim();
        let d_local = nx + nu + np + usize::from(self.free_tf);
        let n_nodes = self.num_nodes();
        let tf = self.tf_value(z);
        let scale = tf - self.ocp.t0();
        let p = self.params(z).to_vec();

        // Dynamics weights per node from the defect multipliers.
        let mut omega = vec![0.0; n_nodes * nx];
        for (k, pair) in self.mesh.fractions().windows(2).enumerate() {
            let h = (pair[1] - pair[0]) * scale;
            let (a, m, b) = (2 * k, 2 * k + 1, 2 * k + 2);
            for j in 0..nx {
                let lh = eq_mult[self.hermite_row(k, j)];
                let ls = eq_mult[self.simpson_row(k, j)];
                omega[a * nx + j] += -h / 8.0 * lh - h / 6.0 * ls;
                omega[m * nx + j] += -4.0 * h / 6.0 * ls;
                omega[b * nx + j] += h / 8.0 * lh - h / 6.0 * ls;
            }
        }

        let mut at = 0;
        let mut hn = vec![0.0; d * d];
        let mut lgrad = vec![0.0; d];
        let mut jac = vec![0.0; nx * d];
        for i in 0..n_nodes {
            let t = self.node_time(z, i);
            let (x, u) = (self.state(z, i), self.input(z, i));
            let sigma_i = sigma * self.quad_frac[i] * scale;
            let om = &omega[i * nx..(i + 1) * nx];
            let lambdas: Vec<Vec<f64>> = {
                let mut per_set = vec![Vec::new(); self.ocp.constraint_sets().len()];
                for &(si, first_row) in &self.node_sets[i] {
                    let rows = self.ocp.constraint_sets()[si].rows();
                    per_set[si] = ineq_mult[first_row..first_row + rows].to_vec();
                }
                per_set
            };
            let lambda_refs: Vec<&[f64]> = lambdas.iter().map(|v| v.as_slice()).collect();
            self.ocp.node_hessian(x, u, t, &p, sigma_i, om, &lambda_refs, &mut hn)?;

            // Product-rule pieces for the free final time: gradients of the
            // h-scaled parts (defect and cost weights), divided by the scale.
            let mut gv = vec![0.0; d];
            if self.free_tf {
                self.ocp.dynamics_node_jacobian(x, u, t, &p, &mut jac)?;
                for j in 0..d {
                    gv[j] = (0..nx).map(|r| om[r] * jac[r * d + j]).sum::<f64>() / scale;
                }
                if sigma_i != 0.0 && self.ocp.has_running_cost() {
                    self.ocp.running_cost_node_gradient(x, u, t, &p, &mut lgrad)?;
                    for j in 0..d {
                        gv[j] += sigma_i * lgrad[j] / scale;
                    }
                }
            }
            let frac = self.node_fracs[i];
            for la in 0..d_local {
                for lb in la..d_local {
                    let a_is_t = la == nx + nu + np;
                    let b_is_t = lb == nx + nu + np;
                    let v = match (a_is_t, b_is_t) {
                        (false, false) => hn[la * d + lb],
                        (false, true) => frac * hn[la * d + (d - 1)] + gv[la],
                        (true, true) => {
                            frac * frac * hn[(d - 1) * d + (d - 1)] + 2.0 * frac * gv[d - 1]
                        }
                        (true, false) => unreachable!("upper triangle iteration"),
                    };
                    vals[at] = v;
                    at += 1;
                }
            }
        }

        // Terminal block, [xf, p, tf] with tf entering directly.
        let last = n_nodes - 1;
        let dt = nx + np + 1;
        let mut ht = vec![0.0; dt * dt];
        self.ocp.terminal_cost_hessian(self.state(z, last), tf, &p, sigma, &mut ht)?;
        let t_len = nx + np + usize::from(self.free_tf);
        for a in 0..t_len {
            for b in a..t_len {
                vals[at] = ht[a * dt + b];
                at += 1;
            }
        }

        // Boundary block, [x0, xf, p, tf].
        let rows = self.ocp.boundary_rows();
        if rows > 0 {
            let db = 2 * nx + np + 1;
            let mut hb = vec![0.0; db * db];
            let mults = &eq_mult[self.boundary_row(0)..self.boundary_row(0) + rows];
            self.ocp.boundary_hessian(self.state(z, 0), self.state(z, last), tf, &p, mults, &mut hb)?;
            let b_len = 2 * nx + np + usize::from(self.free_tf);
            for a in 0..b_len {
                for b in a..b_len {
                    vals[at] = hb[a * db + b];
                    at += 1;
                }
            }
        }
        debug_assert_eq!(at, vals.len());
        Ok(())
    }
}
