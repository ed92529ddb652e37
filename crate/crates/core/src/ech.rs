//! Mesh-refinement loop with external handling of path constraints.
//!
//! Each pass transcribes the problem on the current mesh under the current
//! activation filter, solves it, scores the interpolated trajectory against
//! the continuous problem, and stops once defect and violation measures are
//! within tolerance. Otherwise the mesh is refined, every constraint set is
//! classified as potentially active or redundant, and the next transcription
//! only implements buffered time windows around the active regions. Dropped
//! or trimmed constraints are watched through raw samples on a dense grid;
//! when one comes back to life outside its implemented windows, a feasibility
//! restoration pass repairs the warm start before the next solve.

use crate::activity::{buffered_filter, classify, ActivityConfig, ActivityReport, SetStatus};
use crate::error::Error;
use crate::interp::{error_analysis, refine, resample, Tolerances, Trajectory};
use crate::mesh::Mesh;
use crate::nlp::{
    least_squares_multipliers, solve, NlpProblem, NlpSolution, SolveStatus, SolverOptions,
    WarmStart,
};
use crate::ocp::Ocp;
use crate::transcribe::{ActivationFilter, DiscretizedNlp, SetFilter};
use std::collections::HashMap;
use std::time::{Duration, Instant};

/// Starting point for the first solve: parameter values plus state and input
/// profiles sampled at the node times of the initial mesh.
pub struct InitialGuess {
    pub params: Vec<f64>,
    pub state: Box<dyn Fn(f64) -> Vec<f64> + Send + Sync>,
    pub input: Box<dyn Fn(f64) -> Vec<f64> + Send + Sync>,
}

impl InitialGuess {
    pub fn new(
        params: Vec<f64>,
        state: impl Fn(f64) -> Vec<f64> + Send + Sync + 'static,
        input: impl Fn(f64) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { params, state: Box::new(state), input: Box::new(input) }
    }

    /// Holds the given state and input constant over the horizon.
    pub fn constant(params: Vec<f64>, x: Vec<f64>, u: Vec<f64>) -> Self {
        Self::new(params, move |_| x.clone(), move |_| u.clone())
    }
}

/// When to repair a warm start with the feasibility subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfpPolicy {
    /// Audit every warm start against the constraints the next solve will
    /// implement and repair any violation above the audit tolerance, in
    /// addition to the structural triggers. Guarantees every solve starts
    /// from a feasible point, at the price of extra subproblem solves.
    Strict,
    /// Repair only on structural triggers: a dropped set showing activity, or
    /// activity escaping its implemented windows. The default; the solver
    /// tolerates the small bound-clipping noise of a resampled warm start.
    Practical,
}

/// How the window buffer evolves across rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferMode {
    /// Same width every round.
    Fixed,
    /// Doubles the width after every round whose activity forced a repair,
    /// so repeated reactivation eventually widens the windows into full
    /// activation and the loop degenerates to the conventional one.
    Adaptive,
}

/// What the activity comparison found while preparing a solve.
#[derive(Debug, Clone, PartialEq)]
pub enum Reactivation {
    /// Activity stayed inside the regions seen on the previous pass.
    NoChange,
    /// Activity grew, but the buffered windows of the previous solve already
    /// covered the growth.
    WithinBuffer,
    /// The warm start needed feasibility restoration, for the listed reasons.
    AfpRequired(Vec<String>),
}

/// Knobs for the refinement loop. Defaults are tight enough that multipliers
/// of inactive constraints settle near the barrier floor, which the activity
/// classifier depends on.
#[derive(Debug, Clone)]
pub struct EchConfig {
    /// Defect integral each interval must reach.
    pub eta_tol: f64,
    /// Worst admissible raw constraint value between nodes.
    pub eps_tol: f64,
    /// Mean normalized multiplier level above which a segment counts active.
    pub zeta: f64,
    /// Changepoint penalty for the multiplier segmentation.
    pub segmentation_penalty: f64,
    /// Window widening in time units; `None` picks a tenth of the horizon.
    pub beta: Option<f64>,
    pub buffer_mode: BufferMode,
    pub afp_policy: AfpPolicy,
    /// Dense sub-samples per mesh interval for the scoring grid.
    pub samples_per_interval: usize,
    /// Cap on transcription rounds, each containing one NLP solve.
    pub max_iterations: usize,
    /// Largest slack-objective value at which the feasibility subproblem
    /// still counts as a successful repair.
    pub feasibility_tolerance: f64,
    /// Warm-start violation that triggers repair under [`AfpPolicy::Strict`].
    pub audit_tolerance: f64,
    pub solver: SolverOptions,
}

impl Default for EchConfig {
    fn default() -> Self {
        Self {
            eta_tol: 1e-5,
            eps_tol: 1e-4,
            zeta: 0.1,
            segmentation_penalty: 0.5,
            beta: None,
            buffer_mode: BufferMode::Fixed,
            afp_policy: AfpPolicy::Practical,
            samples_per_interval: 10,
            max_iterations: 8,
            feasibility_tolerance: 1e-6,
            audit_tolerance: 1e-10,
            solver: SolverOptions { tol_kkt: 1e-9, tol_primal: 1e-9, ..SolverOptions::default() },
        }
    }
}

/// One transcription round: how its solve was prepared, what it produced,
/// and how the result was scored.
#[derive(Debug, Clone)]
pub struct EchIteration {
    pub intervals: usize,
    /// Filter the solve implemented, parallel to the model's constraint sets.
    pub filter: Vec<SetFilter>,
    /// Buffer width used to build that filter; `None` on the first round,
    /// which always implements everything.
    pub buffer: Option<f64>,
    /// Worst implemented constraint value of the warm start actually fed to
    /// the solver, after any repair.
    pub warm_start_violation: f64,
    pub afp_invoked: bool,
    pub afp_reasons: Vec<String>,
    pub reactivation: Reactivation,
    pub objective: f64,
    pub nlp_iterations: usize,
    pub solve_time: Duration,
    pub max_eta: f64,
    pub max_violation: f64,
    /// Classification computed from this round's solution.
    pub activity: Vec<SetStatus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Defect and violation measures met their tolerances.
    Converged,
    /// The round cap was reached first; the last solution is still returned.
    IterationLimit,
}

/// Final state of the loop. `solution` and `trajectory` belong to the last
/// round; `warm_start` is the start that round was solved from, so a solve of
/// `(mesh, filter)` from it reproduces `solution`.
pub struct EchOutcome {
    pub iterations: Vec<EchIteration>,
    pub stop: StopReason,
    pub mesh: Mesh,
    pub filter: ActivationFilter,
    pub solution: NlpSolution,
    pub trajectory: Trajectory,
    pub warm_start: WarmStart,
    pub wall_time: Duration,
}

impl EchOutcome {
    /// Rounds whose warm start went through feasibility restoration.
    pub fn afp_invocations(&self) -> usize {
        self.iterations.iter().filter(|it| it.afp_invoked).count()
    }
}

/// Runs the loop with constraint filtering.
pub fn run(
    ocp: &Ocp,
    mesh: &Mesh,
    guess: &InitialGuess,
    cfg: &EchConfig,
) -> Result<EchOutcome, Error> {
    run_pipeline(ocp, mesh, guess, cfg, true)
}

/// Runs the loop with every constraint implemented at every node, as a
/// conventional mesh-refinement baseline. All other steps are shared with
/// [`run`], so the two produce identical rounds whenever the buffered filter
/// degenerates to full activation.
pub fn run_standard(
    ocp: &Ocp,
    mesh: &Mesh,
    guess: &InitialGuess,
    cfg: &EchConfig,
) -> Result<EchOutcome, Error> {
    run_pipeline(ocp, mesh, guess, cfg, false)
}

fn validate(cfg: &EchConfig) -> Result<(), Error> {
    let tols = [
        ("eta_tol", cfg.eta_tol),
        ("eps_tol", cfg.eps_tol),
        ("zeta", cfg.zeta),
        ("segmentation_penalty", cfg.segmentation_penalty),
        ("feasibility_tolerance", cfg.feasibility_tolerance),
        ("audit_tolerance", cfg.audit_tolerance),
    ];
    for (name, v) in tols {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::ModelInvalid {
                reason: format!("{name} must be positive and finite, got {v}"),
            });
        }
    }
    if let Some(beta) = cfg.beta {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::ModelInvalid {
                reason: format!("beta must be positive and finite, got {beta}"),
            });
        }
    }
    if cfg.max_iterations == 0 {
        return Err(Error::ModelInvalid { reason: "max_iterations must be at least 1".into() });
    }
    if cfg.samples_per_interval == 0 {
        return Err(Error::ModelInvalid {
            reason: "samples_per_interval must be at least 1".into(),
        });
    }
    Ok(())
}

fn run_pipeline(
    ocp: &Ocp,
    mesh0: &Mesh,
    guess: &InitialGuess,
    cfg: &EchConfig,
    filtered: bool,
) -> Result<EchOutcome, Error> {
    validate(cfg)?;
    let start = Instant::now();
    let tol = Tolerances { eta_tol: cfg.eta_tol, eps_tol: cfg.eps_tol };
    let acfg = ActivityConfig {
        eps_tol: cfg.eps_tol,
        zeta: cfg.zeta,
        segmentation_penalty: cfg.segmentation_penalty,
    };

    let mut mesh = mesh0.clone();
    let mut filter = ActivationFilter::all(ocp);
    let mut nlp = DiscretizedNlp::new(ocp, &mesh, &filter)?;

    let mut z = nlp.pack_profiles(&guess.params, |t| (guess.state)(t), |t| (guess.input)(t));
    clamp_to_bounds(&nlp, &mut z);
    let mut reasons = Vec::new();
    if cfg.afp_policy == AfpPolicy::Strict {
        let v = warm_start_violation(&nlp, &z)?;
        if v > cfg.audit_tolerance {
            reasons.push(format!("initial guess violates constraints by {v:.3e}"));
        }
    }
    if !reasons.is_empty() {
        z = run_afp(&nlp, &z, cfg)?;
    }
    let mut pending_wsv = warm_start_violation(&nlp, &z)?;
    let mut pending_afp = !reasons.is_empty();
    let mut pending_reactivation = if pending_afp {
        Reactivation::AfpRequired(reasons.clone())
    } else {
        Reactivation::NoChange
    };
    let mut pending_reasons = reasons;
    let mut pending_buffer: Option<f64> = None;
    let mut warm = WarmStart { z, eq_multipliers: None, ineq_multipliers: None };

    let mut iterations: Vec<EchIteration> = Vec::new();
    let mut prev_activity: Option<ActivityReport> = None;
    let mut beta_state: Option<f64> = None;

    loop {
        let sol = solve(&nlp, &warm, &cfg.solver)?;
        if sol.status != SolveStatus::Optimal {
            eprintln!(
                "DBG round {} K={} rows={} wsv={:.3e} warm_duals={}",
                iterations.len() + 1,
                mesh.intervals(),
                nlp.num_ineq(),
                pending_wsv,
                warm.ineq_multipliers.is_some(),
            );
            for line in sol.iteration_log.iter().take(80) {
                eprintln!("DBG {line}");
            }
            return Err(Error::SolveFailed {
                iteration: iterations.len() + 1,
                detail: format!("{:?} after {} iterations", sol.status, sol.iterations),
            });
        }
        let traj = Trajectory::from_solution(&nlp, &sol.z);
        let report = error_analysis(ocp, &traj, cfg.samples_per_interval)?;
        let activity = classify(&nlp, &traj, &sol.ineq_multipliers, &report, &acfg);

        iterations.push(EchIteration {
            intervals: mesh.intervals(),
            filter: snapshot(&filter, ocp),
            buffer: pending_buffer,
            warm_start_violation: pending_wsv,
            afp_invoked: pending_afp,
            afp_reasons: std::mem::take(&mut pending_reasons),
            reactivation: std::mem::replace(&mut pending_reactivation, Reactivation::NoChange),
            objective: sol.objective,
            nlp_iterations: sol.iterations,
            solve_time: sol.wall_time,
            max_eta: report.max_eta,
            max_violation: report.max_violation,
            activity: activity.status.clone(),
        });

        if report.within(&tol) {
            return Ok(EchOutcome {
                iterations,
                stop: StopReason::Converged,
                mesh,
                filter,
                solution: sol,
                trajectory: traj,
                warm_start: warm,
                wall_time: start.elapsed(),
            });
        }
        if iterations.len() >= cfg.max_iterations {
            return Ok(EchOutcome {
                iterations,
                stop: StopReason::IterationLimit,
                mesh,
                filter,
                solution: sol,
                trajectory: traj,
                warm_start: warm,
                wall_time: start.elapsed(),
            });
        }

        let next_mesh = refine(&mesh, &report, &tol)?
            .expect("the report exceeds tolerance, so refinement must split");
        let horizon = traj.tf() - traj.t0();

        let (mut reasons, grew) =
            structural_reactivation(ocp, &activity, &filter, prev_activity.as_ref(), horizon);

        let slot = beta_state.get_or_insert_with(|| cfg.beta.unwrap_or(0.1 * horizon));
        *slot = updated_buffer(cfg, *slot, !reasons.is_empty());
        let beta = *slot;
        let next_filter = if filtered {
            buffered_filter(ocp, &activity, beta, traj.t0(), traj.tf())
        } else {
            ActivationFilter::all(ocp)
        };

        let next_nlp = DiscretizedNlp::new(ocp, &next_mesh, &next_filter)?;
        let mut z_next = resample(&next_nlp, &traj);
        if cfg.afp_policy == AfpPolicy::Strict {
            let v = warm_start_violation(&next_nlp, &z_next)?;
            if v > cfg.audit_tolerance {
                reasons.push(format!(
                    "resampled warm start violates implemented constraints by {v:.3e}"
                ));
            }
        }
        let afp = !reasons.is_empty();
        if afp {
            z_next = run_afp(&next_nlp, &z_next, cfg)?;
        }

        pending_wsv = warm_start_violation(&next_nlp, &z_next)?;
        pending_afp = afp;
        pending_reactivation = if afp {
            Reactivation::AfpRequired(reasons.clone())
        } else if grew {
            Reactivation::WithinBuffer
        } else {
            Reactivation::NoChange
        };
        pending_reasons = if afp { reasons } else { Vec::new() };
        pending_buffer = Some(beta);

        warm = compose_warm_start(&nlp, &sol, &traj, &next_nlp, z_next)?;
        prev_activity = Some(activity);
        mesh = next_mesh;
        filter = next_filter;
        nlp = next_nlp;
    }
}

fn snapshot(filter: &ActivationFilter, ocp: &Ocp) -> Vec<SetFilter> {
    (0..ocp.constraint_sets().len()).map(|s| filter.get(s).clone()).collect()
}

/// Buffer width for the next round. `reactivated` means the round's activity
/// forced a structural repair.
fn updated_buffer(cfg: &EchConfig, beta: f64, reactivated: bool) -> f64 {
    if cfg.buffer_mode == BufferMode::Adaptive && reactivated {
        beta * 2.0
    } else {
        beta
    }
}

fn clamp_to_bounds(nlp: &dyn NlpProblem, z: &mut [f64]) {
    let (lo, hi) = nlp.bounds();
    for i in 0..z.len() {
        z[i] = z[i].clamp(lo[i], hi[i]);
    }
}

/// Worst implemented constraint value at `z`, zero when all are satisfied.
pub fn warm_start_violation(nlp: &DiscretizedNlp, z: &[f64]) -> Result<f64, Error> {
    let mut g = vec![0.0; nlp.num_ineq()];
    nlp.ineq_constraints(z, &mut g)?;
    Ok(g.iter().fold(0.0f64, |acc, &v| acc.max(v)))
}

/// Compares fresh activity against the filter the last solve implemented and
/// against the previous classification. Returns repair reasons plus whether
/// activity grew at all.
fn structural_reactivation(
    ocp: &Ocp,
    activity: &ActivityReport,
    enforced: &ActivationFilter,
    prev: Option<&ActivityReport>,
    horizon: f64,
) -> (Vec<String>, bool) {
    let slop = 1e-9 * (1.0 + horizon.abs());
    let mut reasons = Vec::new();
    let mut grew = false;
    for (si, cs) in ocp.constraint_sets().iter().enumerate() {
        let ivs = match &activity.status[si] {
            SetStatus::PotentiallyActive(ivs) => ivs,
            SetStatus::PotentiallyRedundant => continue,
        };
        match enforced.get(si) {
            SetFilter::All => {}
            SetFilter::None => {
                reasons.push(format!("set `{}` was dropped but now shows activity", cs.name()));
            }
            SetFilter::Windows(ws) => {
                for iv in ivs {
                    if !covered(*iv, ws, slop) {
                        reasons.push(format!(
                            "set `{}` activity [{:.6}, {:.6}] escapes the enforced windows",
                            cs.name(),
                            iv[0],
                            iv[1]
                        ));
                    }
                }
            }
        }
        if let Some(prev) = prev {
            match &prev.status[si] {
                SetStatus::PotentiallyRedundant => grew = true,
                SetStatus::PotentiallyActive(prev_ivs) => {
                    if ivs.iter().any(|iv| !covered(*iv, prev_ivs, slop)) {
                        grew = true;
                    }
                }
            }
        }
    }
    (reasons, grew)
}

fn covered(iv: [f64; 2], windows: &[[f64; 2]], slop: f64) -> bool {
    windows.iter().any(|w| w[0] - slop <= iv[0] && iv[1] <= w[1] + slop)
}

/// Minimum-slack feasibility subproblem over the full constraint set of the
/// target's mesh. Variables are the transcription's own plus one slack per
/// scalar constraint function, shared across all nodes where that function is
/// implemented; dynamics defects and boundary rows stay as equalities, so a
/// restored point is dynamically consistent. The slack count is therefore
/// independent of the mesh, and the objective `sum s_l` measures how far each
/// constraint function must be relaxed over the whole horizon.
struct AfpProblem {
    base: DiscretizedNlp,
    n_base: usize,
    n_slack: usize,
    base_ineq_nnz: usize,
    /// Flat constraint-function index for each discretized inequality row.
    row_function: Vec<usize>,
}

impl AfpProblem {
    fn new(base: DiscretizedNlp) -> Self {
        let n_base = base.num_vars();
        let base_ineq_nnz = base.ineq_jacobian_pattern().len();
        let (row_function, n_slack) = function_indices(&base);
        Self { base, n_base, n_slack, base_ineq_nnz, row_function }
    }
}

/// Maps every inequality row to the flat index of its constraint function
/// (set offset plus row within the set) and returns the function count.
fn function_indices(nlp: &DiscretizedNlp) -> (Vec<usize>, usize) {
    let sets = nlp.ocp().constraint_sets();
    let mut offsets = Vec::with_capacity(sets.len());
    let mut total = 0usize;
    for cs in sets {
        offsets.push(total);
        total += cs.rows();
    }
    let map = nlp
        .row_infos()
        .iter()
        .map(|info| offsets[info.set] + info.row_in_set)
        .collect();
    (map, total)
}

impl NlpProblem for AfpProblem {
    fn num_vars(&self) -> usize {
        self.n_base + self.n_slack
    }
    fn num_eq(&self) -> usize {
        self.base.num_eq()
    }
    fn num_ineq(&self) -> usize {
        self.base.num_ineq()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut lo, mut hi) = self.base.bounds();
        lo.extend(std::iter::repeat(0.0).take(self.n_slack));
        hi.extend(std::iter::repeat(f64::INFINITY).take(self.n_slack));
        (lo, hi)
    }

    fn objective(&self, z: &[f64]) -> Result<f64, Error> {
        Ok(z[self.n_base..].iter().sum())
    }

    fn gradient(&self, z: &[f64], grad: &mut [f64]) -> Result<(), Error> {
        let _ = z;
        grad[..self.n_base].fill(0.0);
        grad[self.n_base..].fill(1.0);
        Ok(())
    }

    fn eq_constraints(&self, z: &[f64], out: &mut [f64]) -> Result<(), Error> {
        self.base.eq_constraints(&z[..self.n_base], out)
    }

    fn ineq_constraints(&self, z: &[f64], out: &mut [f64]) -> Result<(), Error> {
        self.base.ineq_constraints(&z[..self.n_base], out)?;
        for (r, &l) in self.row_function.iter().enumerate() {
            out[r] -= z[self.n_base + l];
        }
        Ok(())
    }

    fn eq_jacobian_pattern(&self) -> Vec<(usize, usize)> {
        self.base.eq_jacobian_pattern()
    }

    fn eq_jacobian_values(&self, z: &[f64], vals: &mut [f64]) -> Result<(), Error> {
        self.base.eq_jacobian_values(&z[..self.n_base], vals)
    }

    fn ineq_jacobian_pattern(&self) -> Vec<(usize, usize)> {
        let mut pat = self.base.ineq_jacobian_pattern();
        pat.extend(self.row_function.iter().enumerate().map(|(r, &l)| (r, self.n_base + l)));
        pat
    }

    fn ineq_jacobian_values(&self, z: &[f64], vals: &mut [f64]) -> Result<(), Error> {
        self.base.ineq_jacobian_values(&z[..self.n_base], &mut vals[..self.base_ineq_nnz])?;
        vals[self.base_ineq_nnz..].fill(-1.0);
        Ok(())
    }

    fn hessian_pattern(&self) -> Vec<(usize, usize)> {
        self.base.hessian_pattern()
    }

    fn hessian_values(
        &self,
        z: &[f64],
        _sigma: f64,
        eq_mult: &[f64],
        ineq_mult: &[f64],
        vals: &mut [f64],
    ) -> Result<(), Error> {
        // The objective is linear, so only constraint curvature remains.
        self.base.hessian_values(&z[..self.n_base], 0.0, eq_mult, ineq_mult, vals)
    }
}

/// Everything a feasibility repair produced, plus the state it started from.
pub struct FeasibilityRepair {
    /// Repaired transcription variables on the target's mesh.
    pub z: Vec<f64>,
    /// Slack sum at the subproblem optimum.
    pub objective: f64,
    /// Optimal slack per constraint function.
    pub slacks: Vec<f64>,
    /// Starting slack level per constraint function. Strictly above every
    /// row of that function at the starting point.
    pub initial_slack: Vec<f64>,
    /// Constraint value of every implemented row at the starting point.
    pub initial_rows: Vec<f64>,
    /// Constraint-function index of each implemented row.
    pub row_function: Vec<usize>,
    pub iterations: usize,
    pub wall_time: Duration,
}

/// Repairs `z` into a point feasible for the full constraint set on the
/// target's mesh, lifting each constraint function by one shared slack and
/// minimizing the slack sum subject to the dynamics and boundary rows. Every
/// set is implemented at every node regardless of the filter `target` was
/// built with. Succeeds when the optimal slack sum is at most the feasibility
/// tolerance; a converged subproblem with a larger sum means the constraints
/// admit no trajectory on this mesh.
pub fn solve_afp(
    target: &DiscretizedNlp,
    z: &[f64],
    cfg: &EchConfig,
) -> Result<FeasibilityRepair, Error> {
    let full =
        DiscretizedNlp::new(target.ocp(), target.mesh(), &ActivationFilter::all(target.ocp()))?;
    let n_base = full.num_vars();
    let n_rows = full.num_ineq();

    let mut z0 = z.to_vec();
    clamp_to_bounds(&full, &mut z0);
    if n_rows == 0 {
        return Ok(FeasibilityRepair {
            z: z0,
            objective: 0.0,
            slacks: vec![],
            initial_slack: vec![],
            initial_rows: vec![],
            row_function: vec![],
            iterations: 0,
            wall_time: Duration::ZERO,
        });
    }

    let mut g = vec![0.0; n_rows];
    full.ineq_constraints(&z0, &mut g)?;
    let (row_function, n_fun) = function_indices(&full);
    let mut level = vec![0.0f64; n_fun];
    for (r, &l) in row_function.iter().enumerate() {
        level[l] = level[l].max(g[r].max(0.0));
    }
    // Padding above the worst row of each function keeps every lifted
    // residual negative, so the barrier starts from strict interior
    // feasibility even when the start already satisfies everything.
    for s in &mut level {
        *s += cfg.solver.slack_min * (1.0 + *s);
    }
    for (r, &l) in row_function.iter().enumerate() {
        assert!(
            g[r] < level[l],
            "repair must start strictly interior, row {r}: {} vs slack {}",
            g[r],
            level[l],
        );
    }

    let mut z_start = z0;
    z_start.extend_from_slice(&level);
    let afp = AfpProblem::new(full);
    let warm = WarmStart { z: z_start, eq_multipliers: None, ineq_multipliers: None };
    let opts = SolverOptions {
        tol_kkt: 1e-9,
        tol_primal: 1e-10,
        log_iterations: false,
        ..cfg.solver.clone()
    };
    let sol = solve(&afp, &warm, &opts)?;
    match sol.status {
        SolveStatus::Optimal if sol.objective <= cfg.feasibility_tolerance => {
            Ok(FeasibilityRepair {
                z: sol.z[..n_base].to_vec(),
                objective: sol.objective,
                slacks: sol.z[n_base..].to_vec(),
                initial_slack: level,
                initial_rows: g,
                row_function,
                iterations: sol.iterations,
                wall_time: sol.wall_time,
            })
        }
        SolveStatus::Optimal => Err(Error::Infeasible {
            objective: sol.objective,
            tolerance: cfg.feasibility_tolerance,
        }),
        other => Err(Error::FeasibilityUndecided { detail: format!("{other:?}") }),
    }
}

fn run_afp(target: &DiscretizedNlp, z: &[f64], cfg: &EchConfig) -> Result<Vec<f64>, Error> {
    Ok(solve_afp(target, z, cfg)?.z)
}

/// Builds the warm start for the next solve: least-squares multipliers as a
/// baseline, boundary-row multipliers carried over directly, and inequality
/// multipliers interpolated in time from the previous solution's per-row
/// profiles wherever the new node falls inside the old profile's span.
fn compose_warm_start(
    prev_nlp: &DiscretizedNlp,
    prev_sol: &NlpSolution,
    prev_traj: &Trajectory,
    next_nlp: &DiscretizedNlp,
    z: Vec<f64>,
) -> Result<WarmStart, Error> {
    let (mut eq_m, mut ineq_m) = least_squares_multipliers(next_nlp, &z)?;

    let nb = next_nlp.ocp().boundary_rows();
    let prev_neq = prev_sol.eq_multipliers.len();
    let next_neq = eq_m.len();
    for r in 0..nb {
        eq_m[next_neq - nb + r] = prev_sol.eq_multipliers[prev_neq - nb + r];
    }

    let mut profiles: HashMap<(usize, usize), Vec<(f64, f64)>> = HashMap::new();
    for (idx, info) in prev_nlp.row_infos().iter().enumerate() {
        profiles
            .entry((info.set, info.row_in_set))
            .or_default()
            .push((prev_traj.times()[info.node], prev_sol.ineq_multipliers[idx]));
    }
    for (idx, info) in next_nlp.row_infos().iter().enumerate() {
        let t = next_nlp.node_time(&z, info.node);
        if let Some(profile) = profiles.get(&(info.set, info.row_in_set)) {
            if let Some(v) = lerp_profile(profile, t) {
                ineq_m[idx] = v.max(0.0);
            }
        }
    }

    Ok(WarmStart { z, eq_multipliers: Some(eq_m), ineq_multipliers: Some(ineq_m) })
}

/// Linear interpolation over `(time, value)` pairs with strictly increasing
/// times. `None` outside the span, where no information exists.
fn lerp_profile(profile: &[(f64, f64)], t: f64) -> Option<f64> {
    if profile.len() < 2 || t < profile[0].0 || t > profile[profile.len() - 1].0 {
        return None;
    }
    let j = profile.partition_point(|&(ti, _)| ti <= t);
    if j >= profile.len() {
        return Some(profile[profile.len() - 1].1);
    }
    let (ta, va) = profile[j - 1];
    let (tb, vb) = profile[j];
    Some(va + (t - ta) / (tb - ta) * (vb - va))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::KktResiduals;
    use crate::ocp::{ConstraintSet, TfSpec};

    /// Double integrator with fixed endpoints on t in [0, 1], cost int u^2.
    fn double_integrator(b0: [f64; 2], bf: [f64; 2]) -> crate::ocp::OcpBuilder {
        Ocp::builder(2, 1, 0, 0.0, TfSpec::Fixed(1.0))
            .dynamics(|x, u, _t, _p, out| {
                out[0] = x[1];
                out[1] = u[0];
            })
            .dynamics_jacobian(|_x, _u, _t, _p, out| {
                out.fill(0.0);
                out[1] = 1.0;
                out[4 + 2] = 1.0;
            })
            .dynamics_hessian(|_x, _u, _t, _p, _w, out| out.fill(0.0))
            .running_cost(|_x, u, _t, _p| u[0] * u[0])
            .running_cost_gradient(|_x, u, _t, _p, out| {
                out.fill(0.0);
                out[2] = 2.0 * u[0];
            })
            .running_cost_hessian(|_x, _u, _t, _p, out| {
                out.fill(0.0);
                out[2 * 4 + 2] = 2.0;
            })
            .boundary(4, move |x0, xf, _tf, _p, out| {
                out[0] = x0[0] - b0[0];
                out[1] = x0[1] - b0[1];
                out[2] = xf[0] - bf[0];
                out[3] = xf[1] - bf[1];
            })
    }

    /// Ceiling x0 <= level as a one-row set with analytic derivatives.
    fn ceiling(level: f64, node_dim: usize) -> ConstraintSet {
        ConstraintSet::new("ceiling", 1, move |x, _u, _t, _p, out| out[0] = x[0] - level)
            .with_jacobian(move |_x, _u, _t, _p, out| {
                out.fill(0.0);
                out[0] = 1.0;
            })
            .with_hessian(move |_x, _u, _t, _p, _w, out| {
                let _ = node_dim;
                out.fill(0.0);
            })
    }

    /// Scalar decay problem, min int u^2 with xdot = -3x + u, x(0) = 1,
    /// x(1) = 1/5. Stationarity gives u = c e^{3t} with
    /// c = 6 (e^3/5 - 1) / (e^6 - 1), so the optimal cost is
    /// J = c^2 (e^6 - 1) / 6. The optimum is a true exponential, so the
    /// first coarse mesh cannot meet the defect tolerance and at least one
    /// refinement round must happen.
    fn decay_problem(with_far_ceiling: bool) -> Ocp {
        let mut b = Ocp::builder(1, 1, 0, 0.0, TfSpec::Fixed(1.0))
            .dynamics(|x, u, _t, _p, out| out[0] = -3.0 * x[0] + u[0])
            .dynamics_jacobian(|_x, _u, _t, _p, out| {
                out.fill(0.0);
                out[0] = -3.0;
                out[1] = 1.0;
            })
            .dynamics_hessian(|_x, _u, _t, _p, _w, out| out.fill(0.0))
            .running_cost(|_x, u, _t, _p| u[0] * u[0])
            .running_cost_gradient(|_x, u, _t, _p, out| {
                out.fill(0.0);
                out[1] = 2.0 * u[0];
            })
            .running_cost_hessian(|_x, _u, _t, _p, out| {
                out.fill(0.0);
                out[1 * 3 + 1] = 2.0;
            })
            .boundary(2, |x0, xf, _tf, _p, out| {
                out[0] = x0[0] - 1.0;
                out[1] = xf[0] - 0.2;
            });
        if with_far_ceiling {
            b = b.constraint_set(
                ConstraintSet::new("far", 1, |x, _u, _t, _p, out| out[0] = x[0] - 50.0)
                    .with_jacobian(|_x, _u, _t, _p, out| {
                        out.fill(0.0);
                        out[0] = 1.0;
                    })
                    .with_hessian(|_x, _u, _t, _p, _w, out| out.fill(0.0)),
            );
        }
        b.build().unwrap()
    }

    fn decay_optimal_cost() -> f64 {
        let c = 6.0 * (0.2 * 3.0f64.exp() - 1.0) / (6.0f64.exp() - 1.0);
        c * c * (6.0f64.exp() - 1.0) / 6.0
    }

    #[test]
    fn pipeline_converges_in_one_round_on_cubic_problem() {
        let ocp = double_integrator([0.0, 0.0], [1.0, 0.0]).build().unwrap();
        let mesh = Mesh::uniform(4).unwrap();
        let guess = InitialGuess::constant(vec![], vec![0.0, 0.0], vec![0.0]);
        let out = run(&ocp, &mesh, &guess, &EchConfig::default()).unwrap();

        assert_eq!(out.stop, StopReason::Converged);
        assert_eq!(out.iterations.len(), 1);
        assert!((out.solution.objective - 12.0).abs() <= 1e-6);
        let it = &out.iterations[0];
        assert!(!it.afp_invoked);
        assert_eq!(it.reactivation, Reactivation::NoChange);
        assert_eq!(it.warm_start_violation, 0.0);
    }

    #[test]
    fn redundant_constraint_is_dropped_after_first_refinement() {
        let ocp = decay_problem(true);
        let mesh = Mesh::uniform(2).unwrap();
        let guess = InitialGuess::new(vec![], |t| vec![1.0 - 0.8 * t], |_t| vec![0.0]);
        let out = run(&ocp, &mesh, &guess, &EchConfig::default()).unwrap();

        assert_eq!(out.stop, StopReason::Converged);
        assert!(out.iterations.len() >= 2, "coarse mesh must refine at least once");
        assert_eq!(out.iterations[0].filter, vec![SetFilter::All]);
        assert_eq!(out.iterations[0].buffer, None);
        assert_eq!(out.iterations[0].activity, vec![SetStatus::PotentiallyRedundant]);
        for it in &out.iterations[1..] {
            assert_eq!(it.filter, vec![SetFilter::None]);
            assert_eq!(it.buffer, Some(0.1), "default buffer is a tenth of the horizon");
            assert!(!it.afp_invoked);
        }
        for it in &out.iterations {
            assert!(it.warm_start_violation <= 1e-6);
        }
        assert!((out.solution.objective - decay_optimal_cost()).abs() <= 1e-5);
    }

    #[test]
    fn active_state_constraint_narrows_to_buffered_windows() {
        // With v(0) = 3, v(1) = -3, and x pinned to 0 at both ends, the free
        // optimum is the parabola 3t(1-t) peaking at 0.75. Under the ceiling
        // x <= 0.4 the arc rides the boundary on [0.4, 0.6] and the cost is
        // 8 / (0.4 / 3) = 60.
        let ocp = double_integrator([0.0, 3.0], [0.0, -3.0])
            .constraint_set(ceiling(0.4, 4))
            .build()
            .unwrap();
        let mesh = Mesh::uniform(5).unwrap();
        let guess = InitialGuess::new(
            vec![],
            |t| vec![3.0 * t * (1.0 - t), 3.0 - 6.0 * t],
            |_t| vec![-6.0],
        );
        let cfg = EchConfig { afp_policy: AfpPolicy::Strict, ..EchConfig::default() };
        let out = run(&ocp, &mesh, &guess, &cfg).unwrap();

        assert_eq!(out.stop, StopReason::Converged);
        assert!(out.iterations[0].afp_invoked, "the guess violates the ceiling");
        assert!(out.afp_invocations() >= 1);
        assert!(out.iterations.len() >= 2);
        for it in &out.iterations {
            assert!(it.warm_start_violation <= 1e-6);
        }
        let last = out.iterations.last().unwrap();
        assert!(last.max_violation <= 1e-4);
        match &last.filter[0] {
            SetFilter::Windows(ws) => {
                assert_eq!(ws.len(), 1);
                assert!(ws[0][0] >= 0.2 && ws[0][0] <= 0.45, "window start {:?}", ws);
                assert!(ws[0][1] >= 0.55 && ws[0][1] <= 0.8, "window end {:?}", ws);
            }
            other => panic!("expected buffered windows, got {other:?}"),
        }
        assert!((out.solution.objective - 60.0).abs() <= 0.1);
    }

    #[test]
    fn horizon_wide_buffer_reproduces_standard_pipeline() {
        let ocp = decay_problem(true);
        let mesh = Mesh::uniform(2).unwrap();
        let guess = InitialGuess::new(vec![], |t| vec![1.0 - 0.8 * t], |_t| vec![0.0]);
        let cfg = EchConfig { beta: Some(5.0), ..EchConfig::default() };

        let filtered = run(&ocp, &mesh, &guess, &cfg).unwrap();
        let standard = run_standard(&ocp, &mesh, &guess, &cfg).unwrap();

        assert_eq!(filtered.stop, standard.stop);
        assert_eq!(filtered.iterations.len(), standard.iterations.len());
        for (a, b) in filtered.iterations.iter().zip(&standard.iterations) {
            assert_eq!(a.intervals, b.intervals);
            assert_eq!(a.filter, b.filter);
            assert_eq!(a.objective.to_bits(), b.objective.to_bits());
            assert_eq!(a.nlp_iterations, b.nlp_iterations);
            assert_eq!(a.max_eta.to_bits(), b.max_eta.to_bits());
            assert_eq!(a.max_violation.to_bits(), b.max_violation.to_bits());
            assert_eq!(a.warm_start_violation.to_bits(), b.warm_start_violation.to_bits());
            assert_eq!(a.activity, b.activity);
            assert_eq!(a.afp_invoked, b.afp_invoked);
        }
        assert_eq!(
            filtered.solution.objective.to_bits(),
            standard.solution.objective.to_bits()
        );
    }

    #[test]
    fn iteration_cap_returns_last_round() {
        let ocp = decay_problem(false);
        let mesh = Mesh::uniform(2).unwrap();
        let guess = InitialGuess::new(vec![], |t| vec![1.0 - 0.8 * t], |_t| vec![0.0]);
        let cfg = EchConfig { max_iterations: 1, ..EchConfig::default() };
        let out = run(&ocp, &mesh, &guess, &cfg).unwrap();

        assert_eq!(out.stop, StopReason::IterationLimit);
        assert_eq!(out.iterations.len(), 1);
        assert_eq!(out.mesh.intervals(), 2);
    }

    #[test]
    fn reactivation_reasons_and_growth() {
        let ocp = decay_problem(true);
        let active = ActivityReport {
            status: vec![SetStatus::PotentiallyActive(vec![[0.3, 0.5]])],
        };

        let mut dropped = ActivationFilter::all(&ocp);
        dropped.set(&ocp, "far", SetFilter::None).unwrap();
        let (reasons, _) = structural_reactivation(&ocp, &active, &dropped, None, 1.0);
        assert_eq!(reasons.len(), 1);
        assert!(reasons[0].contains("dropped"));

        let mut windowed = ActivationFilter::all(&ocp);
        windowed.set(&ocp, "far", SetFilter::Windows(vec![[0.35, 0.6]])).unwrap();
        let (reasons, _) = structural_reactivation(&ocp, &active, &windowed, None, 1.0);
        assert_eq!(reasons.len(), 1);
        assert!(reasons[0].contains("escapes"));

        let mut covering = ActivationFilter::all(&ocp);
        covering.set(&ocp, "far", SetFilter::Windows(vec![[0.2, 0.6]])).unwrap();
        let prev_small = ActivityReport {
            status: vec![SetStatus::PotentiallyActive(vec![[0.3, 0.45]])],
        };
        let (reasons, grew) =
            structural_reactivation(&ocp, &active, &covering, Some(&prev_small), 1.0);
        assert!(reasons.is_empty());
        assert!(grew, "activity extended past the previous classification");

        let prev_wide = ActivityReport {
            status: vec![SetStatus::PotentiallyActive(vec![[0.25, 0.55]])],
        };
        let (reasons, grew) =
            structural_reactivation(&ocp, &active, &covering, Some(&prev_wide), 1.0);
        assert!(reasons.is_empty());
        assert!(!grew);

        let prev_redundant = ActivityReport { status: vec![SetStatus::PotentiallyRedundant] };
        let (_, grew) =
            structural_reactivation(&ocp, &active, &covering, Some(&prev_redundant), 1.0);
        assert!(grew);

        let quiet = ActivityReport { status: vec![SetStatus::PotentiallyRedundant] };
        let (reasons, grew) = structural_reactivation(&ocp, &quiet, &dropped, None, 1.0);
        assert!(reasons.is_empty());
        assert!(!grew);
    }

    #[test]
    fn feasibility_repair_restores_dynamics_and_constraints() {
        let ocp = double_integrator([0.0, 3.0], [0.0, -3.0])
            .constraint_set(ceiling(0.4, 4))
            .build()
            .unwrap();
        let mesh = Mesh::uniform(4).unwrap();
        let filter = ActivationFilter::all(&ocp);
        let nlp = DiscretizedNlp::new(&ocp, &mesh, &filter).unwrap();

        // Constant state at 1.0 violates the ceiling everywhere and every
        // dynamics defect.
        let z = nlp.pack_profiles(&[], |_t| vec![1.0, 0.0], |_t| vec![0.0]);
        assert!(warm_start_violation(&nlp, &z).unwrap() > 0.5);

        let cfg = EchConfig::default();
        let repair = solve_afp(&nlp, &z, &cfg).unwrap();
        assert!(repair.objective <= cfg.feasibility_tolerance);
        assert_eq!(repair.slacks.len(), 1, "one slack per constraint function");
        assert_eq!(repair.initial_rows.len(), nlp.num_ineq());
        // The shared starting slack sits strictly above the worst row, which
        // is 0.6 at the constant-1.0 state.
        assert!((repair.initial_rows.iter().cloned().fold(f64::MIN, f64::max) - 0.6).abs() < 1e-12);
        assert!(repair.initial_slack[0] > 0.6);
        for (r, &l) in repair.row_function.iter().enumerate() {
            assert_eq!(l, 0);
            assert!(repair.initial_rows[r] < repair.initial_slack[l]);
        }
        assert!(warm_start_violation(&nlp, &repair.z).unwrap() <= cfg.feasibility_tolerance);
        let mut h = vec![0.0; nlp.num_eq()];
        nlp.eq_constraints(&repair.z, &mut h).unwrap();
        let worst = h.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
        assert!(worst <= 1e-8, "defects and boundary rows must hold, worst {worst:.3e}");
    }

    #[test]
    fn constant_violation_is_reported_infeasible() {
        let ocp = double_integrator([0.0, 0.0], [1.0, 0.0])
            .constraint_set(ConstraintSet::new("impossible", 1, |_x, _u, _t, _p, out| {
                out[0] = 0.5;
            }))
            .build()
            .unwrap();
        let mesh = Mesh::uniform(2).unwrap();
        let filter = ActivationFilter::all(&ocp);
        let nlp = DiscretizedNlp::new(&ocp, &mesh, &filter).unwrap();
        let z = nlp.pack_profiles(&[], |_t| vec![0.0, 0.0], |_t| vec![0.0]);

        match run_afp(&nlp, &z, &EchConfig::default()) {
            Err(Error::Infeasible { objective, .. }) => {
                assert!((objective - 0.5).abs() <= 1e-6);
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn afp_slacks_are_shared_per_constraint_function() {
        // Two functions in one set with different worst violations at the
        // start: x0 - 0.4 peaks at 0.6, x0 - 0.8 peaks at 0.2.
        let set = ConstraintSet::new("pair", 2, |x, _u, _t, _p, out| {
            out[0] = x[0] - 0.4;
            out[1] = x[0] - 0.8;
        })
        .with_jacobian(|_x, _u, _t, _p, out| {
            out.fill(0.0);
            out[0] = 1.0;
            out[4] = 1.0;
        })
        .with_hessian(|_x, _u, _t, _p, _w, out| out.fill(0.0));
        let ocp = double_integrator([0.0, 3.0], [0.0, -3.0]).constraint_set(set).build().unwrap();
        let mesh = Mesh::uniform(4).unwrap();
        let nlp = DiscretizedNlp::new(&ocp, &mesh, &ActivationFilter::all(&ocp)).unwrap();

        let z = nlp.pack_profiles(&[], |_t| vec![1.0, 0.0], |_t| vec![0.0]);
        let cfg = EchConfig::default();
        let repair = solve_afp(&nlp, &z, &cfg).unwrap();

        assert_eq!(repair.slacks.len(), 2);
        assert_eq!(repair.initial_slack.len(), 2);
        let pad = |worst: f64| worst + cfg.solver.slack_min * (1.0 + worst);
        assert!((repair.initial_slack[0] - pad(0.6)).abs() <= 1e-12);
        assert!((repair.initial_slack[1] - pad(0.2)).abs() <= 1e-12);
        for (r, &l) in repair.row_function.iter().enumerate() {
            assert_eq!(l, r % 2, "rows alternate between the two functions");
        }
        assert!(repair.objective <= cfg.feasibility_tolerance);
        assert!(warm_start_violation(&nlp, &repair.z).unwrap() <= cfg.feasibility_tolerance);
    }

    #[test]
    fn buffer_update_modes() {
        let fixed = EchConfig::default();
        assert_eq!(fixed.afp_policy, AfpPolicy::Practical);
        assert_eq!(updated_buffer(&fixed, 0.3, true), 0.3);
        assert_eq!(updated_buffer(&fixed, 0.3, false), 0.3);

        let adaptive = EchConfig { buffer_mode: BufferMode::Adaptive, ..EchConfig::default() };
        assert_eq!(updated_buffer(&adaptive, 0.3, true), 0.6);
        assert_eq!(updated_buffer(&adaptive, 0.3, false), 0.3);
    }

    #[test]
    fn bad_config_is_rejected_before_any_solve() {
        let ocp = decay_problem(false);
        let mesh = Mesh::uniform(2).unwrap();
        let guess = InitialGuess::new(vec![], |t| vec![1.0 - 0.8 * t], |_t| vec![0.0]);

        let cases = [
            EchConfig { eta_tol: 0.0, ..EchConfig::default() },
            EchConfig { eps_tol: -1.0, ..EchConfig::default() },
            EchConfig { beta: Some(f64::NAN), ..EchConfig::default() },
            EchConfig { max_iterations: 0, ..EchConfig::default() },
            EchConfig { samples_per_interval: 0, ..EchConfig::default() },
        ];
        for cfg in cases {
            match run(&ocp, &mesh, &guess, &cfg) {
                Err(Error::ModelInvalid { .. }) => {}
                Err(other) => panic!("expected config rejection, got {other:?}"),
                Ok(_) => panic!("expected config rejection, got a solution"),
            }
        }
    }

    #[test]
    fn warm_start_multipliers_interpolate_previous_profiles() {
        let ocp = double_integrator([0.0, 3.0], [0.0, -3.0])
            .constraint_set(ceiling(0.4, 4))
            .build()
            .unwrap();
        let filter = ActivationFilter::all(&ocp);
        let coarse = DiscretizedNlp::new(&ocp, &Mesh::uniform(2).unwrap(), &filter).unwrap();
        let fine = DiscretizedNlp::new(&ocp, &Mesh::uniform(4).unwrap(), &filter).unwrap();

        let z_prev = coarse.pack_profiles(&[], |t| vec![0.1 * t, 0.1], |_t| vec![0.0]);
        let traj_prev = Trajectory::from_solution(&coarse, &z_prev);
        // Inequality multipliers follow lambda(t) = t at the five coarse
        // nodes; boundary multipliers get distinctive values.
        let n_eq = coarse.num_eq();
        let mut eq_m: Vec<f64> = (0..n_eq).map(|i| i as f64).collect();
        eq_m[n_eq - 4..].copy_from_slice(&[101.0, 102.0, 103.0, 104.0]);
        let ineq_m: Vec<f64> =
            coarse.row_infos().iter().map(|info| traj_prev.times()[info.node]).collect();
        let prev_sol = NlpSolution {
            status: SolveStatus::Optimal,
            z: z_prev,
            objective: 0.0,
            eq_multipliers: eq_m,
            ineq_multipliers: ineq_m,
            slacks: vec![],
            lower_bound_multipliers: vec![],
            upper_bound_multipliers: vec![],
            residuals: KktResiduals {
                stationarity: 0.0,
                primal: 0.0,
                dual: 0.0,
                complementarity: 0.0,
            },
            iterations: 0,
            wall_time: Duration::ZERO,
            mu_history: vec![],
            iteration_log: vec![],
        };

        let z_next = resample(&fine, &traj_prev);
        let warm = compose_warm_start(&coarse, &prev_sol, &traj_prev, &fine, z_next).unwrap();

        let ineq = warm.ineq_multipliers.as_ref().unwrap();
        for (idx, info) in fine.row_infos().iter().enumerate() {
            let t = fine.node_time(&warm.z, info.node);
            assert!(
                (ineq[idx] - t).abs() <= 1e-12,
                "node at {t} got multiplier {}",
                ineq[idx]
            );
        }
        let eq = warm.eq_multipliers.as_ref().unwrap();
        let n = eq.len();
        assert_eq!(&eq[n - 4..], &[101.0, 102.0, 103.0, 104.0]);
    }
}
