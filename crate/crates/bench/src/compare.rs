//! Runs the pruning pipeline and the conventional baseline on one benchmark
//! instance and condenses both into a serializable report. The two pipelines
//! run sequentially on the same thread so their wall times are comparable.

use crate::problems::{BenchProblem, BenchProblemSpec};
use echopt::ech::{self, EchConfig, EchOutcome, InitialGuess, StopReason};
use echopt::interp::Trajectory;
use echopt::nlp::{solve, NlpProblem, SolveStatus};
use echopt::transcribe::{DiscretizedNlp, SetFilter};
use echopt::Error;
use serde::{Deserialize, Serialize};

/// Largest relative objective gap at which the two pipelines still count as
/// agreeing.
pub const OBJECTIVE_AGREEMENT_TOL: f64 = 1e-4;

/// Fresh solves of the final problem when timing re-computation; the
/// minimum is reported to suppress scheduler noise.
const RECOMPUTE_SOLVES: usize = 5;

/// Plot samples per collocation sub-interval.
const PLOT_SAMPLES_PER_INTERVAL: usize = 4;

/// Serializable snapshot of one set's node coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SetWindows {
    All,
    None,
    Windows(Vec<[f64; 2]>),
}

impl From<&SetFilter> for SetWindows {
    fn from(f: &SetFilter) -> Self {
        match f {
            SetFilter::All => SetWindows::All,
            SetFilter::None => SetWindows::None,
            SetFilter::Windows(w) => SetWindows::Windows(w.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopLabel {
    Converged,
    IterationLimit,
}

impl From<StopReason> for StopLabel {
    fn from(s: StopReason) -> Self {
        match s {
            StopReason::Converged => StopLabel::Converged,
            StopReason::IterationLimit => StopLabel::IterationLimit,
        }
    }
}

/// One refinement round as recorded in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Round number, starting at 1.
    pub index: usize,
    pub intervals: usize,
    pub nodes: usize,
    pub nlp_iterations: usize,
    pub solve_time_s: f64,
    pub objective: f64,
    pub max_eta: f64,
    pub max_violation: f64,
    pub warm_start_violation: f64,
    pub afp_invoked: bool,
    /// Buffer width behind this round's filter; absent on the opening round.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer: Option<f64>,
}

/// Coverage of one constraint set across all rounds, one entry per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetHistory {
    pub set: String,
    pub per_iteration: Vec<SetWindows>,
}

/// One point of the solved trajectory on the dense plotting grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub pos_north: f64,
    pub pos_east: f64,
    pub vel_north: f64,
    pub vel_east: f64,
    pub acc_north: f64,
    pub acc_east: f64,
}

/// Everything one pipeline produced on one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    /// "standard" or "ech".
    pub label: String,
    pub objective: f64,
    pub stop: StopLabel,
    pub total_time_s: f64,
    /// Minimum wall time of a fresh solve of the final problem from the
    /// final warm start, over several attempts.
    pub recompute_time_s: f64,
    pub afp_invocations: usize,
    /// Inequality rows of the final transcription.
    pub final_ineq_rows: usize,
    pub iterations: Vec<IterationRecord>,
    pub history: Vec<SetHistory>,
    pub trajectory: Vec<TrajectorySample>,
}

/// Full record of one benchmark invocation. `failure` collects pipeline
/// aborts and objective disagreement; a clean comparison leaves it empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub problem: BenchProblemSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard: Option<PipelineReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ech: Option<PipelineReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RunReport {
    /// Copy with every wall-time field zeroed. Two runs with the same config
    /// must agree on everything else.
    pub fn with_zeroed_times(&self) -> Self {
        let mut r = self.clone();
        for p in [&mut r.standard, &mut r.ech].into_iter().flatten() {
            p.total_time_s = 0.0;
            p.recompute_time_s = 0.0;
            for it in &mut p.iterations {
                it.solve_time_s = 0.0;
            }
        }
        r
    }
}

/// One pipeline's full outcome plus its condensed report.
pub struct PipelineRun {
    pub outcome: EchOutcome,
    pub report: PipelineReport,
}

/// Runs one pipeline end to end. `filtered` picks between the pruning loop
/// and the conventional all-rows baseline.
pub fn run_pipeline(
    prob: &BenchProblem,
    guess: &InitialGuess,
    cfg: &EchConfig,
    filtered: bool,
) -> Result<PipelineRun, Error> {
    let outcome = if filtered {
        ech::run(&prob.ocp, &prob.mesh, guess, cfg)?
    } else {
        ech::run_standard(&prob.ocp, &prob.mesh, guess, cfg)?
    };
    let recompute_time_s = recompute_time(prob, &outcome, cfg)?;
    let label = if filtered { "ech" } else { "standard" };
    let report = condense(label, prob, &outcome, recompute_time_s)?;
    Ok(PipelineRun { outcome, report })
}

/// Runs both pipelines on identical inputs and cross-checks their
/// objectives. Aborts of one pipeline leave the other's results in place.
pub fn run_comparison(prob: &BenchProblem, cfg: &EchConfig) -> RunReport {
    let guess = prob.initial_guess();
    let mut report = RunReport {
        problem: prob.spec.clone(),
        standard: None,
        ech: None,
        failure: None,
    };
    let mut failures = Vec::new();

    match run_pipeline(prob, &guess, cfg, false) {
        Ok(run) => report.standard = Some(run.report),
        Err(e) => failures.push(format!("standard pipeline: {e}")),
    }
    match run_pipeline(prob, &guess, cfg, true) {
        Ok(run) => report.ech = Some(run.report),
        Err(e) => failures.push(format!("filtered pipeline: {e}")),
    }

    if let (Some(s), Some(e)) = (&report.standard, &report.ech) {
        let gap = (e.objective - s.objective).abs() / s.objective.abs().max(f64::MIN_POSITIVE);
        if gap > OBJECTIVE_AGREEMENT_TOL {
            failures.push(format!(
                "objectives disagree: relative gap {gap:.3e} exceeds {OBJECTIVE_AGREEMENT_TOL:.1e}"
            ));
        }
    }

    if !failures.is_empty() {
        report.failure = Some(failures.join("; "));
    }
    report
}

/// Times a fresh solve of the final-round problem (final mesh and filter)
/// from the warm start that round was solved from.
fn recompute_time(
    prob: &BenchProblem,
    outcome: &EchOutcome,
    cfg: &EchConfig,
) -> Result<f64, Error> {
    let nlp = DiscretizedNlp::new(&prob.ocp, &outcome.mesh, &outcome.filter)?;
    let mut best = f64::INFINITY;
    for _ in 0..RECOMPUTE_SOLVES {
        let sol = solve(&nlp, &outcome.warm_start, &cfg.solver)?;
        if sol.status != SolveStatus::Optimal {
            return Err(Error::SolveFailed {
                iteration: sol.iterations,
                detail: format!("re-computation ended {:?}", sol.status),
            });
        }
        best = best.min(sol.wall_time.as_secs_f64());
    }
    Ok(best)
}

fn condense(
    label: &str,
    prob: &BenchProblem,
    out: &EchOutcome,
    recompute_time_s: f64,
) -> Result<PipelineReport, Error> {
    let final_nlp = DiscretizedNlp::new(&prob.ocp, &out.mesh, &out.filter)?;
    let history = prob
        .ocp
        .constraint_sets()
        .iter()
        .enumerate()
        .map(|(si, set)| SetHistory {
            set: set.name().to_string(),
            per_iteration: out.iterations.iter().map(|it| (&it.filter[si]).into()).collect(),
        })
        .collect();
    let iterations = out
        .iterations
        .iter()
        .enumerate()
        .map(|(i, it)| IterationRecord {
            index: i + 1,
            intervals: it.intervals,
            nodes: 2 * it.intervals + 1,
            nlp_iterations: it.nlp_iterations,
            solve_time_s: it.solve_time.as_secs_f64(),
            objective: it.objective,
            max_eta: it.max_eta,
            max_violation: it.max_violation,
            warm_start_violation: it.warm_start_violation,
            afp_invoked: it.afp_invoked,
            buffer: it.buffer,
        })
        .collect();
    Ok(PipelineReport {
        label: label.to_string(),
        objective: out.solution.objective,
        stop: out.stop.into(),
        total_time_s: out.wall_time.as_secs_f64(),
        recompute_time_s,
        afp_invocations: out.afp_invocations(),
        final_ineq_rows: final_nlp.num_ineq(),
        iterations,
        history,
        trajectory: sample_trajectory(&out.trajectory),
    })
}

/// Dense plotting grid over the solved trajectory: every node time plus
/// evenly spaced points between consecutive nodes.
fn sample_trajectory(traj: &Trajectory) -> Vec<TrajectorySample> {
    let times = traj.times();
    let mut x = vec![0.0; 4];
    let mut u = vec![0.0; 2];
    let grab = |t: f64, x: &mut Vec<f64>, u: &mut Vec<f64>| {
        traj.state_at(t, x);
        traj.input_at(t, u);
        TrajectorySample {
            t,
            pos_north: x[0],
            pos_east: x[1],
            vel_north: x[2],
            vel_east: x[3],
            acc_north: u[0],
            acc_east: u[1],
        }
    };
    let mut samples = Vec::new();
    for w in times.windows(2) {
        for k in 0..PLOT_SAMPLES_PER_INTERVAL {
            let t = w[0] + (w[1] - w[0]) * k as f64 / PLOT_SAMPLES_PER_INTERVAL as f64;
            samples.push(grab(t, &mut x, &mut u));
        }
    }
    if let Some(&tf) = times.last() {
        samples.push(grab(tf, &mut x, &mut u));
    }
    samples
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> EchConfig {
        EchConfig { max_iterations: 3, ..EchConfig::default() }
    }

    #[test]
    fn no_nfz_matches_analytic_minimum_effort_cost() {
        // With nothing to avoid, the optimum is a straight transit with
        // linear acceleration taper: a(t) = a0 (1 - t/T) reaching distance L
        // with zero start velocity and free end velocity. Stationarity of
        // J = integral a^2 under those boundary conditions gives
        // a0 = 3 L / T^2 and J = 3 L^2 / T^3.
        let prob = BenchProblemSpec::no_nfz().build().unwrap();
        let cfg = quick_cfg();
        let run = run_pipeline(&prob, &prob.initial_guess(), &cfg, true).unwrap();
        let horizon = prob.spec.tf - prob.spec.t0;
        let dist = prob.spec.goal[0] - prob.spec.start[0];
        let analytic = 3.0 * dist * dist / horizon.powi(3);
        let gap = (run.report.objective - analytic).abs() / analytic;
        assert!(gap < 1e-6, "objective {} vs analytic {analytic}", run.report.objective);
    }

    #[test]
    fn no_nfz_pipelines_are_identical() {
        let prob = BenchProblemSpec::no_nfz().build().unwrap();
        let report = run_comparison(&prob, &quick_cfg());
        assert_eq!(report.failure, None);
        let s = report.standard.unwrap();
        let e = report.ech.unwrap();
        assert_eq!(s.iterations.len(), e.iterations.len());
        assert_eq!(s.objective, e.objective);
        assert_eq!(s.final_ineq_rows, e.final_ineq_rows);
    }

    #[test]
    fn single_nfz_path_clears_the_disc() {
        let prob = BenchProblemSpec::single_nfz().build().unwrap();
        let cfg = EchConfig::default();
        let run = run_pipeline(&prob, &prob.initial_guess(), &cfg, true).unwrap();
        let zone = prob.spec.nfzs[0];
        let worst = run
            .report
            .trajectory
            .iter()
            .map(|s| zone.clearance(s.pos_north, s.pos_east))
            .fold(f64::INFINITY, f64::min);
        // Between-node excursions are bounded by the violation tolerance on
        // the squared-radius constraint, which maps to roughly its square
        // root in rim distance.
        let slack = cfg.eps_tol.sqrt();
        assert!(worst >= -slack, "trajectory dips {worst} m inside the zone");
        assert_eq!(run.report.stop, StopLabel::Converged);
    }

    #[test]
    fn comparison_is_deterministic() {
        let prob = BenchProblemSpec::nfz5().build().unwrap();
        let cfg = quick_cfg();
        let a = run_comparison(&prob, &cfg);
        let b = run_comparison(&prob, &cfg);
        assert_eq!(a.with_zeroed_times(), b.with_zeroed_times());
    }

    #[test]
    fn nfz5_filtered_report_is_consistent() {
        let prob = BenchProblemSpec::nfz5().build().unwrap();
        let run = run_pipeline(&prob, &prob.initial_guess(), &EchConfig::default(), true).unwrap();
        assert_eq!(run.report.label, "ech");
        assert_eq!(run.outcome.afp_invocations(), run.report.afp_invocations);
        assert_eq!(run.report.iterations.len(), run.outcome.iterations.len());
        assert_eq!(run.report.history.len(), 5);
        for h in &run.report.history {
            assert_eq!(h.per_iteration.len(), run.report.iterations.len());
        }
        let etas: Vec<f64> = run.report.iterations.iter().map(|it| it.max_eta).collect();
        for pair in etas.windows(2) {
            assert!(pair[1] <= pair[0] * 1.5, "defect measure regressed: {etas:?}");
        }
    }
}
