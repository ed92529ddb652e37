//! Primal-dual interior-point iteration.
//!
//! One solve proceeds as:
//!
//! 1. [`initialize`]: clip the primal guess strictly inside its bounds, build
//!    strictly positive slacks, take multiplier guesses or fit them by damped
//!    least squares on the stationarity condition, pick the initial barrier
//!    parameter from the average complementarity.
//! 2. Newton steps on the perturbed KKT system with slack and bound blocks
//!    eliminated, solved by sparse LDL^T. Wrong inertia is repaired by primal
//!    regularization starting at 1e-8 and escalating tenfold; a zero pivot
//!    additionally regularizes the constraint block.
//! 3. Fraction-to-boundary step caps (factor 0.995), then Armijo backtracking
//!    on an l1 exact-penalty merit whose penalty tracks the multiplier norms.
//! 4. Barrier updates follow the monotone Fiacco-McCormick schedule
//!    mu <- max(tol_kkt/10, min(0.2 mu, mu^1.5)) once the barrier subproblem
//!    is solved to within 10 mu.
//! 5. Three consecutive line-search failures divert into feasibility
//!    restoration (minimize the squared constraint violation with the same
//!    algorithm), after which the main iteration resumes from a fresh
//!    barrier sequence centered at the restored point, or gives up.

use super::{KktResiduals, NlpProblem, NlpSolution, SolveStatus, SolverOptions, WarmStart};
use crate::error::Error;
use crate::sparse::{CscUpper, FactorStatus, LdlFactor};
use std::time::Instant;

const TAU: f64 = 0.995;
const KAPPA_MU: f64 = 0.2;
const KAPPA_EPS: f64 = 10.0;
const ARMIJO_C1: f64 = 1e-4;
const DELTA_P_START: f64 = 1e-8;
const DELTA_P_MAX: f64 = 1e16;
/// Base of the constraint-block shift `delta_c = DELTA_C * mu^0.25`. The
/// shift enters the factorization only; iterative refinement targets the
/// unshifted constraint rows, so the step carries no `delta_c`-sized
/// feasibility bias.
const DELTA_C: f64 = 1e-8;
const MAX_LS_FAILURES: usize = 3;
const KAPPA_SIGMA: f64 = 1e10;
const LS_FIT_DAMPING: f64 = 1e-8;
// Push-off used instead of `slack_min` when the caller supplies multipliers:
// a warm point sits near the constraint surface on purpose, and shoving its
// active slacks out by the cold-start margin breaks the complementarity the
// multipliers encode.
const WARM_PUSH: f64 = 1e-6;

/// Strictly interior primal-dual point produced by [`initialize`].
#[derive(Debug, Clone)]
pub struct InteriorPoint {
    pub z: Vec<f64>,
    pub slacks: Vec<f64>,
    pub eq_mult: Vec<f64>,
    pub ineq_mult: Vec<f64>,
    pub lower_mult: Vec<f64>,
    pub upper_mult: Vec<f64>,
    pub mu: f64,
}

struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Bounds {
    fn of(nlp: &dyn NlpProblem) -> Self {
        let (lo, hi) = nlp.bounds();
        assert_eq!(lo.len(), nlp.num_vars());
        assert_eq!(hi.len(), nlp.num_vars());
        for j in 0..lo.len() {
            if lo[j].is_finite() && hi[j].is_finite() {
                assert!(
                    hi[j] - lo[j] > 1e-12 * (1.0 + lo[j].abs()),
                    "bounds of variable {j} leave no interior; use an equality row to fix it"
                );
            } else {
                assert!(lo[j] <= hi[j], "bounds of variable {j} are inverted");
            }
        }
        Self { lo, hi }
    }

    fn any_finite(&self) -> bool {
        self.lo.iter().any(|l| l.is_finite()) || self.hi.iter().any(|h| h.is_finite())
    }
}

/// Function and first-derivative values at the current iterate.
struct Evaluated {
    f: f64,
    grad: Vec<f64>,
    h: Vec<f64>,
    g: Vec<f64>,
    jh_vals: Vec<f64>,
    jg_vals: Vec<f64>,
}

struct Workspace {
    n: usize,
    mh: usize,
    mg: usize,
    eq_pat: Vec<(usize, usize)>,
    ineq_pat: Vec<(usize, usize)>,
    hess_vals: Vec<f64>,
    kkt: CscUpper,
    map_hess: Vec<usize>,
    map_jh: Vec<usize>,
    map_jg: Vec<usize>,
    map_diag: Vec<usize>,
    factor: LdlFactor,
}

impl Workspace {
    fn new(nlp: &dyn NlpProblem) -> Self {
        let n = nlp.num_vars();
        let mh = nlp.num_eq();
        let mg = nlp.num_ineq();
        let eq_pat = nlp.eq_jacobian_pattern();
        let ineq_pat = nlp.ineq_jacobian_pattern();
        let hess_pat = nlp.hessian_pattern();
        for &(r, c) in &hess_pat {
            assert!(r <= c && c < n, "Hessian entry ({r}, {c}) must be upper-triangular");
        }
        for &(r, c) in &eq_pat {
            assert!(r < mh && c < n, "equality Jacobian entry ({r}, {c}) out of range");
        }
        for &(r, c) in &ineq_pat {
            assert!(r < mg && c < n, "inequality Jacobian entry ({r}, {c}) out of range");
        }

        let dim = n + mh + mg;
        let mut entries: Vec<(usize, usize)> =
            Vec::with_capacity(hess_pat.len() + eq_pat.len() + ineq_pat.len() + dim);
        entries.extend(hess_pat.iter().copied());
        entries.extend(eq_pat.iter().map(|&(r, c)| (c, n + r)));
        entries.extend(ineq_pat.iter().map(|&(r, c)| (c, n + mh + r)));
        entries.extend((0..dim).map(|j| (j, j)));
        let (kkt, map) = CscUpper::from_pattern(dim, &entries);

        let a = hess_pat.len();
        let b = a + eq_pat.len();
        let c = b + ineq_pat.len();
        let map_hess = map[..a].to_vec();
        let map_jh = map[a..b].to_vec();
        let map_jg = map[b..c].to_vec();
        let map_diag = map[c..].to_vec();
        let factor = LdlFactor::symbolic(&kkt);

        Self {
            n,
            mh,
            mg,
            hess_vals: vec![0.0; hess_pat.len()],
            eq_pat,
            ineq_pat,
            kkt,
            map_hess,
            map_jh,
            map_jg,
            map_diag,
            factor,
        }
    }

    fn evaluate(&self, nlp: &dyn NlpProblem, z: &[f64]) -> Result<Evaluated, Error> {
        let mut ev = Evaluated {
            f: 0.0,
            grad: vec![0.0; self.n],
            h: vec![0.0; self.mh],
            g: vec![0.0; self.mg],
            jh_vals: vec![0.0; self.eq_pat.len()],
            jg_vals: vec![0.0; self.ineq_pat.len()],
        };
        self.refresh(nlp, z, &mut ev)?;
        Ok(ev)
    }

    fn refresh(&self, nlp: &dyn NlpProblem, z: &[f64], ev: &mut Evaluated) -> Result<(), Error> {
        ev.f = nlp.objective(z)?;
        nlp.gradient(z, &mut ev.grad)?;
        nlp.eq_constraints(z, &mut ev.h)?;
        nlp.ineq_constraints(z, &mut ev.g)?;
        nlp.eq_jacobian_values(z, &mut ev.jh_vals)?;
        nlp.ineq_jacobian_values(z, &mut ev.jg_vals)?;
        ensure_finite("objective", &[ev.f])?;
        ensure_finite("gradient", &ev.grad)?;
        ensure_finite("equality residual", &ev.h)?;
        ensure_finite("inequality residual", &ev.g)?;
        ensure_finite("equality Jacobian", &ev.jh_vals)?;
        ensure_finite("inequality Jacobian", &ev.jg_vals)?;
        Ok(())
    }
}

fn ensure_finite(context: &'static str, values: &[f64]) -> Result<(), Error> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { context, index }),
        None => Ok(()),
    }
}

/// Damped least-squares multiplier estimate: minimizes
/// ||grad f + Jh^T y + Jg^T w||^2 + 1e-8 ||(y, w)||^2 at the given point.
/// Inequality multipliers are not sign-constrained here; callers floor them.
pub fn least_squares_multipliers(
    nlp: &dyn NlpProblem,
    z: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), Error> {
    let ws = Workspace::new(nlp);
    let ev = ws.evaluate(nlp, z)?;
    Ok(ls_fit(&ws, &ev))
}

fn ls_fit(ws: &Workspace, ev: &Evaluated) -> (Vec<f64>, Vec<f64>) {
    let (n, mh, mg) = (ws.n, ws.mh, ws.mg);
    let m = mh + mg;
    if m == 0 {
        return (Vec::new(), Vec::new());
    }
    // Augmented formulation of the damped normal equations:
    //   [ I   -J^T ] [t]   [grad]
    //   [-J   -dI  ] [l] = [ 0  ]
    let mut entries: Vec<(usize, usize)> = Vec::with_capacity(n + m + ws.eq_pat.len() + ws.ineq_pat.len());
    entries.extend((0..n + m).map(|j| (j, j)));
    entries.extend(ws.eq_pat.iter().map(|&(r, c)| (c, n + r)));
    entries.extend(ws.ineq_pat.iter().map(|&(r, c)| (c, n + mh + r)));
    let (mut aug, map) = CscUpper::from_pattern(n + m, &entries);
    {
        let vals = aug.values_mut();
        for j in 0..n {
            vals[map[j]] = 1.0;
        }
        for j in n..n + m {
            vals[map[j]] = -LS_FIT_DAMPING;
        }
        for (k, &slot) in map[n + m..n + m + ws.eq_pat.len()].iter().enumerate() {
            vals[slot] += -ev.jh_vals[k];
        }
        for (k, &slot) in map[n + m + ws.eq_pat.len()..].iter().enumerate() {
            vals[slot] += -ev.jg_vals[k];
        }
    }
    let mut factor = LdlFactor::symbolic(&aug);
    let mut rhs = vec![0.0; n + m];
    rhs[..n].copy_from_slice(&ev.grad);
    match factor.refactor(&aug, 0.0) {
        FactorStatus::Done => factor.solve_in_place(&mut rhs),
        // Structurally impossible: the (1, -d) diagonal makes the system
        // quasi-definite. Fall back to zero multipliers if it happens.
        FactorStatus::ZeroPivot { .. } => rhs.iter_mut().for_each(|v| *v = 0.0),
    }
    (rhs[n..n + mh].to_vec(), rhs[n + mh..].to_vec())
}

/// Builds the strictly interior starting point: primal clipped inside its
/// bounds with a relative push-off of `slack_min`, slacks floored the same
/// way, multipliers from the warm start (inequality entries floored at
/// `mult_min`) or from the least-squares fit, and the barrier parameter from
/// the average complementarity.
pub fn initialize(
    nlp: &dyn NlpProblem,
    warm: &WarmStart,
    opts: &SolverOptions,
) -> Result<InteriorPoint, Error> {
    let ws = Workspace::new(nlp);
    let bounds = Bounds::of(nlp);
    initialize_inner(nlp, warm, opts, &ws, &bounds)
}

fn initialize_inner(
    nlp: &dyn NlpProblem,
    warm: &WarmStart,
    opts: &SolverOptions,
    ws: &Workspace,
    bounds: &Bounds,
) -> Result<InteriorPoint, Error> {
    let (n, mh, mg) = (ws.n, ws.mh, ws.mg);
    assert_eq!(warm.z.len(), n, "warm start has {} variables, problem has {n}", warm.z.len());

    let warm_duals = warm.eq_multipliers.is_some() || warm.ineq_multipliers.is_some();
    let push = if warm_duals { opts.slack_min.min(WARM_PUSH) } else { opts.slack_min };

    let mut z = warm.z.clone();
    for j in 0..n {
        if !z[j].is_finite() {
            z[j] = 0.0;
        }
        let off = push * (1.0 + z[j].abs());
        let (lo, hi) = (bounds.lo[j], bounds.hi[j]);
        if lo.is_finite() && hi.is_finite() {
            let off = off.min((hi - lo) / 4.0);
            z[j] = z[j].clamp(lo + off, hi - off);
        } else if lo.is_finite() {
            z[j] = z[j].max(lo + off);
        } else if hi.is_finite() {
            z[j] = z[j].min(hi - off);
        }
    }

    let ev = ws.evaluate(nlp, &z)?;
    let mut slacks = vec![0.0; mg];
    for i in 0..mg {
        slacks[i] = (-ev.g[i]).max(push * (1.0 + ev.g[i].abs()));
    }

    let (eq_mult, mut ineq_mult) = if warm_duals {
        let y = warm.eq_multipliers.clone().unwrap_or_else(|| vec![0.0; mh]);
        let w = warm.ineq_multipliers.clone().unwrap_or_else(|| vec![0.0; mg]);
        assert_eq!(y.len(), mh);
        assert_eq!(w.len(), mg);
        (y, w)
    } else {
        ls_fit(ws, &ev)
    };
    for w in ineq_mult.iter_mut() {
        *w = w.max(opts.mult_min);
    }

    let mu_floor = opts.tol_kkt / 10.0;
    let mu = if mg > 0 {
        let avg = slacks.iter().zip(&ineq_mult).map(|(s, w)| s * w).sum::<f64>() / mg as f64;
        let cold_floor = if warm_duals { mu_floor } else { 1e-2 };
        avg.clamp(cold_floor, 100.0)
    } else if bounds.any_finite() {
        if warm_duals {
            mu_floor
        } else {
            1e-1
        }
    } else {
        mu_floor
    };

    fn set_bound_mults(
        bounds: &Bounds,
        mult_min: f64,
        mu: f64,
        z: &[f64],
        lower_mult: &mut [f64],
        upper_mult: &mut [f64],
    ) {
        for j in 0..z.len() {
            if bounds.lo[j].is_finite() {
                lower_mult[j] = (mu / (z[j] - bounds.lo[j])).max(mult_min);
            }
            if bounds.hi[j].is_finite() {
                upper_mult[j] = (mu / (bounds.hi[j] - z[j])).max(mult_min);
            }
        }
    }
    let mut lower_mult = vec![0.0; n];
    let mut upper_mult = vec![0.0; n];
    set_bound_mults(bounds, opts.mult_min, mu, &z, &mut lower_mult, &mut upper_mult);

    let mut pt = InteriorPoint { z, slacks, eq_mult, ineq_mult, lower_mult, upper_mult, mu };

    if warm_duals {
        // A warm point resampled from another mesh or constraint selection is
        // close but not converged, while the product average above reads as if
        // it were. Starting below the level the advance gate would accept
        // freezes the monotone schedule for the whole solve; mu too large
        // costs a few extra updates instead. Raise mu to the gate, then cap
        // each multiplier so no single s*w product pins the schedule.
        let be = barrier_error(ws, bounds, &ev, &pt);
        if be > KAPPA_EPS * pt.mu {
            pt.mu = (be / KAPPA_EPS).min(100.0);
            set_bound_mults(bounds, opts.mult_min, pt.mu, &pt.z, &mut pt.lower_mult, &mut pt.upper_mult);
        }
        for (w, s) in pt.ineq_mult.iter_mut().zip(&pt.slacks) {
            *w = w.min((KAPPA_EPS * pt.mu / s).max(opts.mult_min));
        }
    }

    Ok(pt)
}

fn residuals(ws: &Workspace, bounds: &Bounds, ev: &Evaluated, pt: &InteriorPoint) -> KktResiduals {
    let (n, _, mg) = (ws.n, ws.mh, ws.mg);
    let mut stat = ev.grad.clone();
    for (k, &(r, c)) in ws.eq_pat.iter().enumerate() {
        stat[c] += ev.jh_vals[k] * pt.eq_mult[r];
    }
    for (k, &(r, c)) in ws.ineq_pat.iter().enumerate() {
        stat[c] += ev.jg_vals[k] * pt.ineq_mult[r];
    }
    let mut compl: f64 = 0.0;
    let mut dual: f64 = 0.0;
    for j in 0..n {
        if bounds.lo[j].is_finite() {
            stat[j] -= pt.lower_mult[j];
            compl = compl.max(((pt.z[j] - bounds.lo[j]) * pt.lower_mult[j]).abs());
            dual = dual.max(-pt.lower_mult[j]);
        }
        if bounds.hi[j].is_finite() {
            stat[j] += pt.upper_mult[j];
            compl = compl.max(((bounds.hi[j] - pt.z[j]) * pt.upper_mult[j]).abs());
            dual = dual.max(-pt.upper_mult[j]);
        }
    }
    for i in 0..mg {
        compl = compl.max((pt.slacks[i] * pt.ineq_mult[i]).abs());
        dual = dual.max(-pt.ineq_mult[i]);
    }
    let stationarity = stat.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut primal = ev.h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    primal = ev.g.iter().fold(primal, |a, v| a.max(*v));
    KktResiduals { stationarity, primal, dual: dual.max(0.0), complementarity: compl }
}

/// Barrier-subproblem error: like the KKT residuals but with complementarity
/// measured against the current mu instead of zero.
fn barrier_error(ws: &Workspace, bounds: &Bounds, ev: &Evaluated, pt: &InteriorPoint) -> f64 {
    let r = residuals(ws, bounds, ev, pt);
    let mut shifted: f64 = 0.0;
    for i in 0..ws.mg {
        shifted = shifted.max((pt.slacks[i] * pt.ineq_mult[i] - pt.mu).abs());
    }
    for j in 0..ws.n {
        if bounds.lo[j].is_finite() {
            shifted = shifted.max(((pt.z[j] - bounds.lo[j]) * pt.lower_mult[j] - pt.mu).abs());
        }
        if bounds.hi[j].is_finite() {
            shifted = shifted.max(((bounds.hi[j] - pt.z[j]) * pt.upper_mult[j] - pt.mu).abs());
        }
    }
    r.stationarity.max(r.primal).max(shifted)
}

fn merit(bounds: &Bounds, ev_f: f64, h: &[f64], g: &[f64], z: &[f64], s: &[f64], mu: f64, nu: f64) -> f64 {
    let mut phi = ev_f;
    for si in s {
        phi -= mu * si.ln();
    }
    for j in 0..z.len() {
        if bounds.lo[j].is_finite() {
            phi -= mu * (z[j] - bounds.lo[j]).ln();
        }
        if bounds.hi[j].is_finite() {
            phi -= mu * (bounds.hi[j] - z[j]).ln();
        }
    }
    let viol: f64 = h.iter().map(|v| v.abs()).sum::<f64>()
        + g.iter().zip(s).map(|(gi, si)| (gi + si).abs()).sum::<f64>();
    phi + nu * viol
}

struct Direction {
    dz: Vec<f64>,
    ds: Vec<f64>,
    dy: Vec<f64>,
    dw: Vec<f64>,
    dzl: Vec<f64>,
    dzu: Vec<f64>,
}

/// Solves the NLP. Returns an error only when problem callbacks fail at an
/// accepted iterate; unsuccessful termination is reported through
/// [`SolveStatus`] instead.
pub fn solve(nlp: &dyn NlpProblem, warm: &WarmStart, opts: &SolverOptions) -> Result<NlpSolution, Error> {
    let started = Instant::now();
    solve_inner(nlp, warm, opts, started, false)
}

fn solve_inner(
    nlp: &dyn NlpProblem,
    warm: &WarmStart,
    opts: &SolverOptions,
    started: Instant,
    in_restoration: bool,
) -> Result<NlpSolution, Error> {
    let mut ws = Workspace::new(nlp);
    let bounds = Bounds::of(nlp);
    let (n, mh, mg) = (ws.n, ws.mh, ws.mg);
    let dim = n + mh + mg;
    let has_barrier = mg > 0 || bounds.any_finite();
    let mu_floor = opts.tol_kkt / 10.0;

    let mut pt = initialize_inner(nlp, warm, opts, &ws, &bounds)?;
    let mut ev = ws.evaluate(nlp, &pt.z)?;

    let mut nu = 0.1f64;
    let mut ls_failures = 0usize;
    let mut restorations = 0usize;
    // Reference values for the non-monotone Armijo test: the last few accepted
    // merit values under the current (mu, nu) pair. A primal-dual step that
    // crosses a curved constraint surface raises the merit before it falls,
    // and a monotone test truncates such steps until the iterate zigzags in
    // place. Values under a different mu or nu measure a different function,
    // so the window resets when either changes.
    let mut merit_window: Vec<f64> = Vec::new();
    let mut window_mu = pt.mu;
    let mut window_nu = nu;
    let mut mu_history = vec![pt.mu];
    let mut iteration_log = Vec::new();
    let mut rhs = vec![0.0; dim];
    let mut sol = vec![0.0; dim];
    let mut resid = vec![0.0; dim];
    let mut h_trial = vec![0.0; mh];
    let mut g_trial = vec![0.0; mg];

    let mut iterations = 0usize;
    let finish = |status: SolveStatus,
                  pt: InteriorPoint,
                  ev: &Evaluated,
                  res: KktResiduals,
                  iterations: usize,
                  mu_history: Vec<f64>,
                  iteration_log: Vec<String>| {
        Ok(NlpSolution {
            status,
            objective: ev.f,
            z: pt.z,
            eq_multipliers: pt.eq_mult,
            ineq_multipliers: pt.ineq_mult,
            slacks: pt.slacks,
            lower_bound_multipliers: pt.lower_mult,
            upper_bound_multipliers: pt.upper_mult,
            residuals: res,
            iterations,
            wall_time: started.elapsed(),
            mu_history,
            iteration_log,
        })
    };

    loop {
        let res = residuals(&ws, &bounds, &ev, &pt);
        let mu_settled = !has_barrier || pt.mu <= mu_floor * 1.0001;
        if res.stationarity <= opts.tol_kkt
            && res.primal <= opts.tol_primal
            && res.dual <= opts.tol_kkt
            && res.complementarity <= opts.tol_kkt
            && mu_settled
        {
            return finish(SolveStatus::Optimal, pt, &ev, res, iterations, mu_history, iteration_log);
        }
        if iterations >= opts.max_iterations {
            return finish(SolveStatus::MaxIterations, pt, &ev, res, iterations, mu_history, iteration_log);
        }

        // Monotone barrier schedule, applied as often as the subproblem allows.
        while has_barrier
            && pt.mu > mu_floor
            && barrier_error(&ws, &bounds, &ev, &pt) <= KAPPA_EPS * pt.mu
        {
            pt.mu = (KAPPA_MU * pt.mu).min(pt.mu.powf(1.5)).max(mu_floor);
        }

        nlp.hessian_values(&pt.z, 1.0, &pt.eq_mult, &pt.ineq_mult, &mut ws.hess_vals)?;
        ensure_finite("Lagrangian Hessian", &ws.hess_vals)?;

        // Factor with inertia correction. The target inertia of the reduced
        // KKT matrix is (n, mh + mg): anything else means the step is not a
        // descent direction for the barrier problem.
        let mut delta_p = 0.0f64;
        let mut delta_c = 0.0f64;
        let factored = loop {
            assemble_kkt(&mut ws, &bounds, &pt, &ev, delta_p, delta_c);
            let status = ws.factor.refactor(&ws.kkt, 0.0);
            let ok = match status {
                FactorStatus::Done => ws.factor.inertia() == (n, mh + mg),
                FactorStatus::ZeroPivot { .. } => {
                    delta_c = (DELTA_C * pt.mu.max(mu_floor).powf(0.25)).max(delta_c * 10.0);
                    false
                }
            };
            if ok {
                break true;
            }
            delta_p = if delta_p == 0.0 { DELTA_P_START } else { delta_p * 10.0 };
            if delta_p > DELTA_P_MAX {
                break false;
            }
        };

        let mut step_accepted = false;
        let mut alpha_used = 0.0;
        let mut dbg = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        if factored {
            // Reduced Newton system right-hand side.
            for j in 0..n {
                let mut v = ev.grad[j];
                if bounds.lo[j].is_finite() {
                    v -= pt.mu / (pt.z[j] - bounds.lo[j]);
                }
                if bounds.hi[j].is_finite() {
                    v += pt.mu / (bounds.hi[j] - pt.z[j]);
                }
                rhs[j] = -v;
            }
            for (k, &(r, c)) in ws.eq_pat.iter().enumerate() {
                rhs[c] -= ev.jh_vals[k] * pt.eq_mult[r];
            }
            for (k, &(r, c)) in ws.ineq_pat.iter().enumerate() {
                rhs[c] -= ev.jg_vals[k] * pt.ineq_mult[r];
            }
            for r in 0..mh {
                rhs[n + r] = -ev.h[r];
            }
            for r in 0..mg {
                rhs[n + mh + r] = -ev.g[r] - pt.mu / pt.ineq_mult[r];
            }

            sol.copy_from_slice(&rhs);
            ws.factor.solve_in_place(&mut sol);
            // Iterative refinement against the system without the
            // constraint-block shift: the shifted factor only preconditions,
            // so the shift regularizes the factorization without leaving a
            // `delta_c`-sized feasibility floor in the step. The constraint
            // rows are consistent near a feasible point, so the refinement
            // converges there even when they are rank deficient.
            let bnorm = rhs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let mut neg = vec![0.0; dim];
            for _ in 0..3 {
                resid.copy_from_slice(&rhs);
                neg.fill(0.0);
                ws.kkt.sym_gemv(&sol, &mut neg);
                for j in 0..dim {
                    resid[j] -= neg[j];
                }
                for j in n..dim {
                    resid[j] -= delta_c * sol[j];
                }
                let rnorm = resid.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if rnorm <= 1e-12 * (1.0 + bnorm) {
                    break;
                }
                ws.factor.solve_in_place(&mut resid);
                for j in 0..dim {
                    sol[j] += resid[j];
                }
            }

            let dir = recover_direction(&ws, &bounds, &pt, &sol);

            // Fraction-to-boundary caps.
            let mut alpha_p: f64 = 1.0;
            for i in 0..mg {
                if dir.ds[i] < 0.0 {
                    alpha_p = alpha_p.min(-TAU * pt.slacks[i] / dir.ds[i]);
                }
            }
            for j in 0..n {
                if bounds.lo[j].is_finite() && dir.dz[j] < 0.0 {
                    alpha_p = alpha_p.min(-TAU * (pt.z[j] - bounds.lo[j]) / dir.dz[j]);
                }
                if bounds.hi[j].is_finite() && dir.dz[j] > 0.0 {
                    alpha_p = alpha_p.min(TAU * (bounds.hi[j] - pt.z[j]) / dir.dz[j]);
                }
            }
            let mut alpha_d: f64 = 1.0;
            for i in 0..mg {
                if dir.dw[i] < 0.0 {
                    alpha_d = alpha_d.min(-TAU * pt.ineq_mult[i] / dir.dw[i]);
                }
            }
            for j in 0..n {
                if bounds.lo[j].is_finite() && dir.dzl[j] < 0.0 {
                    alpha_d = alpha_d.min(-TAU * pt.lower_mult[j] / dir.dzl[j]);
                }
                if bounds.hi[j].is_finite() && dir.dzu[j] < 0.0 {
                    alpha_d = alpha_d.min(-TAU * pt.upper_mult[j] / dir.dzu[j]);
                }
            }

            // Exact-penalty weight keeps pace with the incoming multipliers.
            let mut mult_norm: f64 = 0.0;
            for r in 0..mh {
                mult_norm = mult_norm.max((pt.eq_mult[r] + alpha_d * dir.dy[r]).abs());
            }
            for r in 0..mg {
                mult_norm = mult_norm.max((pt.ineq_mult[r] + alpha_d * dir.dw[r]).abs());
            }
            nu = nu.max(1.1 * mult_norm + 0.1);

            let viol0: f64 = ev.h.iter().map(|v| v.abs()).sum::<f64>()
                + ev.g.iter().zip(&pt.slacks).map(|(gi, si)| (gi + si).abs()).sum::<f64>();
            let mut descent = ev.grad.iter().zip(&dir.dz).map(|(g, d)| g * d).sum::<f64>();
            for i in 0..mg {
                descent -= pt.mu * dir.ds[i] / pt.slacks[i];
            }
            for j in 0..n {
                if bounds.lo[j].is_finite() {
                    descent -= pt.mu * dir.dz[j] / (pt.z[j] - bounds.lo[j]);
                }
                if bounds.hi[j].is_finite() {
                    descent += pt.mu * dir.dz[j] / (bounds.hi[j] - pt.z[j]);
                }
            }
            descent -= nu * viol0;
            let jdz = (0..n).max_by(|&a, &b| dir.dz[a].abs().total_cmp(&dir.dz[b].abs())).unwrap_or(0);
            dbg = (jdz as f64, dir.dz[jdz], delta_p, descent);

            if descent < 0.0 {
                let phi0 = merit(&bounds, ev.f, &ev.h, &ev.g, &pt.z, &pt.slacks, pt.mu, nu);
                if pt.mu != window_mu || nu != window_nu {
                    merit_window.clear();
                    window_mu = pt.mu;
                    window_nu = nu;
                }
                let phi_ref = merit_window.iter().fold(phi0, |a: f64, &v| a.max(v));
                // Near a solution the true decrease drops below the rounding
                // noise of the merit value itself; without this slack the
                // search halves alpha to nothing on steps that are fine.
                let noise = 10.0 * f64::EPSILON * phi0.abs();
                let mut alpha = alpha_p;
                for _ in 0..60 {
                    let z_t: Vec<f64> =
                        pt.z.iter().zip(&dir.dz).map(|(z, d)| z + alpha * d).collect();
                    let s_t: Vec<f64> =
                        pt.slacks.iter().zip(&dir.ds).map(|(s, d)| s + alpha * d).collect();
                    let trial_ok = (|| -> Result<f64, Error> {
                        let f_t = nlp.objective(&z_t)?;
                        nlp.eq_constraints(&z_t, &mut h_trial)?;
                        nlp.ineq_constraints(&z_t, &mut g_trial)?;
                        ensure_finite("objective", &[f_t])?;
                        ensure_finite("equality residual", &h_trial)?;
                        ensure_finite("inequality residual", &g_trial)?;
                        Ok(f_t)
                    })();
                    if let Ok(f_t) = trial_ok {
                        let phi_t = merit(&bounds, f_t, &h_trial, &g_trial, &z_t, &s_t, pt.mu, nu);
                        if phi_t <= phi_ref + ARMIJO_C1 * alpha * descent + noise {
                            merit_window.push(phi_t);
                            if merit_window.len() > MERIT_WINDOW {
                                merit_window.remove(0);
                            }
                            // Accept; dual step uses the boundary-capped alpha_d.
                            pt.z = z_t;
                            pt.slacks = s_t;
                            for r in 0..mh {
                                pt.eq_mult[r] += alpha_d * dir.dy[r];
                            }
                            for r in 0..mg {
                                pt.ineq_mult[r] += alpha_d * dir.dw[r];
                            }
                            for j in 0..n {
                                pt.lower_mult[j] += alpha_d * dir.dzl[j];
                                pt.upper_mult[j] += alpha_d * dir.dzu[j];
                            }
                            safeguard_multipliers(&mut pt, &bounds);
                            step_accepted = true;
                            alpha_used = alpha;
                            break;
                        }
                    }
                    alpha *= 0.5;
                    if alpha < 1e-10 * alpha_p {
                        break;
                    }
                }
            }
        }

        iterations += 1;
        if step_accepted {
            ls_failures = 0;
            ws.refresh(nlp, &pt.z, &mut ev)?;
            mu_history.push(pt.mu);
        } else {
            ls_failures += 1;
            if ls_failures >= MAX_LS_FAILURES {
                if in_restoration {
                    let res = residuals(&ws, &bounds, &ev, &pt);
                    return finish(
                        SolveStatus::RestorationFailed,
                        pt,
                        &ev,
                        res,
                        iterations,
                        mu_history,
                        iteration_log,
                    );
                }
                restorations += 1;
                match restore_feasibility(nlp, &pt.z, opts, started)? {
                    RestorationOutcome::Recovered(z_new) => {
                        // Rebuild the interior point around the restored
                        // primal and restart the barrier sequence centered
                        // there: the rebuilt slacks and multipliers land far
                        // from the old central path, and a floor-level mu
                        // can never pull them back.
                        let mu_before = pt.mu;
                        let warm_new = WarmStart::primal(z_new);
                        pt = initialize_inner(nlp, &warm_new, opts, &ws, &bounds)?;
                        if mg > 0 {
                            let avg = pt
                                .slacks
                                .iter()
                                .zip(&pt.ineq_mult)
                                .map(|(s, w)| s * w)
                                .sum::<f64>()
                                / mg as f64;
                            pt.mu = avg.clamp(mu_before.min(1e-1), mu_before.max(1e-1));
                        }
                        ws.refresh(nlp, &pt.z, &mut ev)?;
                        ls_failures = 0;
                        nu = 1.0;
                        merit_window.clear();
                        if restorations > 5 {
                            let res = residuals(&ws, &bounds, &ev, &pt);
                            return finish(
                                SolveStatus::RestorationFailed,
                                pt,
                                &ev,
                                res,
                                iterations,
                                mu_history,
                                iteration_log,
                            );
                        }
                    }
                    RestorationOutcome::Stuck(status) => {
                        let res = residuals(&ws, &bounds, &ev, &pt);
                        return finish(status, pt, &ev, res, iterations, mu_history, iteration_log);
                    }
                }
            }
        }

        if opts.log_iterations {
            let res = residuals(&ws, &bounds, &ev, &pt);
            iteration_log.push(format!(
                "{}\t{:.12e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\tjdz={:.0} dzj={:.2e} dp={:.1e} desc={:.2e}",
                iterations,
                ev.f,
                res.stationarity,
                res.primal,
                res.dual,
                res.complementarity,
                pt.mu,
                alpha_used,
                dbg.0,
                dbg.1,
                dbg.2,
                dbg.3
            ));
        }
    }
}

fn recover_direction(ws: &Workspace, bounds: &Bounds, pt: &InteriorPoint, sol: &[f64]) -> Direction {
    let (n, mh, mg) = (ws.n, ws.mh, ws.mg);
    let dz = sol[..n].to_vec();
    let dy = sol[n..n + mh].to_vec();
    let dw = sol[n + mh..].to_vec();
    let mut ds = vec![0.0; mg];
    for i in 0..mg {
        ds[i] = -pt.slacks[i] + pt.mu / pt.ineq_mult[i]
            - (pt.slacks[i] / pt.ineq_mult[i]) * dw[i];
    }
    let mut dzl = vec![0.0; n];
    let mut dzu = vec![0.0; n];
    for j in 0..n {
        if bounds.lo[j].is_finite() {
            let d = pt.z[j] - bounds.lo[j];
            dzl[j] = -pt.lower_mult[j] + pt.mu / d - (pt.lower_mult[j] / d) * dz[j];
        }
        if bounds.hi[j].is_finite() {
            let d = bounds.hi[j] - pt.z[j];
            dzu[j] = -pt.upper_mult[j] + pt.mu / d + (pt.upper_mult[j] / d) * dz[j];
        }
    }
    Direction { dz, ds, dy, dw, dzl, dzu }
}

fn assemble_kkt(
    ws: &mut Workspace,
    bounds: &Bounds,
    pt: &InteriorPoint,
    ev: &Evaluated,
    delta_p: f64,
    delta_c: f64,
) {
    let (n, mh, mg) = (ws.n, ws.mh, ws.mg);
    ws.kkt.clear_values();
    let hess = &ws.hess_vals;
    let vals = ws.kkt.values_mut();
    for (k, &slot) in ws.map_hess.iter().enumerate() {
        vals[slot] += hess[k];
    }
    for (k, &slot) in ws.map_jh.iter().enumerate() {
        vals[slot] += ev.jh_vals[k];
    }
    for (k, &slot) in ws.map_jg.iter().enumerate() {
        vals[slot] += ev.jg_vals[k];
    }
    for j in 0..n {
        let mut sigma = delta_p;
        if bounds.lo[j].is_finite() {
            sigma += pt.lower_mult[j] / (pt.z[j] - bounds.lo[j]);
        }
        if bounds.hi[j].is_finite() {
            sigma += pt.upper_mult[j] / (bounds.hi[j] - pt.z[j]);
        }
        vals[ws.map_diag[j]] += sigma;
    }
    for r in 0..mh {
        vals[ws.map_diag[n + r]] += -delta_c;
    }
    for r in 0..mg {
        vals[ws.map_diag[n + mh + r]] += -(pt.slacks[r] / pt.ineq_mult[r]) - delta_c;
    }
}

fn safeguard_multipliers(pt: &mut InteriorPoint, bounds: &Bounds) {
    for i in 0..pt.slacks.len() {
        let center = pt.mu / pt.slacks[i];
        pt.ineq_mult[i] = pt.ineq_mult[i].clamp(center / KAPPA_SIGMA, center * KAPPA_SIGMA);
    }
    for j in 0..pt.z.len() {
        if bounds.lo[j].is_finite() {
            let center = pt.mu / (pt.z[j] - bounds.lo[j]);
            pt.lower_mult[j] = pt.lower_mult[j].clamp(center / KAPPA_SIGMA, center * KAPPA_SIGMA);
        }
        if bounds.hi[j].is_finite() {
            let center = pt.mu / (bounds.hi[j] - pt.z[j]);
            pt.upper_mult[j] = pt.upper_mult[j].clamp(center / KAPPA_SIGMA, center * KAPPA_SIGMA);
        }
    }
}

enum RestorationOutcome {
    Recovered(Vec<f64>),
    Stuck(SolveStatus),
}

/// Feasibility restoration: minimize 1/2 (||r||^2 + ||q||^2) subject to
/// h(z) = r, g(z) <= q, q >= 0 and the original bounds, from the current
/// iterate. Equivalent to minimizing the squared equality residual plus the
/// squared positive part of the inequalities.
fn restore_feasibility(
    nlp: &dyn NlpProblem,
    z0: &[f64],
    opts: &SolverOptions,
    started: Instant,
) -> Result<RestorationOutcome, Error> {
    let rest = RestorationNlp { inner: nlp, n: nlp.num_vars(), mh: nlp.num_eq(), mg: nlp.num_ineq() };
    let mut guess = z0.to_vec();
    let mut h0 = vec![0.0; rest.mh];
    let mut g0 = vec![0.0; rest.mg];
    nlp.eq_constraints(z0, &mut h0)?;
    nlp.ineq_constraints(z0, &mut g0)?;
    guess.extend_from_slice(&h0);
    guess.extend(g0.iter().map(|gi| gi.max(0.0)));

    let rest_opts = SolverOptions {
        tol_kkt: opts.tol_kkt.max(1e-8),
        tol_primal: opts.tol_primal.max(1e-8),
        max_iterations: 200,
        log_iterations: false,
        ..opts.clone()
    };
    let sol = solve_inner(&rest, &WarmStart::primal(guess), &rest_opts, started, true)?;

    let z_new = sol.z[..rest.n].to_vec();
    let mut h_new = vec![0.0; rest.mh];
    let mut g_new = vec![0.0; rest.mg];
    nlp.eq_constraints(&z_new, &mut h_new)?;
    nlp.ineq_constraints(&z_new, &mut g_new)?;
    let viol = h_new.iter().fold(0.0f64, |a, v| a.max(v.abs()))
        .max(g_new.iter().fold(0.0f64, |a, v| a.max(*v)));

    if viol <= 10.0 * opts.tol_primal {
        Ok(RestorationOutcome::Recovered(z_new))
    } else if sol.status == SolveStatus::Optimal {
        Ok(RestorationOutcome::Stuck(SolveStatus::InfeasibleDetected))
    } else {
        Ok(RestorationOutcome::Stuck(SolveStatus::RestorationFailed))
    }
}

struct RestorationNlp<'a> {
    inner: &'a dyn NlpProblem,
    n: usize,
    mh: usize,
    mg: usize,
}

impl NlpProblem for RestorationNlp<'_> {
    fn num_vars(&self) -> usize {
        self.n + self.mh + self.mg
    }
    fn num_eq(&self) -> usize {
        self.mh
    }
    fn num_ineq(&self) -> usize {
        self.mg
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut lo, mut hi) = self.inner.bounds();
        lo.extend(std::iter::repeat(f64::NEG_INFINITY).take(self.mh));
        hi.extend(std::iter::repeat(f64::INFINITY).take(self.mh));
        lo.extend(std::iter::repeat(0.0).take(self.mg));
        hi.extend(std::iter::repeat(f64::INFINITY).take(self.mg));
        (lo, hi)
    }
    fn objective(&self, z: &[f64]) -> Result<f64, Error> {
        Ok(0.5 * z[self.n..].iter().map(|v| v * v).sum::<f64>())
    }
    fn gradient(&self, z: &[f64], grad: &mut [f64]) -> Result<(), Error> {
        grad[..self.n].iter_mut().for_each(|v| *v = 0.0);
        grad[self.n..].copy_from_slice(&z[self.n..]);
        Ok(())
    }
    fn eq_constraints(&self, z: &[f64], out: &mut [f64]) -> Result<(), Error> {
        self.inner.eq_constraints(&z[..self.n], out)?;
        for r in 0..self.mh {
            out[r] -= z[self.n + r];
        }
        Ok(())
    }
    fn ineq_constraints(&self, z: &[f64], out: &mut [f64]) -> Result<(), Error> {
        self.inner.ineq_constraints(&z[..self.n], out)?;
        for r in 0..self.mg {
            out[r] -= z[self.n + self.mh + r];
        }
        Ok(())
    }
    fn eq_jacobian_pattern(&self) -> Vec<(usize, usize)> {
        let mut pat = self.inner.eq_jacobian_pattern();
        pat.extend((0..self.mh).map(|r| (r, self.n + r)));
        pat
    }
    fn eq_jacobian_values(&self, z: &[f64], vals: &mut [f64]) -> Result<(), Error> {
        let inner_len = vals.len() - self.mh;
        self.inner.eq_jacobian_values(&z[..self.n], &mut vals[..inner_len])?;
        vals[inner_len..].iter_mut().for_each(|v| *v = -1.0);
        Ok(())
    }
    fn ineq_jacobian_pattern(&self) -> Vec<(usize, usize)> {
        let mut pat = self.inner.ineq_jacobian_pattern();
        pat.extend((0..self.mg).map(|r| (r, self.n + self.mh + r)));
        pat
    }
    fn ineq_jacobian_values(&self, z: &[f64], vals: &mut [f64]) -> Result<(), Error> {
        let inner_len = vals.len() - self.mg;
        self.inner.ineq_jacobian_values(&z[..self.n], &mut vals[..inner_len])?;
        vals[inner_len..].iter_mut().for_each(|v| *v = -1.0);
        Ok(())
    }
    fn hessian_pattern(&self) -> Vec<(usize, usize)> {
        let mut pat = self.inner.hessian_pattern();
        pat.extend((self.n..self.n + self.mh + self.mg).map(|j| (j, j)));
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
        let inner_len = vals.len() - self.mh - self.mg;
        self.inner.hessian_values(&z[..self.n], 0.0, eq_mult, ineq_mult, &mut vals[..inner_len])?;
        vals[inner_len..].iter_mut().for_each(|v| *v = sigma);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Dense convex quadratic program used as a test harness:
    /// min 1/2 z'Qz + c'z  s.t.  A_eq z = b_eq,  A_in z <= b_in,  lo <= z <= hi.
    #[derive(Debug)]
    struct DenseQp {
        q: Vec<Vec<f64>>,
        c: Vec<f64>,
        a_eq: Vec<Vec<f64>>,
        b_eq: Vec<f64>,
        a_in: Vec<Vec<f64>>,
        b_in: Vec<f64>,
        lo: Vec<f64>,
        hi: Vec<f64>,
    }

    impl DenseQp {
        fn unconstrained(q: Vec<Vec<f64>>, c: Vec<f64>) -> Self {
            let n = c.len();
            Self {
                q,
                c,
                a_eq: vec![],
                b_eq: vec![],
                a_in: vec![],
                b_in: vec![],
                lo: vec![f64::NEG_INFINITY; n],
                hi: vec![f64::INFINITY; n],
            }
        }
    }

    impl NlpProblem for DenseQp {
        fn num_vars(&self) -> usize {
            self.c.len()
        }
        fn num_eq(&self) -> usize {
            self.b_eq.len()
        }
        fn num_ineq(&self) -> usize {
            self.b_in.len()
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (self.lo.clone(), self.hi.clone())
        }
        fn objective(&self, z: &[f64]) -> Result<f64, Error> {
            let n = z.len();
            let mut f = 0.0;
            for i in 0..n {
                f += self.c[i] * z[i];
                for j in 0..n {
                    f += 0.5 * z[i] * self.q[i][j] * z[j];
                }
            }
            Ok(f)
        }
        fn gradient(&self, z: &[f64], grad: &mut [f64]) -> Result<(), Error> {
            for i in 0..z.len() {
                grad[i] = self.c[i] + self.q[i].iter().zip(z).map(|(q, z)| q * z).sum::<f64>();
            }
            Ok(())
        }
        fn eq_constraints(&self, z: &[f64], out: &mut [f64]) -> Result<(), Error> {
            for (r, row) in self.a_eq.iter().enumerate() {
                out[r] = row.iter().zip(z).map(|(a, z)| a * z).sum::<f64>() - self.b_eq[r];
            }
            Ok(())
        }
        fn ineq_constraints(&self, z: &[f64], out: &mut [f64]) -> Result<(), Error> {
            for (r, row) in self.a_in.iter().enumerate() {
                out[r] = row.iter().zip(z).map(|(a, z)| a * z).sum::<f64>() - self.b_in[r];
            }
            Ok(())
        }
        fn eq_jacobian_pattern(&self) -> Vec<(usize, usize)> {
            (0..self.b_eq.len())
                .flat_map(|r| (0..self.c.len()).map(move |c| (r, c)))
                .collect()
        }
        fn eq_jacobian_values(&self, _z: &[f64], vals: &mut [f64]) -> Result<(), Error> {
            let n = self.c.len();
            for r in 0..self.b_eq.len() {
                vals[r * n..(r + 1) * n].copy_from_slice(&self.a_eq[r]);
            }
            Ok(())
        }
        fn ineq_jacobian_pattern(&self) -> Vec<(usize, usize)> {
            (0..self.b_in.len())
                .flat_map(|r| (0..self.c.len()).map(move |c| (r, c)))
                .collect()
        }
        fn ineq_jacobian_values(&self, _z: &[f64], vals: &mut [f64]) -> Result<(), Error> {
            let n = self.c.len();
            for r in 0..self.b_in.len() {
                vals[r * n..(r + 1) * n].copy_from_slice(&self.a_in[r]);
            }
            Ok(())
        }
        fn hessian_pattern(&self) -> Vec<(usize, usize)> {
            let n = self.c.len();
            (0..n).flat_map(|r| (r..n).map(move |c| (r, c))).collect()
        }
        fn hessian_values(
            &self,
            _z: &[f64],
            sigma: f64,
            _eq_mult: &[f64],
            _ineq_mult: &[f64],
            vals: &mut [f64],
        ) -> Result<(), Error> {
            let n = self.c.len();
            let mut k = 0;
            for r in 0..n {
                for c in r..n {
                    vals[k] = sigma * self.q[r][c];
                    k += 1;
                }
            }
            Ok(())
        }
    }

    fn defaults() -> SolverOptions {
        SolverOptions::default()
    }

    // min x^2 s.t. x >= 1: active inequality, multiplier 2.
    #[test]
    fn active_inequality_recovers_known_multiplier() {
        let qp = DenseQp {
            a_in: vec![vec![-1.0]],
            b_in: vec![-1.0],
            ..DenseQp::unconstrained(vec![vec![2.0]], vec![0.0])
        };
        let sol = solve(&qp, &WarmStart::primal(vec![5.0]), &defaults()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.z[0], 1.0, max_relative = 1e-6);
        assert_relative_eq!(sol.ineq_multipliers[0], 2.0, max_relative = 1e-5);
        assert!(sol.residuals.max() <= 1e-8);
        assert_relative_eq!(sol.objective, 1.0, max_relative = 1e-6);
    }

    // min (x-2)^2 + (y-1)^2: smooth unconstrained, one Newton step.
    #[test]
    fn unconstrained_quadratic_hits_minimum_fast() {
        let qp = DenseQp::unconstrained(
            vec![vec![2.0, 0.0], vec![0.0, 2.0]],
            vec![-4.0, -2.0],
        );
        let sol = solve(&qp, &WarmStart::primal(vec![0.0, 0.0]), &defaults()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.iterations <= 2, "took {}", sol.iterations);
        assert_relative_eq!(sol.z[0], 2.0, epsilon = 1e-8);
        assert_relative_eq!(sol.z[1], 1.0, epsilon = 1e-8);
    }

    // min -x on [0, 3]: the upper bound is active with multiplier 1.
    #[test]
    fn active_bound_recovers_known_multiplier() {
        let qp = DenseQp {
            lo: vec![0.0],
            hi: vec![3.0],
            ..DenseQp::unconstrained(vec![vec![0.0]], vec![-1.0])
        };
        let sol = solve(&qp, &WarmStart::primal(vec![1.0]), &defaults()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.z[0], 3.0, epsilon = 1e-6);
        assert_relative_eq!(sol.upper_bound_multipliers[0], 1.0, epsilon = 1e-5);
        assert!(sol.lower_bound_multipliers[0].abs() <= 1e-5);
    }

    // min x^2 + y^2 s.t. x + y = 1: symmetric split, equality multiplier -1.
    #[test]
    fn equality_constrained_quadratic_recovers_multiplier() {
        let qp = DenseQp {
            a_eq: vec![vec![1.0, 1.0]],
            b_eq: vec![1.0],
            ..DenseQp::unconstrained(vec![vec![2.0, 0.0], vec![0.0, 2.0]], vec![0.0, 0.0])
        };
        let sol = solve(&qp, &WarmStart::primal(vec![3.0, -3.0]), &defaults()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_relative_eq!(sol.z[0], 0.5, epsilon = 1e-8);
        assert_relative_eq!(sol.z[1], 0.5, epsilon = 1e-8);
        assert_relative_eq!(sol.eq_multipliers[0], -1.0, epsilon = 1e-5);
    }

    // min x^2 s.t. x = 1, fitted at the feasible guess x = 1: stationarity
    // gives 2 + lambda = 0 up to the damping, so lambda = -2/(1 + 1e-8).
    #[test]
    fn least_squares_fit_matches_hand_solution() {
        let qp = DenseQp {
            a_eq: vec![vec![1.0]],
            b_eq: vec![1.0],
            ..DenseQp::unconstrained(vec![vec![2.0]], vec![0.0])
        };
        let (y, w) = least_squares_multipliers(&qp, &[1.0]).unwrap();
        assert!(w.is_empty());
        assert_relative_eq!(y[0], -2.0 / (1.0 + 1e-8), epsilon = 1e-6);
    }

    #[test]
    fn initialize_pushes_guess_off_bound_and_floors_slacks() {
        let qp = DenseQp {
            lo: vec![0.0],
            hi: vec![10.0],
            a_in: vec![vec![1.0]],
            b_in: vec![5.0],
            ..DenseQp::unconstrained(vec![vec![2.0]], vec![0.0])
        };
        let opts = defaults();
        let pt = initialize(&qp, &WarmStart::primal(vec![0.0]), &opts).unwrap();
        // Guess sat exactly on the lower bound; push-off is slack_min * (1 + |z|).
        assert_relative_eq!(pt.z[0], opts.slack_min, epsilon = 1e-12);
        // g = z - 5 is well negative, so the slack absorbs it exactly.
        assert_relative_eq!(pt.slacks[0], 5.0 - pt.z[0], epsilon = 1e-12);
        assert!(pt.ineq_mult[0] >= opts.mult_min);
        assert!(pt.lower_mult[0] > 0.0 && pt.upper_mult[0] > 0.0);
    }

    #[test]
    fn initialize_replaces_non_finite_guess_entries() {
        let qp = DenseQp::unconstrained(vec![vec![2.0]], vec![0.0]);
        let pt = initialize(&qp, &WarmStart::primal(vec![f64::NAN]), &defaults()).unwrap();
        assert_eq!(pt.z[0], 0.0);
    }

    #[test]
    #[should_panic(expected = "no interior")]
    fn equal_bounds_are_rejected() {
        let qp = DenseQp {
            lo: vec![1.0],
            hi: vec![1.0],
            ..DenseQp::unconstrained(vec![vec![2.0]], vec![0.0])
        };
        let _ = initialize(&qp, &WarmStart::primal(vec![1.0]), &defaults());
    }

    #[test]
    fn warm_start_from_own_solution_is_cheap() {
        let qp = DenseQp {
            a_in: vec![vec![-1.0]],
            b_in: vec![-1.0],
            ..DenseQp::unconstrained(vec![vec![2.0]], vec![0.0])
        };
        let cold = solve(&qp, &WarmStart::primal(vec![5.0]), &defaults()).unwrap();
        let warm = WarmStart {
            z: cold.z.clone(),
            eq_multipliers: Some(cold.eq_multipliers.clone()),
            ineq_multipliers: Some(cold.ineq_multipliers.clone()),
        };
        let resolved = solve(&qp, &warm, &defaults()).unwrap();
        assert_eq!(resolved.status, SolveStatus::Optimal);
        assert!(
            resolved.iterations <= 5,
            "re-solve from own solution took {} iterations",
            resolved.iterations
        );
    }

    // A run that never needs feasibility restoration keeps a monotone
    // barrier; restoration is the one event allowed to restart it higher.
    #[test]
    fn barrier_parameter_never_increases_without_restoration() {
        let qp = DenseQp {
            lo: vec![0.0, 0.0],
            hi: vec![10.0, 10.0],
            a_in: vec![vec![-1.0, -1.0]],
            b_in: vec![-1.0],
            ..DenseQp::unconstrained(vec![vec![2.0, 0.0], vec![0.0, 2.0]], vec![-3.0, 0.5])
        };
        let sol = solve(&qp, &WarmStart::primal(vec![5.0, 5.0]), &defaults()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.mu_history.len() > 1);
        for pair in sol.mu_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-300, "mu rose: {} -> {}", pair[0], pair[1]);
        }
        assert!(*sol.mu_history.last().unwrap() <= defaults().tol_kkt / 10.0 * 1.0001);
    }

    #[test]
    fn iteration_log_has_eight_tab_separated_columns() {
        let qp = DenseQp {
            a_in: vec![vec![-1.0]],
            b_in: vec![-1.0],
            ..DenseQp::unconstrained(vec![vec![2.0]], vec![0.0])
        };
        let opts = SolverOptions { log_iterations: true, ..defaults() };
        let sol = solve(&qp, &WarmStart::primal(vec![5.0]), &opts).unwrap();
        assert!(!sol.iteration_log.is_empty());
        for line in &sol.iteration_log {
            let fields: Vec<&str> = line.split('\t').collect();
            assert_eq!(fields.len(), 8, "bad log line: {line}");
            fields[0].parse::<usize>().unwrap();
            for f in &fields[1..] {
                f.parse::<f64>().unwrap();
            }
        }
        let quiet = solve(&qp, &WarmStart::primal(vec![5.0]), &defaults()).unwrap();
        assert!(quiet.iteration_log.is_empty());
    }

    // x = 0 and x = 1 cannot both hold; restoration converges to the least
    // squares compromise and reports the problem infeasible.
    #[test]
    fn inconsistent_equalities_are_detected() {
        let qp = DenseQp {
            a_eq: vec![vec![1.0], vec![1.0]],
            b_eq: vec![0.0, 1.0],
            ..DenseQp::unconstrained(vec![vec![2.0]], vec![0.0])
        };
        let sol = solve(&qp, &WarmStart::primal(vec![0.3]), &defaults()).unwrap();
        assert_eq!(sol.status, SolveStatus::InfeasibleDetected);
    }

    #[test]
    fn disjoint_inequalities_are_detected() {
        // x >= 1 and x <= -1.
        let qp = DenseQp {
            a_in: vec![vec![-1.0], vec![1.0]],
            b_in: vec![-1.0, -1.0],
            ..DenseQp::unconstrained(vec![vec![2.0]], vec![0.0])
        };
        let sol = solve(&qp, &WarmStart::primal(vec![0.0]), &defaults()).unwrap();
        assert_eq!(sol.status, SolveStatus::InfeasibleDetected);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn qp_strategy() -> impl Strategy<Value = (DenseQp, Vec<f64>)> {
            (1usize..4).prop_flat_map(|n| {
                let mat = proptest::collection::vec(
                    proptest::collection::vec(-1.0f64..1.0, n),
                    n,
                );
                let vecn = proptest::collection::vec(-1.0f64..1.0, n);
                let widths = proptest::collection::vec(0.2f64..3.0, n);
                let n_in = 0usize..3;
                let rows = proptest::collection::vec(
                    (proptest::collection::vec(-1.0f64..1.0, n), 0.05f64..1.0),
                    3,
                );
                (mat, vecn.clone(), vecn, widths, n_in, rows).prop_map(
                    move |(a, c, z0, widths, n_in, rows)| {
                        // Q = A'A + I is safely positive definite.
                        let mut q = vec![vec![0.0; n]; n];
                        for i in 0..n {
                            for j in 0..n {
                                for k in 0..n {
                                    q[i][j] += a[k][i] * a[k][j];
                                }
                            }
                            q[i][i] += 1.0;
                        }
                        // Inequalities hold strictly at z0, bounds bracket it.
                        let mut a_in = Vec::new();
                        let mut b_in = Vec::new();
                        for (row, gap) in rows.into_iter().take(n_in) {
                            let at_z0: f64 =
                                row.iter().zip(&z0).map(|(a, z)| a * z).sum();
                            a_in.push(row);
                            b_in.push(at_z0 + gap);
                        }
                        let lo: Vec<f64> =
                            z0.iter().zip(&widths).map(|(z, w)| z - w).collect();
                        let hi: Vec<f64> =
                            z0.iter().zip(&widths).map(|(z, w)| z + w).collect();
                        (DenseQp { q, c, a_eq: vec![], b_eq: vec![], a_in, b_in, lo, hi }, z0)
                    },
                )
            })
        }

        proptest! {
            // Feasible-by-construction convex QPs must solve to tolerance with
            // every iterate invariant intact at the solution: strict bound
            // interiority, positive slacks, nonnegative inequality duals.
            #[test]
            fn random_convex_qps_solve_clean((qp, z0) in qp_strategy()) {
                let opts = SolverOptions::default();
                let sol = solve(&qp, &WarmStart::primal(z0), &opts).unwrap();
                prop_assert_eq!(sol.status, SolveStatus::Optimal);
                prop_assert!(sol.residuals.stationarity <= opts.tol_kkt);
                prop_assert!(sol.residuals.primal <= opts.tol_primal);
                prop_assert!(sol.residuals.complementarity <= opts.tol_kkt);
                let (lo, hi) = qp.bounds();
                for j in 0..sol.z.len() {
                    prop_assert!(sol.z[j] > lo[j] && sol.z[j] < hi[j]);
                    prop_assert!(sol.lower_bound_multipliers[j] >= 0.0);
                    prop_assert!(sol.upper_bound_multipliers[j] >= 0.0);
                }
                for i in 0..sol.slacks.len() {
                    prop_assert!(sol.slacks[i] > 0.0);
                    prop_assert!(sol.ineq_multipliers[i] >= 0.0);
                }
                for pair in sol.mu_history.windows(2) {
                    prop_assert!(pair[1] <= pair[0]);
                }
            }
        }
    }
}

