//! Dense trajectory reconstruction, discretization error estimates, and the
//! mesh refinement rule driven by them.
//!
//! A converged transcription only pins the trajectory at collocation nodes.
//! Everything between nodes comes from the reconstructions here: states as a
//! C1 cubic Hermite spline whose slopes are fitted from four-node Lagrange
//! stencils, inputs as interval-local quadratics through the endpoint and
//! midpoint values. The same reconstructions feed the defect integral that
//! scores each interval and the dense constraint sweep that scores violation
//! between nodes.

use crate::error::Error;
use crate::mesh::Mesh;
use crate::nlp::NlpProblem;
use crate::ocp::Ocp;
use crate::transcribe::DiscretizedNlp;

/// Hard ceiling on intervals a refinement may request.
pub const MAX_INTERVALS: usize = 2000;

/// Largest number of pieces a single interval splits into per round.
pub const MAX_SPLIT: usize = 8;

/// Acceptance thresholds for one mesh: `eta_tol` bounds the per-interval
/// defect integral, `eps_tol` bounds pointwise constraint violation between
/// nodes.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub eta_tol: f64,
    pub eps_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { eta_tol: 1e-5, eps_tol: 1e-4 }
    }
}

/// Piecewise-polynomial reconstruction of one transcription solution.
///
/// The state spline interpolates every node value and is exact for cubic
/// trajectories; evaluation outside `[t0, tf]` clamps to the endpoints.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    inputs: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
    params: Vec<f64>,
    t0: f64,
    tf: f64,
}

impl Trajectory {
    pub fn from_solution(nlp: &DiscretizedNlp, z: &[f64]) -> Self {
        let n = nlp.num_nodes();
        let times: Vec<f64> = (0..n).map(|i| nlp.node_time(z, i)).collect();
        let states: Vec<Vec<f64>> = (0..n).map(|i| nlp.state(z, i).to_vec()).collect();
        let inputs: Vec<Vec<f64>> = (0..n).map(|i| nlp.input(z, i).to_vec()).collect();
        let slopes = fit_slopes(&times, &states);
        Trajectory {
            t0: times[0],
            tf: nlp.tf_value(z),
            times,
            states,
            inputs,
            slopes,
            params: nlp.params(z).to_vec(),
        }
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn tf(&self) -> f64 {
        self.tf
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Node times including interval midpoints, strictly increasing.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state_node(&self, i: usize) -> &[f64] {
        &self.states[i]
    }

    pub fn input_node(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn intervals(&self) -> usize {
        (self.times.len() - 1) / 2
    }

    fn segment_of(&self, t: f64) -> (usize, f64, f64) {
        let n = self.times.len();
        let seg = match self.times.partition_point(|&tn| tn <= t) {
            0 => 0,
            q => (q - 1).min(n - 2),
        };
        let h = self.times[seg + 1] - self.times[seg];
        let s = ((t - self.times[seg]) / h).clamp(0.0, 1.0);
        (seg, h, s)
    }

    pub fn state_at(&self, t: f64, out: &mut [f64]) {
        let (seg, h, s) = self.segment_of(t);
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        for j in 0..out.len() {
            out[j] = h00 * self.states[seg][j]
                + h10 * h * self.slopes[seg][j]
                + h01 * self.states[seg + 1][j]
                + h11 * h * self.slopes[seg + 1][j];
        }
    }

    pub fn state_deriv_at(&self, t: f64, out: &mut [f64]) {
        let (seg, h, s) = self.segment_of(t);
        let s2 = s * s;
        let d00 = (6.0 * s2 - 6.0 * s) / h;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = (-6.0 * s2 + 6.0 * s) / h;
        let d11 = 3.0 * s2 - 2.0 * s;
        for j in 0..out.len() {
            out[j] = d00 * self.states[seg][j]
                + d10 * self.slopes[seg][j]
                + d01 * self.states[seg + 1][j]
                + d11 * self.slopes[seg + 1][j];
        }
    }

    /// Quadratic through the owning interval's three input nodes.
    pub fn input_at(&self, t: f64, out: &mut [f64]) {
        if out.is_empty() {
            return;
        }
        let (seg, _, _) = self.segment_of(t);
        let k = seg / 2;
        let (ia, im, ib) = (2 * k, 2 * k + 1, 2 * k + 2);
        let (ta, tm, tb) = (self.times[ia], self.times[im], self.times[ib]);
        let t = t.clamp(ta, tb);
        let la = (t - tm) * (t - tb) / ((ta - tm) * (ta - tb));
        let lm = (t - ta) * (t - tb) / ((tm - ta) * (tm - tb));
        let lb = (t - ta) * (t - tm) / ((tb - ta) * (tb - tm));
        for j in 0..out.len() {
            out[j] = la * self.inputs[ia][j] + lm * self.inputs[im][j] + lb * self.inputs[ib][j];
        }
    }
}

/// Slope of the Lagrange interpolant through `(ts, xs)` evaluated at `t`.
fn lagrange_slope(ts: &[f64], xs: &[f64], t: f64) -> f64 {
    let w = ts.len();
    let mut slope = 0.0;
    for j in 0..w {
        let mut denom = 1.0;
        for m in 0..w {
            if m != j {
                denom *= ts[j] - ts[m];
            }
        }
        let mut dl = 0.0;
        for k in 0..w {
            if k == j {
                continue;
            }
            let mut prod = 1.0;
            for m in 0..w {
                if m != j && m != k {
                    prod *= t - ts[m];
                }
            }
            dl += prod;
        }
        slope += xs[j] * dl / denom;
    }
    slope
}

/// Per-node state slopes from sliding four-node stencils (the full parabola
/// when only three nodes exist). Exact for cubic node data.
fn fit_slopes(times: &[f64], states: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = times.len();
    let nx = states[0].len();
    let width = 4.min(n);
    let mut slopes = vec![vec![0.0; nx]; n];
    let mut xs = vec![0.0; width];
    for i in 0..n {
        let start = i.saturating_sub(1).min(n - width);
        let ts = &times[start..start + width];
        for j in 0..nx {
            for (q, x) in xs.iter_mut().enumerate() {
                *x = states[start + q][j];
            }
            slopes[i][j] = lagrange_slope(ts, &xs, times[i]);
        }
    }
    slopes
}

/// Discretization error scores for one trajectory: `eta[k]` is the largest
/// per-state integral of the absolute dynamics defect over interval `k`,
/// `violation[set][k]` the largest positive constraint value seen at any
/// dense sample of that interval. Raw per-sample constraint values stay
/// available for the activity classifier.
#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub eta: Vec<f64>,
    pub max_eta: f64,
    /// Dense sample grid over `[t0, tf]`; interval `k` owns samples
    /// `k * spi ..= (k + 1) * spi`.
    pub sample_times: Vec<f64>,
    pub samples_per_interval: usize,
    /// Raw constraint values indexed `[set][row][sample]`.
    pub set_samples: Vec<Vec<Vec<f64>>>,
    pub violation: Vec<Vec<f64>>,
    pub max_violation: f64,
}

impl ErrorReport {
    pub fn within(&self, tol: &Tolerances) -> bool {
        self.max_eta <= tol.eta_tol && self.max_violation <= tol.eps_tol
    }
}

/// Scores `traj` against the continuous problem on a dense grid with
/// `samples_per_interval` sub-panels per interval (rounded up to even so the
/// composite Simpson weights apply).
pub fn error_analysis(
    ocp: &Ocp,
    traj: &Trajectory,
    samples_per_interval: usize,
) -> Result<ErrorReport, Error> {
    let spi = samples_per_interval.max(2).next_multiple_of(2);
    let k_total = traj.intervals();
    let nx = ocp.nx();
    let p = traj.params();

    let mut sample_times = Vec::with_capacity(k_total * spi + 1);
    for k in 0..k_total {
        let (ta, tb) = (traj.times()[2 * k], traj.times()[2 * k + 2]);
        let start = if k == 0 { 0 } else { 1 };
        for q in start..=spi {
            sample_times.push(ta + (tb - ta) * q as f64 / spi as f64);
        }
    }

    let mut x = vec![0.0; nx];
    let mut u = vec![0.0; ocp.nu()];
    let mut xdot = vec![0.0; nx];
    let mut f = vec![0.0; nx];

    let mut defect = vec![vec![0.0; nx]; spi + 1];
    let mut eta = vec![0.0; k_total];
    let sets = ocp.constraint_sets();
    let mut set_samples: Vec<Vec<Vec<f64>>> = sets
        .iter()
        .map(|cs| vec![vec![0.0; sample_times.len()]; cs.rows()])
        .collect();
    let mut cvals: Vec<Vec<f64>> = sets.iter().map(|cs| vec![0.0; cs.rows()]).collect();
    let mut violation = vec![vec![0.0f64; k_total]; sets.len()];

    for k in 0..k_total {
        let (ta, tb) = (traj.times()[2 * k], traj.times()[2 * k + 2]);
        let dt = (tb - ta) / spi as f64;
        for q in 0..=spi {
            let t = ta + dt * q as f64;
            let sample_idx = k * spi + q;
            traj.state_at(t, &mut x);
            traj.input_at(t, &mut u);
            traj.state_deriv_at(t, &mut xdot);
            ocp.dynamics(&x, &u, t, p, &mut f)?;
            for j in 0..nx {
                defect[q][j] = (xdot[j] - f[j]).abs();
            }
            for si in 0..sets.len() {
                ocp.path_constraints(si, &x, &u, t, p, &mut cvals[si])?;
                for (r, &c) in cvals[si].iter().enumerate() {
                    set_samples[si][r][sample_idx] = c;
                    if c > violation[si][k] {
                        violation[si][k] = c;
                    }
                }
            }
        }
        for j in 0..nx {
            let mut integral = defect[0][j] + defect[spi][j];
            for q in 1..spi {
                integral += defect[q][j] * if q % 2 == 1 { 4.0 } else { 2.0 };
            }
            integral *= dt / 3.0;
            if integral > eta[k] {
                eta[k] = integral;
            }
        }
    }

    let max_eta = eta.iter().copied().fold(0.0, f64::max);
    let max_violation = violation
        .iter()
        .flat_map(|per_set| per_set.iter().copied())
        .fold(0.0, f64::max);
    Ok(ErrorReport {
        eta,
        max_eta,
        sample_times,
        samples_per_interval: spi,
        set_samples,
        violation,
        max_violation,
    })
}

/// Splits every out-of-tolerance interval and returns the refined mesh, or
/// `None` when the report is already within tolerance. Defect violations
/// split by the fifth root of the overshoot to match the spline's error
/// order; violation-only intervals split by the square root, since peak
/// overshoot of a grazed constraint shrinks quadratically with interval
/// length.
pub fn refine(mesh: &Mesh, report: &ErrorReport, tol: &Tolerances) -> Result<Option<Mesh>, Error> {
    let k_total = mesh.intervals();
    debug_assert_eq!(report.eta.len(), k_total);
    let mut parts = vec![1usize; k_total];
    let mut any = false;
    for k in 0..k_total {
        let worst_violation = report
            .violation
            .iter()
            .map(|per_set| per_set[k])
            .fold(0.0, f64::max);
        let pieces = if report.eta[k] > tol.eta_tol {
            ((report.eta[k] / tol.eta_tol).powf(0.2).ceil() as usize).clamp(2, MAX_SPLIT)
        } else if worst_violation > tol.eps_tol {
            ((worst_violation / tol.eps_tol).sqrt().ceil() as usize).clamp(2, MAX_SPLIT)
        } else {
            1
        };
        if pieces > 1 {
            any = true;
        }
        parts[k] = pieces;
    }
    if !any {
        return Ok(None);
    }
    let requested: usize = parts.iter().sum();
    if requested > MAX_INTERVALS {
        return Err(Error::MeshLimit { requested, cap: MAX_INTERVALS });
    }
    Ok(Some(mesh.split(&parts)?))
}

/// Packs `traj` onto the decision layout of `nlp`, clamping every entry into
/// its bound interval. Sampling at unchanged node times reproduces the
/// original values, so resampling onto the same mesh is the identity for
/// interior points.
pub fn resample(nlp: &DiscretizedNlp, traj: &Trajectory) -> Vec<f64> {
    let ocp = nlp.ocp();
    let (nx, nu, np) = (ocp.nx(), ocp.nu(), ocp.np());
    let mut z = vec![0.0; nlp.num_vars()];
    let mut x = vec![0.0; nx];
    let mut u = vec![0.0; nu];
    let t0 = ocp.t0();
    for i in 0..nlp.num_nodes() {
        let t = t0 + nlp.node_fractions()[i] * (traj.tf() - t0);
        traj.state_at(t, &mut x);
        traj.input_at(t, &mut u);
        for j in 0..nx {
            z[nlp.state_index(i, j)] = x[j];
        }
        for j in 0..nu {
            z[nlp.input_index(i, j)] = u[j];
        }
    }
    for j in 0..np {
        z[nlp.param_index(j)] = traj.params()[j];
    }
    if let Some(idx) = nlp.tf_index() {
        z[idx] = traj.tf();
    }
    let (lo, hi) = nlp.bounds();
    for j in 0..z.len() {
        z[j] = z[j].clamp(lo[j], hi[j]);
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::{ConstraintSet, TfSpec};
    use crate::transcribe::ActivationFilter;

    fn passthrough_ocp(nx: usize, nu: usize, tf: f64) -> Ocp {
        let mut b = Ocp::builder(nx, nu, 0, 0.0, TfSpec::Fixed(tf)).dynamics(|_x, _u, _t, _p, out| {
            out.iter_mut().for_each(|v| *v = 0.0);
        });
        b = b.state_bounds(vec![-1e6; nx], vec![1e6; nx]);
        if nu > 0 {
            b = b.input_bounds(vec![-1e6; nu], vec![1e6; nu]);
        }
        b.build().unwrap()
    }

    fn trajectory_of(
        ocp: &Ocp,
        mesh: &Mesh,
        state: impl Fn(f64) -> Vec<f64>,
        input: impl Fn(f64) -> Vec<f64>,
    ) -> Trajectory {
        let nlp = DiscretizedNlp::new(ocp, mesh, &ActivationFilter::all(ocp)).unwrap();
        let z = nlp.pack_profiles(&[], state, input);
        Trajectory::from_solution(&nlp, &z)
    }

    #[test]
    fn spline_reproduces_cubics_exactly() {
        let cubic = |t: f64| t * t * t - 2.0 * t * t + 0.5 * t + 1.0;
        let deriv = |t: f64| 3.0 * t * t - 4.0 * t + 0.5;
        let ocp = passthrough_ocp(1, 0, 2.0);
        let mesh = Mesh::from_fractions(vec![0.0, 0.15, 0.5, 0.8, 1.0]).unwrap();
        let traj = trajectory_of(&ocp, &mesh, |t| vec![cubic(t)], |_| vec![]);
        let mut out = [0.0];
        for q in 0..=200 {
            let t = 2.0 * q as f64 / 200.0;
            traj.state_at(t, &mut out);
            assert!((out[0] - cubic(t)).abs() < 1e-12, "value at t = {t}");
            traj.state_deriv_at(t, &mut out);
            assert!((out[0] - deriv(t)).abs() < 1e-11, "slope at t = {t}");
        }
    }

    #[test]
    fn spline_error_on_exponential_stays_below_bound() {
        let ocp = passthrough_ocp(1, 0, 1.0);
        let mesh = Mesh::uniform(10).unwrap();
        let traj = trajectory_of(&ocp, &mesh, |t| vec![t.exp()], |_| vec![]);
        let mut out = [0.0];
        let mut worst = 0.0f64;
        for q in 0..=2000 {
            let t = q as f64 / 2000.0;
            traj.state_at(t, &mut out);
            worst = worst.max((out[0] - t.exp()).abs());
        }
        assert!(worst <= 1e-5, "spline error {worst}");
        assert!(worst >= 1e-9, "implausibly exact: {worst}");
    }

    #[test]
    fn input_interpolation_is_exact_for_quadratics() {
        let quad = |t: f64| 0.7 * t * t - 1.3 * t + 2.0;
        let ocp = passthrough_ocp(1, 1, 3.0);
        let mesh = Mesh::from_fractions(vec![0.0, 0.4, 1.0]).unwrap();
        let traj = trajectory_of(&ocp, &mesh, |_| vec![0.0], |t| vec![quad(t)]);
        let mut out = [0.0];
        for q in 0..=300 {
            let t = 3.0 * q as f64 / 300.0;
            traj.input_at(t, &mut out);
            assert!((out[0] - quad(t)).abs() < 1e-12, "input at t = {t}");
        }
    }

    #[test]
    fn resample_onto_same_mesh_is_identity() {
        let ocp = passthrough_ocp(2, 1, 1.5);
        let mesh = Mesh::from_fractions(vec![0.0, 0.3, 0.65, 1.0]).unwrap();
        let nlp = DiscretizedNlp::new(&ocp, &mesh, &ActivationFilter::all(&ocp)).unwrap();
        let z = nlp.pack_profiles(
            &[],
            |t| vec![(1.3 * t).sin(), (0.9 * t).cos()],
            |t| vec![0.4 * t - 0.1],
        );
        let traj = Trajectory::from_solution(&nlp, &z);
        let back = resample(&nlp, &traj);
        for (j, (a, b)) in z.iter().zip(&back).enumerate() {
            assert!((a - b).abs() < 1e-12, "entry {j}: {a} vs {b}");
        }
    }

    #[test]
    fn resample_clamps_to_bounds() {
        let ocp = Ocp::builder(1, 0, 0, 0.0, TfSpec::Fixed(1.0))
            .dynamics(|_x, _u, _t, _p, out| out[0] = 0.0)
            .state_bounds(vec![-0.5], vec![0.5])
            .build()
            .unwrap();
        let coarse = Mesh::uniform(1).unwrap();
        let nlp0 = DiscretizedNlp::new(&ocp, &coarse, &ActivationFilter::all(&ocp)).unwrap();
        // Node values sit on the bound; between nodes the spline overshoots.
        let z = nlp0.pack_profiles(&[], |t| vec![if (t - 0.5).abs() < 0.26 { 0.5 } else { -0.5 }], |_| vec![]);
        let traj = Trajectory::from_solution(&nlp0, &z);
        let fine = Mesh::uniform(7).unwrap();
        let nlp1 = DiscretizedNlp::new(&ocp, &fine, &ActivationFilter::all(&ocp)).unwrap();
        let resampled = resample(&nlp1, &traj);
        let (lo, hi) = nlp1.bounds();
        for j in 0..resampled.len() {
            assert!(resampled[j] >= lo[j] && resampled[j] <= hi[j]);
        }
    }

    #[test]
    fn defect_integral_localises_dynamics_mismatch() {
        // x = t^2 under xdot = 0: the defect integrand is |2 t|, so interval
        // [a, b] scores b^2 - a^2 exactly (Simpson is exact for linear data).
        let ocp = passthrough_ocp(1, 0, 1.0);
        let mesh = Mesh::uniform(4).unwrap();
        let traj = trajectory_of(&ocp, &mesh, |t| vec![t * t], |_| vec![]);
        let report = error_analysis(&ocp, &traj, 10).unwrap();
        for k in 0..4 {
            let (a, b) = (0.25 * k as f64, 0.25 * (k + 1) as f64);
            let expect = b * b - a * a;
            assert!(
                (report.eta[k] - expect).abs() < 1e-10,
                "interval {k}: eta {} expect {expect}",
                report.eta[k]
            );
        }
        assert!((report.max_eta - report.eta[3]).abs() < 1e-15);
    }

    #[test]
    fn violation_sweep_finds_gap_between_nodes() {
        // Constraint peaks at t = 0.375, between the midpoint and endpoint
        // nodes of the first interval; every node value is feasible, so only
        // the dense sweep can catch the violation, and only in interval 0.
        let set = ConstraintSet::new("peak", 1, |_x, _u, t, _p, out| {
            out[0] = 0.1 - 10.0 * (t - 0.375) * (t - 0.375);
        });
        let ocp = Ocp::builder(1, 0, 0, 0.0, TfSpec::Fixed(1.0))
            .dynamics(|_x, _u, _t, _p, out| out[0] = 0.0)
            .constraint_set(set)
            .build()
            .unwrap();
        let mesh = Mesh::uniform(2).unwrap();
        let traj = trajectory_of(&ocp, &mesh, |_| vec![0.0], |_| vec![]);
        for &t in traj.times() {
            assert!(0.1 - 10.0 * (t - 0.375) * (t - 0.375) < 0.0, "node {t} infeasible");
        }
        let report = error_analysis(&ocp, &traj, 10).unwrap();
        // Closest samples to the peak sit at 0.35 and 0.40, both scoring
        // 0.09375 against a true peak of 0.1.
        assert!((report.max_violation - 0.09375).abs() < 1e-12);
        assert!(report.violation[0][0] > 0.0);
        assert_eq!(report.violation[0][1], 0.0);
        assert_eq!(report.set_samples[0][0].len(), report.sample_times.len());
    }

    #[test]
    fn refinement_loop_converges_on_exponential() {
        // Re-packing the analytic solution after each split models a solver
        // that returns the exact node values; the split rule must reach the
        // defect tolerance in a handful of rounds without over-splitting.
        let ocp = Ocp::builder(1, 0, 0, 0.0, TfSpec::Fixed(1.0))
            .dynamics(|x, _u, _t, _p, out| out[0] = x[0])
            .build()
            .unwrap();
        let tol = Tolerances::default();
        let mut mesh = Mesh::uniform(2).unwrap();
        let mut rounds = 0;
        loop {
            let traj = trajectory_of(&ocp, &mesh, |t| vec![t.exp()], |_| vec![]);
            let report = error_analysis(&ocp, &traj, 10).unwrap();
            match refine(&mesh, &report, &tol).unwrap() {
                Some(next) => {
                    assert!(next.intervals() > mesh.intervals());
                    mesh = next;
                }
                None => {
                    assert!(report.within(&tol));
                    break;
                }
            }
            rounds += 1;
            assert!(rounds <= 6, "refinement failed to settle");
        }
        assert!(mesh.intervals() <= 64, "over-split: {}", mesh.intervals());
    }

    #[test]
    fn violation_only_intervals_split_by_square_root_rule() {
        let mesh = Mesh::uniform(4).unwrap();
        let report = ErrorReport {
            eta: vec![0.0; 4],
            max_eta: 0.0,
            sample_times: vec![],
            samples_per_interval: 10,
            set_samples: vec![],
            violation: vec![vec![0.0, 9.0e-4, 0.0, 0.0]],
            max_violation: 9.0e-4,
        };
        let tol = Tolerances::default();
        let refined = refine(&mesh, &report, &tol).unwrap().unwrap();
        // sqrt(9e-4 / 1e-4) = 3 pieces for the violating interval only.
        assert_eq!(refined.intervals(), 4 + 2);
    }

    #[test]
    fn refinement_respects_interval_cap() {
        let mesh = Mesh::uniform(300).unwrap();
        let report = ErrorReport {
            eta: vec![1.0; 300],
            max_eta: 1.0,
            sample_times: vec![],
            samples_per_interval: 10,
            set_samples: vec![],
            violation: vec![],
            max_violation: 0.0,
        };
        let err = refine(&mesh, &report, &Tolerances::default()).unwrap_err();
        match err {
            Error::MeshLimit { requested, cap } => {
                assert_eq!(requested, 2400);
                assert_eq!(cap, MAX_INTERVALS);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
