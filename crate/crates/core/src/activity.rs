//! Classification of path-constraint sets as potentially active or
//! potentially redundant, and construction of the buffered activation filter
//! that carries the classification into the next transcription.
//!
//! A node counts as potentially active when either the constraint comes
//! within `eps_tol` of its boundary somewhere in the node's dense sample
//! neighbourhood, or the node's segment of the normalised multiplier profile
//! averages at least `zeta`. Multiplier profiles are segmented by binary
//! changepoint search so one spiked node does not activate a whole horizon,
//! and profiles whose spread sits below the normalisation floor read as zero
//! everywhere, which keeps barrier-floor multiplier noise from resurrecting
//! constraints the solve never leaned on.

use crate::interp::{ErrorReport, Trajectory};
use crate::ocp::Ocp;
use crate::transcribe::{ActivationFilter, DiscretizedNlp, SetFilter};

/// Spread below this fraction of the profile's peak collapses the whole
/// profile to zero.
const NORMALIZATION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct ActivityConfig {
    /// Boundary proximity that flags a node, matching the violation
    /// tolerance of the mesh loop.
    pub eps_tol: f64,
    /// Smallest segment mean of the normalised multiplier profile that
    /// flags the segment's nodes.
    pub zeta: f64,
    /// Penalty per accepted changepoint in the multiplier segmentation.
    pub segmentation_penalty: f64,
}

impl Default for ActivityConfig {
    fn default() -> Self {
        ActivityConfig { eps_tol: 1e-4, zeta: 0.1, segmentation_penalty: 0.5 }
    }
}

/// Verdict for one constraint set, in the model's declaration order.
#[derive(Debug, Clone, PartialEq)]
pub enum SetStatus {
    /// Closed time intervals covering every flagged node, unbuffered.
    PotentiallyActive(Vec<[f64; 2]>),
    PotentiallyRedundant,
}

#[derive(Debug, Clone)]
pub struct ActivityReport {
    pub status: Vec<SetStatus>,
}

impl ActivityReport {
    pub fn is_redundant(&self, set: usize) -> bool {
        matches!(self.status[set], SetStatus::PotentiallyRedundant)
    }
}

/// Maps `values` onto `[0, 1]` by its own range; a spread at or below
/// `NORMALIZATION_FLOOR * (1 + max)` maps everything to zero.
pub fn normalize_profile(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = max - min;
    if !(spread > NORMALIZATION_FLOOR * (1.0 + max.abs())) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - min) / spread).collect()
}

fn segment_cost(prefix: &[f64], prefix_sq: &[f64], a: usize, b: usize) -> f64 {
    let len = (b - a) as f64;
    let sum = prefix[b] - prefix[a];
    let sq = prefix_sq[b] - prefix_sq[a];
    (sq - sum * sum / len).max(0.0)
}

/// Binary changepoint segmentation: recursively applies the best single
/// split while it lowers the squared-error cost by more than `penalty`,
/// breaking ties toward the earliest index. Returns sorted segment start
/// indices, excluding zero.
pub fn changepoints(values: &[f64], penalty: f64) -> Vec<usize> {
    let n = values.len();
    let mut prefix = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    for (i, &v) in values.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
        prefix_sq[i + 1] = prefix_sq[i] + v * v;
    }
    let mut cps = Vec::new();
    let mut stack = vec![(0usize, n)];
    while let Some((a, b)) = stack.pop() {
        if b - a < 2 {
            continue;
        }
        let whole = segment_cost(&prefix, &prefix_sq, a, b);
        let mut best_split = 0;
        let mut best_cost = f64::INFINITY;
        for s in a + 1..b {
            let cost = segment_cost(&prefix, &prefix_sq, a, s)
                + segment_cost(&prefix, &prefix_sq, s, b);
            if cost < best_cost {
                best_cost = cost;
                best_split = s;
            }
        }
        if whole - best_cost > penalty {
            cps.push(best_split);
            stack.push((best_split, b));
            stack.push((a, best_split));
        }
    }
    cps.sort_unstable();
    cps
}

/// Sorts and merges overlapping or touching closed intervals.
fn merge_intervals(mut intervals: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    intervals.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let mut merged: Vec<[f64; 2]> = Vec::with_capacity(intervals.len());
    for iv in intervals {
        match merged.last_mut() {
            Some(last) if iv[0] <= last[1] => last[1] = last[1].max(iv[1]),
            _ => merged.push(iv),
        }
    }
    merged
}

/// Closed intervals spanning each maximal run of flagged nodes.
fn runs_to_intervals(flags: &[bool], times: &[f64]) -> Vec<[f64; 2]> {
    let mut intervals = Vec::new();
    let mut start = None;
    for i in 0..flags.len() {
        match (flags[i], start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                intervals.push([times[s], times[i - 1]]);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        intervals.push([times[s], times[flags.len() - 1]]);
    }
    intervals
}

/// Classifies every constraint set of the solved problem. `multipliers` are
/// the inequality multipliers of the solution, ordered like
/// `nlp.row_infos()`; `report` must come from the same trajectory.
pub fn classify(
    nlp: &DiscretizedNlp,
    traj: &Trajectory,
    multipliers: &[f64],
    report: &ErrorReport,
    cfg: &ActivityConfig,
) -> ActivityReport {
    let ocp = nlp.ocp();
    let times = traj.times();
    let n = times.len();
    let sets = ocp.constraint_sets();

    // Multiplier profile per (set, row): implemented nodes ascending.
    let mut profiles: Vec<Vec<Vec<(usize, f64)>>> =
        sets.iter().map(|cs| vec![Vec::new(); cs.rows()]).collect();
    for (idx, info) in nlp.row_infos().iter().enumerate() {
        profiles[info.set][info.row_in_set].push((info.node, multipliers[idx]));
    }

    let mut status = Vec::with_capacity(sets.len());
    for (si, cs) in sets.iter().enumerate() {
        let mut intervals = Vec::new();
        let mut any_flagged = false;
        for r in 0..cs.rows() {
            let mut flags = vec![false; n];

            let samples = &report.set_samples[si][r];
            for i in 0..n {
                let t_lo = times[i.saturating_sub(1)];
                let t_hi = times[(i + 1).min(n - 1)];
                let q_lo = report.sample_times.partition_point(|&t| t < t_lo);
                let q_hi = report.sample_times.partition_point(|&t| t <= t_hi);
                let peak = samples[q_lo..q_hi]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                if peak >= -cfg.eps_tol {
                    flags[i] = true;
                }
            }

            let profile = &profiles[si][r];
            if !profile.is_empty() {
                let raw: Vec<f64> = profile.iter().map(|&(_, m)| m).collect();
                let normalized = normalize_profile(&raw);
                let cps = changepoints(&normalized, cfg.segmentation_penalty);
                let mut seg_start = 0;
                for seg_end in cps.iter().copied().chain([normalized.len()]) {
                    let mean: f64 = normalized[seg_start..seg_end].iter().sum::<f64>()
                        / (seg_end - seg_start) as f64;
                    if mean >= cfg.zeta {
                        for &(node, _) in &profile[seg_start..seg_end] {
                            flags[node] = true;
                        }
                    }
                    seg_start = seg_end;
                }
            }

            if flags.iter().any(|f| *f) {
                any_flagged = true;
                intervals.extend(runs_to_intervals(&flags, times));
            }
        }
        status.push(if any_flagged {
            SetStatus::PotentiallyActive(merge_intervals(intervals))
        } else {
            SetStatus::PotentiallyRedundant
        });
    }
    ActivityReport { status }
}

/// Builds the activation filter for the next transcription: active sets keep
/// their intervals widened by `beta` on both sides (merged, clamped to the
/// horizon, promoted to full activation once they cover it), redundant sets
/// drop out entirely. A buffer at or beyond the horizon length pins every
/// set, redundant ones included, to full activation.
pub fn buffered_filter(
    ocp: &Ocp,
    activity: &ActivityReport,
    beta: f64,
    t0: f64,
    tf: f64,
) -> ActivationFilter {
    debug_assert_eq!(activity.status.len(), ocp.constraint_sets().len());
    if beta >= tf - t0 {
        return ActivationFilter::all(ocp);
    }
    let free_tf = matches!(ocp.tf_spec(), crate::ocp::TfSpec::Free { .. });
    let mut filter = ActivationFilter::none(ocp);
    for (si, st) in activity.status.iter().enumerate() {
        let windows = match st {
            SetStatus::PotentiallyRedundant => continue,
            // Time windows pin constraint rows to absolute times, which is
            // meaningless while the horizon itself is a decision variable:
            // an active set keeps full coverage instead.
            SetStatus::PotentiallyActive(_) if free_tf => {
                let name = ocp.constraint_sets()[si].name().to_string();
                filter
                    .set(ocp, &name, SetFilter::All)
                    .expect("set names come from the model itself");
                continue;
            }
            SetStatus::PotentiallyActive(intervals) => {
                let widened: Vec<[f64; 2]> = intervals
                    .iter()
                    .map(|iv| [(iv[0] - beta).max(t0), (iv[1] + beta).min(tf)])
                    .collect();
                merge_intervals(widened)
            }
        };
        let name = ocp.constraint_sets()[si].name().to_string();
        let full = windows.len() == 1 && windows[0][0] <= t0 && windows[0][1] >= tf;
        let choice = if full { SetFilter::All } else { SetFilter::Windows(windows) };
        filter
            .set(ocp, &name, choice)
            .expect("filter windows come from the model's own sets and horizon");
    }
    filter
}
