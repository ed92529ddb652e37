//! Desk-scale avoidance benchmark: a planar point mass flies from a fixed
//! start to a fixed goal position over a fixed horizon, minimizing the
//! integral of squared acceleration, while staying outside a set of circular
//! no-fly zones. Zone placement is chosen so that the straight start-goal
//! transit clips a strict minority of the zones, which is the regime the
//! pruning pipeline is built for.

use echopt::ech::InitialGuess;
use echopt::mesh::Mesh;
use echopt::ocp::{ConstraintSet, Ocp, TfSpec};
use echopt::Error;
use serde::{Deserialize, Serialize};

/// Circular exclusion region in the north/east plane, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nfz {
    pub north: f64,
    pub east: f64,
    pub radius: f64,
}

impl Nfz {
    /// Signed rim distance of a point: negative inside, zero on the rim.
    pub fn clearance(&self, north: f64, east: f64) -> f64 {
        let dn = north - self.north;
        let de = east - self.east;
        (dn * dn + de * de).sqrt() - self.radius
    }

    /// Whether the closed segment from `a` to `b` enters the open disc.
    pub fn intersects_segment(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        let d = [b[0] - a[0], b[1] - a[1]];
        let w = [self.north - a[0], self.east - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let s = if len2 > 0.0 { ((w[0] * d[0] + w[1] * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let dn = w[0] - s * d[0];
        let de = w[1] - s * d[1];
        dn * dn + de * de < self.radius * self.radius
    }
}

/// Everything that defines one benchmark instance. States are
/// `[pos_north, pos_east, vel_north, vel_east]`, inputs are the two
/// acceleration components, the cost is the integral of `|a|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchProblemSpec {
    pub name: String,
    /// Horizon start, seconds. The final time is fixed.
    pub t0: f64,
    pub tf: f64,
    /// Full start state `[pN, pE, vN, vE]`.
    pub start: [f64; 4],
    /// Goal position `[pN, pE]`; the final velocity is free.
    pub goal: [f64; 2],
    /// Symmetric per-axis acceleration bound, m/s^2.
    pub accel_limit: f64,
    pub nfzs: Vec<Nfz>,
    /// Interval count of the initial uniform mesh.
    pub intervals: usize,
}

impl BenchProblemSpec {
    /// Five zones around a 100 s, 100 m transit. The straight start-goal
    /// segment clips zones "nfz1" and "nfz4" only; the other three sit far
    /// enough aside that the optimizer never touches them.
    pub fn nfz5() -> Self {
        Self {
            name: "nfz5".into(),
            t0: 0.0,
            tf: 100.0,
            start: [0.0, 0.0, 0.0, 0.0],
            goal: [100.0, 0.0],
            accel_limit: 1.0,
            nfzs: vec![
                Nfz { north: 22.0, east: 8.5, radius: 10.0 },
                Nfz { north: 35.0, east: 30.0, radius: 12.0 },
                Nfz { north: 50.0, east: -25.0, radius: 10.0 },
                Nfz { north: 70.0, east: -9.0, radius: 10.5 },
                Nfz { north: 85.0, east: 26.0, radius: 9.0 },
            ],
            intervals: 16,
        }
    }

    /// Same transit with nothing to avoid; the optimum is the analytic
    /// minimum-effort straight line.
    pub fn no_nfz() -> Self {
        Self { name: "no_nfz".into(), nfzs: vec![], ..Self::nfz5() }
    }

    /// One zone centered on the straight transit, so the path must bend.
    pub fn single_nfz() -> Self {
        Self {
            name: "single_nfz".into(),
            nfzs: vec![Nfz { north: 50.0, east: 0.0, radius: 10.0 }],
            ..Self::nfz5()
        }
    }

    pub fn by_name(name: &str) -> Result<Self, Error> {
        match name {
            "nfz5" => Ok(Self::nfz5()),
            "no_nfz" => Ok(Self::no_nfz()),
            "single_nfz" => Ok(Self::single_nfz()),
            other => Err(Error::ModelInvalid {
                reason: format!(
                    "unknown benchmark problem {other:?}; expected nfz5, no_nfz, or single_nfz"
                ),
            }),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let invalid = |reason: String| Err(Error::ModelInvalid { reason });
        if !(self.t0.is_finite() && self.tf.is_finite() && self.tf > self.t0) {
            return invalid(format!("horizon [{}, {}] is not increasing", self.t0, self.tf));
        }
        if !(self.accel_limit.is_finite() && self.accel_limit > 0.0) {
            return invalid(format!("acceleration limit {} must be positive", self.accel_limit));
        }
        if self.intervals == 0 {
            return invalid("initial mesh needs at least one interval".into());
        }
        if self.start.iter().any(|v| !v.is_finite()) || self.goal.iter().any(|v| !v.is_finite()) {
            return invalid("start state and goal position must be finite".into());
        }
        for (i, z) in self.nfzs.iter().enumerate() {
            if !(z.radius.is_finite() && z.radius > 0.0) {
                return invalid(format!("zone {} radius {} must be positive", i + 1, z.radius));
            }
            if !(z.north.is_finite() && z.east.is_finite()) {
                return invalid(format!("zone {} center must be finite", i + 1));
            }
            if z.clearance(self.start[0], self.start[1]) <= 0.0 {
                return invalid(format!("start position lies inside zone {}", i + 1));
            }
            if z.clearance(self.goal[0], self.goal[1]) <= 0.0 {
                return invalid(format!("goal position lies inside zone {}", i + 1));
            }
        }
        Ok(())
    }

    /// Builds the continuous model and the initial uniform mesh.
    pub fn build(&self) -> Result<BenchProblem, Error> {
        self.validate()?;
        // node_dim for derivative buffers: 4 states + 2 inputs + clock.
        const D: usize = 7;
        let a = self.accel_limit;
        let start = self.start;
        let goal = self.goal;

        let mut builder = Ocp::builder(4, 2, 0, self.t0, TfSpec::Fixed(self.tf))
            .state_names(&["pos_north", "pos_east", "vel_north", "vel_east"])
            .input_names(&["acc_north", "acc_east"])
            .dynamics(|x, u, _t, _p, out| {
                out[0] = x[2];
                out[1] = x[3];
                out[2] = u[0];
                out[3] = u[1];
            })
            .dynamics_jacobian(|_x, _u, _t, _p, out| {
                out.fill(0.0);
                out[2] = 1.0;
                out[D + 3] = 1.0;
                out[2 * D + 4] = 1.0;
                out[3 * D + 5] = 1.0;
            })
            .dynamics_hessian(|_x, _u, _t, _p, _w, out| out.fill(0.0))
            .running_cost(|_x, u, _t, _p| u[0] * u[0] + u[1] * u[1])
            .running_cost_gradient(|_x, u, _t, _p, out| {
                out.fill(0.0);
                out[4] = 2.0 * u[0];
                out[5] = 2.0 * u[1];
            })
            .running_cost_hessian(|_x, _u, _t, _p, out| {
                out.fill(0.0);
                out[4 * D + 4] = 2.0;
                out[5 * D + 5] = 2.0;
            })
            .input_bounds(vec![-a, -a], vec![a, a])
            .boundary(6, move |x0, xf, _tf, _p, out| {
                out[0] = x0[0] - start[0];
                out[1] = x0[1] - start[1];
                out[2] = x0[2] - start[2];
                out[3] = x0[3] - start[3];
                out[4] = xf[0] - goal[0];
                out[5] = xf[1] - goal[1];
            });

        for (i, z) in self.nfzs.iter().enumerate() {
            let Nfz { north, east, radius } = *z;
            // Normalized by radius^2 so every zone's violation is O(1)
            // regardless of its size; raw squared-meter rows would dwarf the
            // effort objective and stall the barrier schedule.
            let inv_r2 = 1.0 / (radius * radius);
            let set = ConstraintSet::new(format!("nfz{}", i + 1), 1, move |x, _u, _t, _p, out| {
                let dn = x[0] - north;
                let de = x[1] - east;
                out[0] = 1.0 - (dn * dn + de * de) * inv_r2;
            })
            .with_jacobian(move |x, _u, _t, _p, out| {
                out.fill(0.0);
                out[0] = -2.0 * (x[0] - north) * inv_r2;
                out[1] = -2.0 * (x[1] - east) * inv_r2;
            })
            .with_hessian(move |_x, _u, _t, _p, w, out| {
                out.fill(0.0);
                out[0] = -2.0 * w[0] * inv_r2;
                out[D + 1] = -2.0 * w[0] * inv_r2;
            });
            builder = builder.constraint_set(set);
        }

        let ocp = builder.build()?;
        let mesh = Mesh::uniform(self.intervals)?;
        Ok(BenchProblem { spec: self.clone(), ocp, mesh })
    }
}

/// A built benchmark instance: the immutable spec it came from, the
/// continuous model, and the initial mesh.
pub struct BenchProblem {
    pub spec: BenchProblemSpec,
    pub ocp: Ocp,
    pub mesh: Mesh,
}

/// Lateral Gaussian detour around one crossed zone, in transit-fraction
/// coordinates.
#[derive(Debug, Clone, Copy)]
struct Bump {
    s_center: f64,
    sigma: f64,
    amp: [f64; 2],
}

/// Summed bump offsets and their first two derivatives with respect to the
/// transit fraction.
fn bump_offsets(bumps: &[Bump], s: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
    let (mut off, mut doff, mut ddoff) = ([0.0; 2], [0.0; 2], [0.0; 2]);
    for b in bumps {
        let u = (s - b.s_center) / b.sigma;
        let g = (-u * u).exp();
        let dg = -2.0 * u / b.sigma * g;
        let ddg = (4.0 * u * u - 2.0) / (b.sigma * b.sigma) * g;
        for k in 0..2 {
            off[k] += b.amp[k] * g;
            doff[k] += b.amp[k] * dg;
            ddoff[k] += b.amp[k] * ddg;
        }
    }
    (off, doff, ddoff)
}

impl BenchProblem {
    /// Nominal route: the straight transit plus one lateral Gaussian bump
    /// per crossed zone, pushed past the rim with margin, the way a flight
    /// plan would be seeded. Velocity and acceleration are the exact path
    /// derivatives, so the guess is close to feasible on every row and the
    /// first solve starts in the solver's strong regime.
    pub fn initial_guess(&self) -> InitialGuess {
        let t0 = self.spec.t0;
        let horizon = self.spec.tf - t0;
        let a = [self.spec.start[0], self.spec.start[1]];
        let d = [self.spec.goal[0] - a[0], self.spec.goal[1] - a[1]];
        let bumps = self.detour_bumps();

        let state_bumps = bumps.clone();
        let state = move |t: f64| {
            let s = (t - t0) / horizon;
            let (off, doff, _) = bump_offsets(&state_bumps, s);
            vec![
                a[0] + s * d[0] + off[0],
                a[1] + s * d[1] + off[1],
                (d[0] + doff[0]) / horizon,
                (d[1] + doff[1]) / horizon,
            ]
        };
        let input = move |t: f64| {
            let s = (t - t0) / horizon;
            let (_, _, ddoff) = bump_offsets(&bumps, s);
            vec![ddoff[0] / (horizon * horizon), ddoff[1] / (horizon * horizon)]
        };
        InitialGuess::new(vec![], state, input)
    }

    /// One lateral bump per zone the straight segment crosses, directed away
    /// from the zone center (or to the left of travel when the center sits
    /// on the segment) and sized to clear the rim by nearly half the radius.
    fn detour_bumps(&self) -> Vec<Bump> {
        let a = [self.spec.start[0], self.spec.start[1]];
        let d = [self.spec.goal[0] - a[0], self.spec.goal[1] - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        if len2 == 0.0 {
            return vec![];
        }
        let len = len2.sqrt();
        self.spec
            .nfzs
            .iter()
            .filter(|z| z.intersects_segment(a, self.spec.goal))
            .map(|z| {
                let s_c =
                    (((z.north - a[0]) * d[0] + (z.east - a[1]) * d[1]) / len2).clamp(0.0, 1.0);
                let v = [a[0] + s_c * d[0] - z.north, a[1] + s_c * d[1] - z.east];
                let dist = (v[0] * v[0] + v[1] * v[1]).sqrt();
                let n = if dist > 1e-9 * z.radius {
                    [v[0] / dist, v[1] / dist]
                } else {
                    [-d[1] / len, d[0] / len]
                };
                let h = 1.45 * z.radius - dist;
                Bump {
                    s_center: s_c,
                    sigma: z.radius / len,
                    amp: [h * n[0], h * n[1]],
                }
            })
            .collect()
    }

    /// Zones whose discs the straight start-goal segment enters, as
    /// zero-based indices into the spec's list.
    pub fn crossed_by_straight_line(&self) -> Vec<usize> {
        let a = [self.spec.start[0], self.spec.start[1]];
        let b = self.spec.goal;
        self.spec
            .nfzs
            .iter()
            .enumerate()
            .filter(|(_, z)| z.intersects_segment(a, b))
            .map(|(i, _)| i)
            .collect()
    }
}
