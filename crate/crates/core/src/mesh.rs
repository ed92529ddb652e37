//! Collocation meshes as normalized interval fractions.
//!
//! A mesh is a strictly increasing sequence `0 = tau_0 < ... < tau_K = 1`;
//! interval `k` spans `[tau_k, tau_{k+1}]` and maps to real time through
//! `t = t0 + tau (tf - t0)`. Keeping the mesh normalized lets free-final-time
//! problems reuse it unchanged: only the scale factor moves.

use crate::error::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    fractions: Vec<f64>,
}

impl Mesh {
    pub fn uniform(intervals: usize) -> Result<Self, Error> {
        if intervals == 0 {
            return Err(Error::BadMesh { reason: "need at least one interval".into() });
        }
        let fractions = (0..=intervals).map(|k| k as f64 / intervals as f64).collect();
        Ok(Self { fractions })
    }

    pub fn from_fractions(fractions: Vec<f64>) -> Result<Self, Error> {
        if fractions.len() < 2 {
            return Err(Error::BadMesh { reason: "need at least two breakpoints".into() });
        }
        if fractions[0] != 0.0 || *fractions.last().unwrap() != 1.0 {
            return Err(Error::BadMesh {
                reason: format!(
                    "breakpoints must span [0, 1], got [{}, {}]",
                    fractions[0],
                    fractions.last().unwrap()
                ),
            });
        }
        for pair in fractions.windows(2) {
            if !(pair[1] > pair[0]) {
                return Err(Error::BadMesh {
                    reason: format!("breakpoints must strictly increase, got {} then {}", pair[0], pair[1]),
                });
            }
        }
        if fractions.iter().any(|f| !f.is_finite()) {
            return Err(Error::BadMesh { reason: "breakpoints must be finite".into() });
        }
        Ok(Self { fractions })
    }

    pub fn intervals(&self) -> usize {
        self.fractions.len() - 1
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    /// Collocation nodes: every breakpoint plus every interval midpoint,
    /// `2 K + 1` of them in increasing order.
    pub fn node_fractions(&self) -> Vec<f64> {
        let mut nodes = Vec::with_capacity(2 * self.intervals() + 1);
        for pair in self.fractions.windows(2) {
            nodes.push(pair[0]);
            nodes.push(0.5 * (pair[0] + pair[1]));
        }
        nodes.push(1.0);
        nodes
    }

    pub fn num_nodes(&self) -> usize {
        2 * self.intervals() + 1
    }

    /// Splits interval `k` into `parts[k]` equal pieces. Entries of 1 leave
    /// the interval alone; entries of 0 are invalid.
    pub fn split(&self, parts: &[usize]) -> Result<Self, Error> {
        if parts.len() != self.intervals() {
            return Err(Error::BadMesh {
                reason: format!("expected {} split counts, got {}", self.intervals(), parts.len()),
            });
        }
        if parts.contains(&0) {
            return Err(Error::BadMesh { reason: "cannot split an interval into zero parts".into() });
        }
        let mut fractions = Vec::with_capacity(parts.iter().sum::<usize>() + 1);
        for (k, pair) in self.fractions.windows(2).enumerate() {
            let width = pair[1] - pair[0];
            for i in 0..parts[k] {
                fractions.push(pair[0] + width * i as f64 / parts[k] as f64);
            }
        }
        fractions.push(1.0);
        Self::from_fractions(fractions)
    }
}
