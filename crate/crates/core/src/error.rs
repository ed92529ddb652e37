use thiserror::Error;

/// Failures surfaced by problem construction, transcription, the solver, and
/// the outer constraint-handling loop. Programmer errors (dimension
/// mismatches, out-of-range indices in patterns) panic instead.
#[derive(Debug, Error)]
pub enum Error {
    /// A user callback produced NaN or infinity. `index` is the offending
    /// position within the named quantity.
    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    /// The problem statement is self-contradictory (bad bounds, missing
    /// dynamics, inverted time interval, duplicate set names, ...).
    #[error("invalid problem: {reason}")]
    ModelInvalid { reason: String },

    /// Mesh fractions must start at 0, end at 1, and strictly increase.
    #[error("mesh fractions must rise strictly from 0 to 1: {reason}")]
    BadMesh { reason: String },

    /// A filter window references a constraint set name the problem lacks.
    #[error("unknown constraint set `{name}`")]
    UnknownConstraintSet { name: String },

    /// Filter windows must satisfy a <= b and overlap the horizon.
    #[error("bad activation window [{a}, {b}] for `{name}`")]
    BadFilterWindow { name: String, a: f64, b: f64 },

    /// Mesh refinement wants more intervals than the configured cap.
    #[error("mesh refinement needs {requested} intervals, cap is {cap}")]
    MeshLimit { requested: usize, cap: usize },

    /// The feasibility subproblem finished with a positive slack optimum, so
    /// no trajectory satisfies the full constraint set on this mesh.
    #[error("problem infeasible: slack objective {objective:.3e} exceeds {tolerance:.3e}")]
    Infeasible { objective: f64, tolerance: f64 },

    /// The slack subproblem itself failed to converge, so feasibility could
    /// not be decided.
    #[error("feasibility subproblem did not converge ({detail})")]
    FeasibilityUndecided { detail: String },

    /// An NLP solve inside the mesh-refinement loop ended in a state the
    /// loop cannot recover from.
    #[error("solve failed at refinement iteration {iteration}: {detail}")]
    SolveFailed { iteration: usize, detail: String },
}
