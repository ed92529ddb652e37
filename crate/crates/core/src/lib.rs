//! Direct-collocation optimal control with a built-in interior-point solver
//! and run-time pruning of path constraints.
//!
//! The pieces, bottom to top:
//!
//! * [`ocp`]: problem statement. Dynamics, costs, grouped path constraints,
//!   boundary conditions, bounds.
//! * [`mesh`]: normalized collocation grids and their refinement.
//! * [`transcribe`]: separated Hermite-Simpson transcription of an [`ocp`]
//!   problem on a mesh, honoring an activation filter that decides which
//!   path-constraint rows are kept.
//! * [`nlp`]: the sparse primal-dual interior-point solver the transcription
//!   feeds into.
//! * [`interp`]: spline reconstruction of trajectories between nodes, the
//!   integrated dynamics-error measure, and error-driven mesh splitting.
//! * [`activity`]: deciding which constraint sets matter, where, from dense
//!   violation samples and segmented multiplier profiles.
//! * [`ech`]: the outer loop tying everything together, in two flavors:
//!   the pruning pipeline and the keep-everything baseline.

pub mod activity;
pub mod ech;
pub mod error;
pub mod interp;
pub mod mesh;
pub mod nlp;
pub mod ocp;
pub mod sparse;
pub mod transcribe;

pub use error::Error;

