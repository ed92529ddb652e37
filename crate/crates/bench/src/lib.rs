//! Benchmark harness for the constraint-pruning refinement loop: planar
//! avoidance problems with closed-form reference costs, a driver that runs
//! the pruning pipeline against the conventional one on identical inputs,
//! and report emission for tables, plot data, and machine-readable records.

pub mod compare;
pub mod config;
pub mod problems;
pub mod report;
