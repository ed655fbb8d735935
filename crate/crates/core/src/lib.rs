//! Calibrated chi-square distributionally robust constraints.
//!
//! Expected-value constraints `E g(θ; Z) ≤ 0` are replaced by their
//! worst case over a chi-square ball around the empirical distribution,
//! with the radius chosen so the population constraint holds with a
//! prescribed probability. The crate provides the robust evaluators,
//! dual-ascent solvers, radius calibration, two example problem families
//! (newsvendor and fair classification) and a replicate harness.

pub mod calibration;
pub mod divergence;
pub mod error;
pub mod fairness;
pub mod harness;
pub mod newsvendor;
pub mod optim;
pub mod probstats;
pub mod program;
pub mod robust_eval;
pub mod solver;

pub use error::{Error, Result};
pub use program::{ConstraintSpec, FnSample, Linear, ParamBox, PerSample, RobustProgram, SampleSet};
pub use robust_eval::{ConstraintValues, InnerDualVars, RobustValue};
pub use solver::{DualState, EtaSchedule, SolveResult, SolverConfig, TraceEntry};
