//! Feasibility-driven DDP with optional box constraints on the controls.

pub mod boxqp;
pub mod problem;
pub mod solver;

pub use boxqp::{box_qp, BoxQpResult, BoxQpSettings};
pub use problem::{
    ControlBounds, DiscreteDynamics, Linearization, RunningNode, ShootingProblem, StageCost,
};
pub use solver::{compute_gaps, IterationRecord, Solution, Solver, SolverKind, SolverSettings};
