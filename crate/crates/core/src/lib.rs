//! Open-loop Nash equilibria of discrete-time nonlinear dynamic games by
//! differential dynamic programming, with an exact Newton step to check it
//! against.

pub mod ddp;
pub mod diagnostics;
pub mod diff;
pub mod error;
pub mod game;
pub mod io;
pub mod linalg;
pub mod newton;
pub mod problems;
pub mod stagegame;

mod recursion;

pub use ddp::{
    ddp_backward, ddp_forward, residual, solve, AcceptRule, BackwardPassResult, IterationRecord,
    SolveReport, SolveStatus, SolverConfig,
};
pub use diff::{
    quadraticize, DerivativeMode, DerivativeProvider, Quadraticization, StageQuadraticization,
};
pub use error::{Error, Result};
pub use game::{
    evaluate_costs, rollout, stack_inputs, unstack_inputs, GameDims, GameProblem, PlayerCosts,
    Trajectory,
};
pub use newton::{
    newton_backward, newton_step_dense, newton_step_dp, DenseNewtonSystem, NewtonBackwardResult,
};
pub use problems::ProblemSpec;
