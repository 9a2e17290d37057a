use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "game-ddp",
    version,
    about = "Open-loop Nash equilibria of dynamic games by game-DDP"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the DDP solver and write the trajectory and iteration report.
    Solve(SolveArgs),
    /// Compare the stagewise Newton step against the dense finite-difference solve.
    CompareNewton(CompareArgs),
    /// Closeness of DDP and Newton steps near an equilibrium, and convergence orders.
    ConvergenceStudy(StudyArgs),
    /// Check analytic derivatives against finite differences.
    CheckDerivatives(CheckArgs),
    /// List the built-in problems.
    ListProblems,
}

#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    /// Built-in problem id (see `list-problems`).
    #[arg(long, required_unless_present = "config")]
    pub problem: Option<String>,
    /// TOML or JSON file with `problem = "<id>"` and its parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for seeded problems and random directions.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override a problem parameter, e.g. `--param T=20` or `--param x0=-1,2`.
    #[arg(long = "param", value_name = "NAME=VALUE")]
    pub params: Vec<String>,
    /// Where derivatives come from.
    #[arg(long, value_enum, default_value_t = ProviderArg::Hybrid)]
    pub provider: ProviderArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderArg {
    Analytic,
    Fd,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlphaSearch {
    Halving,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AcceptArg {
    Always,
    AnyPlayerCostDecrease,
    ResidualDecrease,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Residual tolerance on `‖𝒥(u)‖∞`.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Fixed regularization λ. Steps are then taken unconditionally at full length
    /// unless `--accept` or `--alpha-search` say otherwise.
    #[arg(long, value_name = "LAMBDA", conflicts_with = "reg_adaptive")]
    pub reg: Option<f64>,
    /// Adaptive regularization starting from this λ.
    #[arg(long, value_name = "LAMBDA0", num_args = 0..=1, default_missing_value = "0")]
    pub reg_adaptive: Option<f64>,
    #[arg(long, value_enum)]
    pub alpha_search: Option<AlphaSearch>,
    #[arg(long, value_enum)]
    pub accept: Option<AcceptArg>,
    /// Starting inputs as a trajectory CSV; zero inputs otherwise.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also write the derivative data at the final trajectory.
    #[arg(long)]
    pub dump_derivatives: bool,
    /// Also write the dense Newton system at the final trajectory.
    #[arg(long)]
    pub dump_newton: bool,
    /// Write the trajectory every N accepted iterations under `snapshots/`.
    #[arg(long, value_name = "N")]
    pub snapshot_every: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Trajectory CSV whose inputs are the linearization point; zero inputs otherwise.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub rtol: f64,
    /// Largest number of stacked inputs the dense oracle will take.
    #[arg(long, default_value_t = game_ddp::newton::DENSE_ORACLE_CAP)]
    pub cap: usize,
    /// Directory for `newton.json`; nothing is written without it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StudyArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Perturbation sizes, strictly decreasing.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "1e-1,3e-2,1e-2,3e-3,1e-3"
    )]
    pub epsilons: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub directions: usize,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, default_value_t = 1e-5)]
    pub max_rel_err: f64,
    /// Shift the analytic dynamics Jacobian by 0.1 to exercise the failure path.
    #[arg(long)]
    pub inject_fault: bool,
    /// Trajectory CSV to check along; zero inputs otherwise.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
}
