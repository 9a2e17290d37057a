mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Exit codes shared by all commands.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const MAX_ITERS: u8 = 2;
    pub const REG_EXHAUSTED: u8 = 3;
    pub const CAP_EXCEEDED: u8 = 4;
    pub const NOT_CERTIFIED: u8 = 5;
    pub const DERIVATIVE_MISMATCH: u8 = 6;
    pub const NEWTON_GAP: u8 = 7;
}

fn configure_threads() -> anyhow::Result<()> {
    let threads = match std::env::var("GAME_DDP_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| {
            anyhow::anyhow!("GAME_DDP_THREADS must be a non-negative integer, got `{v}`")
        })?,
        Err(_) => 0,
    };
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(exit::USAGE);
    }
    let result = match cli.command {
        Command::Solve(a) => commands::solve(&a),
        Command::CompareNewton(a) => commands::compare_newton(&a),
        Command::ConvergenceStudy(a) => commands::convergence_study(&a),
        Command::CheckDerivatives(a) => commands::check_derivatives(&a),
        Command::ListProblems => commands::list_problems(),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::USAGE)
        }
    }
}
