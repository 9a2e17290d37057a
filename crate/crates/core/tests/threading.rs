//! Results must not depend on how many worker threads rayon uses.

use game_ddp::diagnostics::{
    closeness_study, equilibrium_search_config, find_equilibrium, random_directions,
};
use game_ddp::newton::{newton_step_dense, DenseOptions};
use game_ddp::problems::{build_random_smooth_game, default_owner_dog, RandomGameOptions};
use game_ddp::{quadraticize, rollout, solve, DerivativeMode, DerivativeProvider, SolverConfig};

fn with_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .unwrap()
        .install(f)
}

#[test]
fn solver_and_oracles_are_bit_identical_across_thread_counts() {
    let p = default_owner_dog();
    let provider = DerivativeProvider::for_problem(&p, DerivativeMode::Hybrid);
    let fd = DerivativeProvider::finite_difference();
    let run = || {
        let (traj, report) = solve(
            &p,
            &p.zero_inputs(),
            &SolverConfig::fixed_lambda(400.0),
            &provider,
        )
        .unwrap();
        let quads = quadraticize(&p, &traj, &fd).unwrap();
        let dense = newton_step_dense(&p, &traj, &fd, DenseOptions::default()).unwrap();
        (traj, report.records, quads, dense)
    };
    let one = with_threads(1, run);
    let four = with_threads(4, run);
    assert_eq!(one, four);
}

#[test]
fn closeness_study_is_bit_identical_across_thread_counts() {
    let g = build_random_smooth_game(&RandomGameOptions {
        seed: 3,
        ..Default::default()
    })
    .unwrap()
    .problem;
    let provider = DerivativeProvider::for_problem(&g, DerivativeMode::Analytic);
    let eq = find_equilibrium(
        &g,
        &g.zero_inputs(),
        &provider,
        &equilibrium_search_config(),
        1e-12,
    )
    .unwrap();
    let dirs = random_directions(g.dims().stacked_len(), 3, 9);
    let run =
        || closeness_study(&g, &eq.traj.inputs, &dirs, &[1e-1, 1e-2, 1e-3], &provider).unwrap();
    assert_eq!(with_threads(1, run), with_threads(4, run));
    let base = rollout(&g, &eq.traj.inputs).unwrap();
    assert_eq!(base, eq.traj);
}
