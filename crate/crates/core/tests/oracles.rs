//! End-to-end checks of the solvers against independent references.

use nalgebra::{DMatrix, DVector};

use game_ddp::diagnostics::{equilibrium_search_config, find_equilibrium, identity_checks};
use game_ddp::newton::{newton_step_dense, DenseOptions};
use game_ddp::problems::{
    build_lq_game, build_random_smooth_game, default_owner_dog, lq_data, LqOptions,
    RandomGameOptions,
};
use game_ddp::{
    evaluate_costs, newton_step_dp, rollout, solve, stack_inputs, unstack_inputs, AcceptRule,
    DerivativeMode, DerivativeProvider, GameProblem, SolveStatus, SolverConfig,
};

fn analytic(p: &GameProblem) -> DerivativeProvider {
    DerivativeProvider::for_problem(p, DerivativeMode::Analytic)
}

fn rel_gap(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

#[test]
fn dp_newton_step_matches_dense_solve_on_random_games() {
    for seed in 0..20 {
        let g = build_random_smooth_game(&RandomGameOptions {
            seed,
            ..Default::default()
        })
        .unwrap()
        .problem;
        let provider = analytic(&g);
        let traj = rollout(&g, &g.zero_inputs()).unwrap();
        let dense = newton_step_dense(&g, &traj, &provider, DenseOptions::default()).unwrap();
        let dp = stack_inputs(
            g.dims(),
            &newton_step_dp(&g, &traj, &provider, 0.0).unwrap(),
        )
        .unwrap();
        let gap = rel_gap(&dp, &dense.solution);
        assert!(gap <= 1e-6, "seed {seed}: {gap:e}");
    }
}

#[test]
fn dp_newton_step_matches_dense_solve_away_from_zero() {
    let g = build_random_smooth_game(&RandomGameOptions {
        seed: 4,
        players: 3,
        input_dims: vec![1, 2, 1],
        state_dim: 3,
        horizon: 4,
    })
    .unwrap()
    .problem;
    let provider = analytic(&g);
    let u = DVector::from_fn(g.dims().stacked_len(), |i, _| {
        0.3 * ((i as f64) * 0.7).sin()
    });
    let traj = rollout(&g, &unstack_inputs(g.dims(), &u).unwrap()).unwrap();
    let dense = newton_step_dense(&g, &traj, &provider, DenseOptions::default()).unwrap();
    let dp = stack_inputs(
        g.dims(),
        &newton_step_dp(&g, &traj, &provider, 0.0).unwrap(),
    )
    .unwrap();
    assert!(rel_gap(&dp, &dense.solution) <= 1e-6);
}

#[test]
fn lq_newton_step_lands_on_the_equilibrium() {
    for seed in 0..5 {
        let p = build_lq_game(&LqOptions {
            seed,
            ..LqOptions::default()
        })
        .unwrap();
        let provider = analytic(&p);
        let traj = rollout(&p, &p.zero_inputs()).unwrap();
        let dense = newton_step_dense(&p, &traj, &provider, DenseOptions::default()).unwrap();
        let dp = stack_inputs(
            p.dims(),
            &newton_step_dp(&p, &traj, &provider, 0.0).unwrap(),
        )
        .unwrap();
        assert!(rel_gap(&dp, &dense.solution) <= 1e-9, "seed {seed}");
        let (_, r) =
            game_ddp::residual(&p, &unstack_inputs(p.dims(), &dp).unwrap(), &provider).unwrap();
        assert!(r <= 1e-10, "seed {seed}: {r:e}");
    }
}

/// Solves the single-player LQ problem as one big least-squares system:
/// minimise Σ ½zᵀWz + qᵀz with x_{k+1} = A x_k + B u_k written out in u.
fn lqr_by_condensing(opts: &LqOptions) -> DVector<f64> {
    let d = lq_data(opts).unwrap();
    let (nx, nu, t) = (d.a.nrows(), d.b.ncols(), opts.horizon);
    let m = nu * (t + 1);
    // x_k = Φ_k x0 + Σ_{j<k} Ψ_{k,j} u_j
    let mut h = DMatrix::zeros(m, m);
    let mut g = DVector::zeros(m);
    for k in 0..=t {
        let mut phi = DMatrix::identity(nx, nx);
        for _ in 0..k {
            phi = &d.a * phi;
        }
        let mut psi = DMatrix::zeros(nx, m);
        for j in 0..k {
            let mut blk = d.b.clone();
            for _ in j + 1..k {
                blk = &d.a * blk;
            }
            psi.view_mut((0, j * nu), (nx, nu)).copy_from(&blk);
        }
        // z_k = [x_k; u_k] = C u + c
        let mut c = DMatrix::zeros(nx + nu, m);
        c.view_mut((0, 0), (nx, m)).copy_from(&psi);
        c.view_mut((nx, k * nu), (nu, nu))
            .copy_from(&DMatrix::identity(nu, nu));
        let mut c0 = DVector::zeros(nx + nu);
        c0.rows_mut(0, nx).copy_from(&(&phi * &d.x0));
        h += c.transpose() * &d.weights[0] * &c;
        g += c.transpose() * (&d.weights[0] * &c0 + &d.linear[0]);
    }
    h.lu().solve(&(-g)).unwrap()
}

#[test]
fn single_agent_solution_matches_condensed_lqr() {
    let opts = LqOptions {
        seed: 5,
        players: 1,
        input_dims: vec![2],
        state_dim: 3,
        horizon: 6,
        ..LqOptions::default()
    };
    let p = build_lq_game(&opts).unwrap();
    let config = SolverConfig {
        accept_rule: AcceptRule::Always,
        residual_tol: 1e-9,
        ..SolverConfig::default()
    };
    let (traj, report) = solve(&p, &p.zero_inputs(), &config, &analytic(&p)).unwrap();
    assert_eq!(report.status, SolveStatus::Converged);
    let u = stack_inputs(p.dims(), &traj.inputs).unwrap();
    let reference = lqr_by_condensing(&opts);
    assert!(
        rel_gap(&u, &reference) < 1e-9,
        "{:e}",
        rel_gap(&u, &reference)
    );
}

#[test]
fn identities_hold_on_random_games() {
    for seed in 0..5 {
        let g = build_random_smooth_game(&RandomGameOptions {
            seed,
            ..Default::default()
        })
        .unwrap()
        .problem;
        let u = DVector::from_fn(g.dims().stacked_len(), |i, _| {
            0.2 * (i as f64 + seed as f64).cos()
        });
        let traj = rollout(&g, &unstack_inputs(g.dims(), &u).unwrap()).unwrap();
        let r = identity_checks(&g, &traj, &analytic(&g)).unwrap();
        assert!(
            r.omega_max_rel <= 1e-5 && r.gradient_max_rel <= 1e-5,
            "seed {seed}: {r:?}"
        );
    }
}

#[test]
fn owner_dog_equilibrium_is_stationary_for_each_player() {
    let p = default_owner_dog();
    let eq = find_equilibrium(
        &p,
        &p.zero_inputs(),
        &analytic(&p),
        &equilibrium_search_config(),
        1e-12,
    )
    .unwrap();
    let dims = p.dims().clone();
    let u = stack_inputs(&dims, &eq.traj.inputs).unwrap();
    // Each player's own total cost is flat in its own inputs, checked by
    // differencing the costs directly.
    for n in 0..2 {
        for k in 0..=p.horizon() {
            let j = game_ddp::game::stacked_index(&dims, n, k, 0);
            let cost = |t: f64| {
                let mut w = u.clone();
                w[j] += t;
                evaluate_costs(
                    &p,
                    &rollout(&p, &unstack_inputs(&dims, &w).unwrap()).unwrap(),
                )
                .unwrap()
                .totals[n]
            };
            let slope = (cost(1e-5) - cost(-1e-5)) / 2e-5;
            assert!(slope.abs() < 1e-7, "player {n} stage {k}: {slope:e}");
            let curvature = (cost(1e-3) - 2.0 * cost(0.0) + cost(-1e-3)) / 1e-6;
            assert!(curvature > 0.0, "player {n} stage {k}");
        }
    }
}

#[test]
fn owner_dog_equilibrium_costs_are_pinned() {
    let p = default_owner_dog();
    let eq = find_equilibrium(
        &p,
        &p.zero_inputs(),
        &analytic(&p),
        &equilibrium_search_config(),
        1e-12,
    )
    .unwrap();
    let costs = evaluate_costs(&p, &eq.traj).unwrap().totals;
    approx::assert_relative_eq!(costs[0], 472.0098868862425, max_relative = 1e-9);
    approx::assert_relative_eq!(costs[1], 2.644311885054263, max_relative = 1e-9);
    let xt = eq.traj.states.last().unwrap();
    assert!((xt[0] - xt[1]).abs() < 1e-2);
}
