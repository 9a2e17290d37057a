//! Empirical checks of how DDP and Newton steps relate near an equilibrium,
//! and convergence-order estimates from iterate logs.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::ddp::{ddp_backward, ddp_forward, solve, AcceptRule, SolveReport, SolverConfig};
use crate::diff::{quadraticize, DerivativeProvider};
use crate::error::{Error, Result};
use crate::game::{rollout, stack_inputs, unstack_inputs, GameProblem, Trajectory};
use crate::linalg::vec_inf_norm;
use crate::newton::{necessary_conditions, newton_backward, propagate_linear};

/// Smallest perturbation a closeness study accepts.
pub const EPSILON_FLOOR: f64 = 1e-6;
/// Residual an equilibrium must reach before it is used as a reference.
pub const CERTIFY_TOL: f64 = 1e-8;

fn residual_of(
    problem: &GameProblem,
    traj: &Trajectory,
    provider: &DerivativeProvider,
) -> Result<f64> {
    let quads = quadraticize(problem, traj, provider)?;
    Ok(vec_inf_norm(&necessary_conditions(&quads.linearization())))
}

/// Full Newton steps (`λ = 0`) on `𝒥(u) = 0`. Returns the iterates,
/// starting with the rollout of `start`, and their residuals.
pub fn newton_iterates(
    problem: &GameProblem,
    start: &[DVector<f64>],
    provider: &DerivativeProvider,
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<Trajectory>, Vec<f64>)> {
    let mut traj = rollout(problem, start)?;
    let mut residuals = vec![residual_of(problem, &traj, provider)?];
    let mut iterates = vec![traj.clone()];
    for _ in 0..max_iters {
        if *residuals.last().unwrap() <= tol {
            break;
        }
        let quads = quadraticize(problem, &traj, provider)?;
        let back = newton_backward(&quads, 0.0)?;
        let (_, du) = propagate_linear(&quads, &back.rules);
        let inputs: Vec<_> = traj.inputs.iter().zip(&du).map(|(u, d)| u + d).collect();
        traj = rollout(problem, &inputs)?;
        residuals.push(residual_of(problem, &traj, provider)?);
        iterates.push(traj.clone());
    }
    Ok((iterates, residuals))
}

#[derive(Debug, Clone)]
pub struct Equilibrium {
    pub traj: Trajectory,
    pub residual: f64,
    pub search: SolveReport,
    /// Residuals of the Newton polish, starting where the search stopped.
    pub polish: Vec<f64>,
}

/// Undamped DDP steps accepted unconditionally. Near a regular equilibrium
/// these converge quadratically, which is what the reference point needs.
pub fn equilibrium_search_config() -> SolverConfig {
    SolverConfig {
        max_iters: 200,
        residual_tol: 1e-10,
        accept_rule: AcceptRule::Always,
        line_search: vec![1.0],
        ..SolverConfig::fixed_lambda(0.0)
    }
}

/// Runs `config` from `start` and then polishes with full Newton steps
/// until `‖𝒥‖∞ ≤ tol`.
pub fn find_equilibrium(
    problem: &GameProblem,
    start: &[DVector<f64>],
    provider: &DerivativeProvider,
    config: &SolverConfig,
    tol: f64,
) -> Result<Equilibrium> {
    let (traj, search) = solve(problem, start, config, provider)?;
    let (iterates, polish) = newton_iterates(problem, &traj.inputs, provider, tol, 20)?;
    let residual = *polish.last().unwrap();
    if residual > tol {
        return Err(Error::EquilibriumNotCertified { residual, tol });
    }
    Ok(Equilibrium {
        traj: iterates.into_iter().last().unwrap(),
        residual,
        search,
        polish,
    })
}

/// Start of the longest strictly decreasing tail of `errors`, i.e. where
/// the iteration entered the region it then converged from.
pub fn basin_entry(errors: &[f64]) -> usize {
    let mut start = errors.len().saturating_sub(1);
    while start > 0 && errors[start - 1] > errors[start] {
        start -= 1;
    }
    start
}

/// `‖u_i − u*‖∞` over the stacked inputs of each iterate.
pub fn iterate_errors(iterates: &[Trajectory], u_star: &[DVector<f64>]) -> Vec<f64> {
    iterates
        .iter()
        .map(|t| {
            t.inputs
                .iter()
                .zip(u_star)
                .map(|(a, b)| (a - b).amax())
                .fold(0.0, f64::max)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceOrderEstimate {
    pub errors: Vec<f64>,
    /// Values below this were cut from the fit.
    pub cutoff: f64,
    /// Leading run of errors at or above the cutoff.
    pub window: Vec<f64>,
    /// `ln(e_{i+1}/e_{i+2}) / ln(e_i/e_{i+1})` over the window.
    pub pairwise: Vec<f64>,
    pub order: f64,
}

/// Number of usable errors `estimate_order` needs.
pub const MIN_ORDER_POINTS: usize = 4;

/// Convergence order from an error sequence. Errors below `100·floor`
/// end the window.
pub fn estimate_order(errors: &[f64], floor: f64) -> Result<ConvergenceOrderEstimate> {
    let cutoff = 100.0 * floor;
    let window: Vec<f64> = errors
        .iter()
        .copied()
        .take_while(|&e| e.is_finite() && e > 0.0 && e >= cutoff)
        .collect();
    if window.len() < MIN_ORDER_POINTS {
        return Err(Error::InsufficientData {
            needed: MIN_ORDER_POINTS,
            got: window.len(),
        });
    }
    let pairwise: Vec<f64> = window
        .windows(3)
        .map(|w| (w[1] / w[2]).ln() / (w[0] / w[1]).ln())
        .collect();
    Ok(ConvergenceOrderEstimate {
        errors: errors.to_vec(),
        cutoff,
        order: median(&pairwise),
        window,
        pairwise,
    })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderStudy {
    #[serde(skip)]
    pub u_star: Vec<DVector<f64>>,
    pub equilibrium_residual: f64,
    /// Errors of every DDP iterate from the starting point.
    pub ddp_errors: Vec<f64>,
    pub ddp_residuals: Vec<f64>,
    pub basin_entry: usize,
    pub ddp: Result<ConvergenceOrderEstimate, String>,
    /// Errors of full Newton steps started from the DDP iterate at `basin_entry`.
    pub newton_errors: Vec<f64>,
    pub newton: Result<ConvergenceOrderEstimate, String>,
}

/// Residual the reference equilibrium is polished to; error values within
/// `100×` of it are ignored by the order estimates.
pub const ORDER_FLOOR: f64 = 1e-12;

/// Locates `u*`, then measures how fast DDP (with `config`) and Newton
/// close in on it once inside its basin.
pub fn order_study(
    problem: &GameProblem,
    start: &[DVector<f64>],
    provider: &DerivativeProvider,
    config: &SolverConfig,
) -> Result<OrderStudy> {
    let config = SolverConfig {
        record_iterates: true,
        ..config.clone()
    };
    let eq = find_equilibrium(problem, start, provider, &config, ORDER_FLOOR)?;
    let u_star = &eq.traj.inputs;
    let ddp_errors = iterate_errors(&eq.search.iterates, u_star);
    let ddp_residuals = eq
        .search
        .all_records()
        .filter(|r| r.accepted)
        .map(|r| r.residual)
        .collect();
    let entry = basin_entry(&ddp_errors);
    let (iterates, _) = newton_iterates(
        problem,
        &eq.search.iterates[entry].inputs,
        provider,
        ORDER_FLOOR,
        50,
    )?;
    let newton_errors = iterate_errors(&iterates, u_star);
    Ok(OrderStudy {
        u_star: u_star.clone(),
        equilibrium_residual: eq.residual,
        ddp: estimate_order(&ddp_errors[entry..], ORDER_FLOOR).map_err(|e| e.to_string()),
        newton: estimate_order(&newton_errors, ORDER_FLOOR).map_err(|e| e.to_string()),
        ddp_errors,
        ddp_residuals,
        basin_entry: entry,
        newton_errors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentityReport {
    /// Worst `‖Ω_{n,k} − ∇_x tail‖∞ / max(1, ‖∇_x tail‖∞)` over `n, k`.
    pub omega_max_rel: f64,
    /// Worst relative gap between `c_u + Bᵀ Ω_{n,k+1}` and the finite-difference
    /// gradient of `J_n` with respect to `u_{:,k}`, over all inputs of all players.
    pub gradient_max_rel: f64,
}

/// Checks the tail-gradient vectors `Ω` and the cost gradient built from
/// them against central differences of the true costs along `traj`.
pub fn identity_checks(
    problem: &GameProblem,
    traj: &Trajectory,
    provider: &DerivativeProvider,
) -> Result<IdentityReport> {
    problem.check_trajectory(traj)?;
    let lin = quadraticize(problem, traj, provider)?.linearization();
    let omegas = crate::newton::tail_gradients(&lin);
    let (horizon, nx) = (problem.horizon(), problem.state_dim());
    let h = 1e-6;
    let rel = |a: &DVector<f64>, b: &DVector<f64>| (a - b).amax() / b.amax().max(1.0);

    let cells: Vec<(usize, usize)> = (0..problem.num_players())
        .flat_map(|n| (0..=horizon).map(move |k| (n, k)))
        .collect();
    let worst = cells
        .par_iter()
        .map(|&(n, k)| {
            // Cost from stage k on, with the nominal inputs replaced at stage k only.
            let tail = |x: &DVector<f64>, uk: &DVector<f64>| {
                let mut x = x.clone();
                let mut total = 0.0;
                for i in k..=horizon {
                    let u = if i == k { uk } else { &traj.inputs[i] };
                    total += problem.stage_cost(n, i, &x, u);
                    if i < horizon {
                        x = problem.dynamics(i, &x, u);
                    }
                }
                total
            };
            let uk = &traj.inputs[k];
            let fd_x = crate::diff::fd_gradient(&|x| tail(x, uk), &traj.states[k], h);
            let fd_u = crate::diff::fd_gradient(&|u| tail(&traj.states[k], u), uk, h);
            let st = &lin.stages[k];
            let mut grad_u = st.cost_gradients[n].rows(nx, uk.len()).into_owned();
            if let Some((_, b)) = &st.dynamics {
                grad_u += b.transpose() * &omegas[n][k + 1];
            }
            (rel(&omegas[n][k], &fd_x), rel(&grad_u, &fd_u))
        })
        .collect::<Vec<_>>();
    Ok(IdentityReport {
        omega_max_rel: worst.iter().map(|w| w.0).fold(0.0, f64::max),
        gradient_max_rel: worst.iter().map(|w| w.1).fold(0.0, f64::max),
    })
}

/// One line of a closeness table. `player` is `None` for stage-wide quantities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRow {
    pub stage: usize,
    pub player: Option<usize>,
    pub quantity: Quantity,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// `‖δu^D − δu^N‖∞`
    DuGap,
    DuNewton,
    DuDdp,
    /// `‖S̃^{x1} − S^{x1}‖∞`
    S1xGap,
    /// Gap in the gradient border of `Γ` (column 0 below the corner).
    GammaRowGap,
    /// `‖s̃ − s‖∞`
    SGap,
    SNewton,
    SDdp,
    HNewton,
    HDdp,
    /// `‖H̃ − H‖∞`
    HGap,
    /// `‖K̃ − K‖∞`
    KGap,
}

impl Quantity {
    pub const ALL: [Quantity; 12] = [
        Quantity::DuGap,
        Quantity::DuNewton,
        Quantity::DuDdp,
        Quantity::S1xGap,
        Quantity::GammaRowGap,
        Quantity::SGap,
        Quantity::SNewton,
        Quantity::SDdp,
        Quantity::HNewton,
        Quantity::HDdp,
        Quantity::HGap,
        Quantity::KGap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::DuGap => "du_gap",
            Quantity::DuNewton => "du_newton",
            Quantity::DuDdp => "du_ddp",
            Quantity::S1xGap => "s1x_gap",
            Quantity::GammaRowGap => "gamma_row_gap",
            Quantity::SGap => "s_gap",
            Quantity::SNewton => "s_newton",
            Quantity::SDdp => "s_ddp",
            Quantity::HNewton => "h_newton",
            Quantity::HDdp => "h_ddp",
            Quantity::HGap => "h_gap",
            Quantity::KGap => "k_gap",
        }
    }

    /// The magnitude a gap is compared against when deciding it is pure round-off.
    fn reference(self) -> Option<Quantity> {
        match self {
            Quantity::DuGap => Some(Quantity::DuNewton),
            Quantity::SGap => Some(Quantity::SNewton),
            Quantity::HGap => Some(Quantity::HNewton),
            _ => None,
        }
    }

    fn is_gap(self) -> bool {
        matches!(
            self,
            Quantity::DuGap
                | Quantity::S1xGap
                | Quantity::GammaRowGap
                | Quantity::SGap
                | Quantity::HGap
                | Quantity::KGap
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixCloseness {
    pub epsilon: f64,
    pub rows: Vec<GapRow>,
}

impl MatrixCloseness {
    /// Largest tabulated value of `q` over stages and players.
    pub fn max(&self, q: Quantity) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.quantity == q)
            .map(|r| r.value)
            .fold(0.0, f64::max)
    }
}

fn perturbed(
    problem: &GameProblem,
    u_star: &[DVector<f64>],
    epsilon: f64,
    direction: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    let dims = problem.dims();
    let base = stack_inputs(dims, u_star)?;
    if direction.len() != base.len() {
        return Err(Error::dim(
            "perturbation direction",
            base.len(),
            direction.len(),
        ));
    }
    unstack_inputs(dims, &(base + direction * epsilon))
}

/// DDP and Newton backward passes at `u* + ε d` (both with `λ = 0`),
/// tabulated per stage and player, plus the resulting input steps.
pub fn matrix_closeness(
    problem: &GameProblem,
    u_star: &[DVector<f64>],
    epsilon: f64,
    direction: &DVector<f64>,
    provider: &DerivativeProvider,
) -> Result<MatrixCloseness> {
    let nx = problem.state_dim();
    let traj = rollout(problem, &perturbed(problem, u_star, epsilon, direction)?)?;
    let quads = quadraticize(problem, &traj, provider)?;
    let ddp = ddp_backward(&quads, 0.0)?;
    let newton = newton_backward(&quads, 0.0)?;
    let (_, du_n) = propagate_linear(&quads, &newton.rules);
    let next = ddp_forward(problem, &traj, &ddp.rules, 1.0)?;

    let mut rows = Vec::new();
    let mut push = |stage, player, quantity, value| {
        rows.push(GapRow {
            stage,
            player,
            quantity,
            value,
        })
    };
    for k in 0..traj.num_stages() {
        let du_d = &next.inputs[k] - &traj.inputs[k];
        push(k, None, Quantity::DuGap, (&du_d - &du_n[k]).amax());
        push(k, None, Quantity::DuNewton, du_n[k].amax());
        push(k, None, Quantity::DuDdp, du_d.amax());
        let (rd, rn) = (&ddp.rules[k], &newton.rules[k]);
        push(k, None, Quantity::SGap, (&rd.s - &rn.s).amax());
        push(k, None, Quantity::SNewton, rn.s.amax());
        push(k, None, Quantity::SDdp, rd.s.amax());
        push(k, None, Quantity::KGap, (&rd.k - &rn.k).amax());
        let (cd, cn) = (&ddp.coefficients[k], &newton.coefficients[k]);
        push(k, None, Quantity::HNewton, cn.h.amax());
        push(k, None, Quantity::HDdp, cd.h.amax());
        push(k, None, Quantity::HGap, (&cd.h - &cn.h).amax());
        for n in 0..problem.num_players() {
            let (sd, sn) = (&ddp.values[n][k], &newton.values[n][k]);
            let gap = (sd.column(0).rows(1, nx) - sn.column(0).rows(1, nx)).amax();
            push(k, Some(n), Quantity::S1xGap, gap);
            let (gd, gn) = (&ddp.gammas[n][k], &newton.gammas[n][k]);
            let rows = gd.nrows() - 1;
            let gap = (gd.column(0).rows(1, rows) - gn.column(0).rows(1, rows)).amax();
            push(k, Some(n), Quantity::GammaRowGap, gap);
        }
    }
    Ok(MatrixCloseness { epsilon, rows })
}

/// One perturbation the study could not evaluate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroppedCell {
    pub epsilon: f64,
    pub direction_id: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRecord {
    pub epsilon: f64,
    pub direction_id: usize,
    pub quantity: Quantity,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlopeFit {
    Fitted {
        slope: f64,
        points: usize,
    },
    /// Every value sits at round-off level, so there is nothing to fit.
    ExactlyEqual,
    Insufficient {
        points: usize,
    },
}

impl SlopeFit {
    pub fn slope(&self) -> Option<f64> {
        match self {
            SlopeFit::Fitted { slope, .. } => Some(*slope),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosenessStudy {
    pub epsilons: Vec<f64>,
    pub directions: usize,
    pub equilibrium_residual: f64,
    pub records: Vec<StudyRecord>,
    pub slopes: BTreeMap<&'static str, SlopeFit>,
    pub dropped: Vec<DroppedCell>,
}

impl ClosenessStudy {
    pub fn slope(&self, q: Quantity) -> Option<f64> {
        self.slopes.get(q.name()).and_then(SlopeFit::slope)
    }
}

/// `count` uniformly random unit vectors of length `len`.
pub fn random_directions(len: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| loop {
            let v = DVector::from_fn(len, |_, _| rng.gen_range(-1.0..1.0));
            let norm = v.norm();
            if norm > 1e-3 {
                break v / norm;
            }
        })
        .collect()
}

pub fn validate_epsilons(epsilons: &[f64]) -> Result<()> {
    if epsilons.is_empty() {
        return Err(Error::InvalidEpsilons("no values given".into()));
    }
    if let Some(e) = epsilons
        .iter()
        .find(|e| !(e.is_finite() && **e >= EPSILON_FLOOR))
    {
        return Err(Error::InvalidEpsilons(format!(
            "{e} is below the floor {EPSILON_FLOOR:e}"
        )));
    }
    if let Some(w) = epsilons.windows(2).find(|w| w[1] >= w[0]) {
        return Err(Error::InvalidEpsilons(format!(
            "values must strictly decrease ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

const ROUNDOFF: f64 = 1e-12;

fn fit(q: Quantity, cells: &[(f64, usize, MatrixCloseness)]) -> SlopeFit {
    let points: Vec<(f64, f64)> = cells.iter().map(|(eps, _, t)| (*eps, t.max(q))).collect();
    if q.is_gap() {
        let roundoff = cells.iter().all(|(_, _, t)| {
            let scale = q.reference().map_or(1.0, |r| t.max(r)).max(1.0);
            t.max(q) <= ROUNDOFF * scale
        });
        if roundoff {
            return SlopeFit::ExactlyEqual;
        }
    }
    let usable = points.iter().filter(|p| p.1 > 0.0).count();
    match loglog_slope(&points) {
        Some(slope) => SlopeFit::Fitted {
            slope,
            points: usable,
        },
        None => SlopeFit::Insufficient { points: usable },
    }
}

/// Evaluates both one-step updates at `u* + ε d` for every `ε` and
/// direction and fits log-log slopes of the per-cell maxima.
pub fn closeness_study(
    problem: &GameProblem,
    u_star: &[DVector<f64>],
    directions: &[DVector<f64>],
    epsilons: &[f64],
    provider: &DerivativeProvider,
) -> Result<ClosenessStudy> {
    validate_epsilons(epsilons)?;
    let len = problem.dims().stacked_len();
    let mut units = Vec::with_capacity(directions.len());
    for (index, d) in directions.iter().enumerate() {
        if d.len() != len {
            return Err(Error::dim("perturbation direction", len, d.len()));
        }
        let norm = d.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidDirection { index });
        }
        units.push(d / norm);
    }
    if units.is_empty() {
        return Err(Error::InvalidDirection { index: 0 });
    }
    let equilibrium_residual = residual_of(problem, &rollout(problem, u_star)?, provider)?;
    if equilibrium_residual > CERTIFY_TOL {
        return Err(Error::EquilibriumNotCertified {
            residual: equilibrium_residual,
            tol: CERTIFY_TOL,
        });
    }

    let grid: Vec<(f64, usize)> = epsilons
        .iter()
        .flat_map(|&e| (0..units.len()).map(move |d| (e, d)))
        .collect();
    let outcomes = grid
        .par_iter()
        .map(|&(eps, d)| {
            (
                eps,
                d,
                matrix_closeness(problem, u_star, eps, &units[d], provider),
            )
        })
        .collect::<Vec<_>>();

    let mut cells = Vec::new();
    let mut dropped = Vec::new();
    for (epsilon, direction_id, outcome) in outcomes {
        match outcome {
            Ok(table) => cells.push((epsilon, direction_id, table)),
            Err(e @ Error::SingularStageGame { .. }) => dropped.push(DroppedCell {
                epsilon,
                direction_id,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }

    let records = cells
        .iter()
        .flat_map(|(epsilon, direction_id, table)| {
            Quantity::ALL.iter().map(move |&quantity| StudyRecord {
                epsilon: *epsilon,
                direction_id: *direction_id,
                quantity,
                value: table.max(quantity),
            })
        })
        .collect();
    let slopes = Quantity::ALL
        .iter()
        .map(|&q| (q.name(), fit(q, &cells)))
        .collect();
    Ok(ClosenessStudy {
        epsilons: epsilons.to_vec(),
        directions: units.len(),
        equilibrium_residual,
        records,
        slopes,
        dropped,
    })
}
