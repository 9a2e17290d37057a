//! Game-DDP: backward pass, nonlinear forward pass and the outer loop.
//!
//! Each iteration quadraticizes along the current trajectory, runs the
//! backward recursion with the value-gradient weighting of the dynamics
//! curvature, and rolls the true dynamics forward under
//! `u_k = ū_k + K_k (x_k − x̄_k) + α s_k`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::diff::{quadraticize, DerivativeProvider, Quadraticization};
use crate::error::{Error, Result};
use crate::game::{evaluate_costs, rollout, GameProblem, Trajectory};
use crate::linalg::vec_inf_norm;
use crate::newton::necessary_conditions;
use crate::recursion::{backward_recursion, CurvatureWeight};
use crate::stagegame::{AffineStageRule, StageGameCoefficients};

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPassResult {
    pub lambda: f64,
    pub rules: Vec<AffineStageRule>,
    /// `values[n][k]`, `k = 0..=T+1`, with `values[n][T+1] = 0`.
    pub values: Vec<Vec<DMatrix<f64>>>,
    pub gammas: Vec<Vec<DMatrix<f64>>>,
    pub d_terms: Vec<Vec<DMatrix<f64>>>,
    pub coefficients: Vec<StageGameCoefficients>,
}

pub fn ddp_backward(quads: &Quadraticization, lambda: f64) -> Result<BackwardPassResult> {
    let out = backward_recursion(quads, lambda, CurvatureWeight::ValueGradient)?;
    Ok(BackwardPassResult {
        lambda,
        rules: out.rules,
        values: out.values,
        gammas: out.gammas,
        d_terms: out.d_terms,
        coefficients: out.coefficients,
    })
}

/// Rolls the true dynamics under the affine policy, measuring `δx` against `base`.
pub fn ddp_forward(
    problem: &GameProblem,
    base: &Trajectory,
    rules: &[AffineStageRule],
    alpha: f64,
) -> Result<Trajectory> {
    problem.check_trajectory(base)?;
    if rules.len() != base.num_stages() {
        return Err(Error::dim(
            "number of stage rules",
            base.num_stages(),
            rules.len(),
        ));
    }
    let mut states = Vec::with_capacity(base.num_stages());
    let mut inputs = Vec::with_capacity(base.num_stages());
    states.push(problem.initial_state().clone());
    for (k, rule) in rules.iter().enumerate() {
        let dx = &states[k] - &base.states[k];
        let u = &base.inputs[k] + rule.apply(&dx, alpha);
        if k < problem.horizon() {
            let next = problem.dynamics(k, &states[k], &u);
            if next.len() != problem.state_dim() {
                return Err(Error::dim(
                    format!("dynamics output at stage {k}"),
                    problem.state_dim(),
                    next.len(),
                ));
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteDynamics { stage: k });
            }
            states.push(next);
        }
        inputs.push(u);
    }
    Ok(Trajectory { states, inputs })
}

/// The stacked necessary conditions `𝒥(u)` and their ∞-norm.
pub fn residual(
    problem: &GameProblem,
    inputs: &[DVector<f64>],
    provider: &DerivativeProvider,
) -> Result<(DVector<f64>, f64)> {
    let r = crate::newton::residual_at(problem, inputs, provider)?;
    let norm = vec_inf_norm(&r);
    Ok((r, norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptRule {
    Always,
    AnyPlayerCostDecrease,
    ResidualDecrease,
}

impl std::str::FromStr for AcceptRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "always" => Ok(Self::Always),
            "any_player_cost_decrease" => Ok(Self::AnyPlayerCostDecrease),
            "residual_decrease" => Ok(Self::ResidualDecrease),
            other => Err(Error::Parse(format!("unknown accept rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop once `‖𝒥(u)‖∞` is at or below this.
    pub residual_tol: f64,
    /// Stop once an accepted `‖δu‖∞` is at or below this.
    pub step_tol: f64,
    pub lambda_init: f64,
    pub lambda_increase: f64,
    pub lambda_decrease: f64,
    pub lambda_max: f64,
    /// Smallest nonzero λ: raising from 0 jumps here, lowering below it snaps to 0.
    pub lambda_min: f64,
    pub accept_rule: AcceptRule,
    /// Feedforward scalings tried in order before λ is raised.
    pub line_search: Vec<f64>,
    /// Keep every accepted trajectory in the report.
    pub record_iterates: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            residual_tol: 1e-6,
            step_tol: 1e-10,
            lambda_init: 0.0,
            lambda_increase: 10.0,
            lambda_decrease: 2.0,
            lambda_max: 1e8,
            lambda_min: 1e-6,
            accept_rule: AcceptRule::ResidualDecrease,
            line_search: (0..7).map(|i| 0.5f64.powi(i)).collect(),
            record_iterates: false,
        }
    }
}

impl SolverConfig {
    /// Constant λ throughout, as in a plain Levenberg-Marquardt-damped run.
    pub fn fixed_lambda(lambda: f64) -> Self {
        Self {
            lambda_init: lambda,
            lambda_increase: 1.0,
            lambda_decrease: 1.0,
            ..Self::default()
        }
    }

    pub fn is_fixed_lambda(&self) -> bool {
        self.lambda_increase == 1.0 && self.lambda_decrease == 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.residual_tol > 0.0) || !(self.step_tol > 0.0) {
            return bad(format!(
                "tolerances must be positive (residual {}, step {})",
                self.residual_tol, self.step_tol
            ));
        }
        if !(self.lambda_init >= 0.0) || !self.lambda_init.is_finite() {
            return bad(format!(
                "lambda_init must be finite and non-negative, got {}",
                self.lambda_init
            ));
        }
        if !(self.lambda_increase >= 1.0) || !(self.lambda_decrease >= 1.0) {
            return bad("lambda_increase and lambda_decrease must be at least 1".into());
        }
        if !(self.lambda_max >= self.lambda_init) {
            return bad(format!(
                "lambda_max {} is below lambda_init {}",
                self.lambda_max, self.lambda_init
            ));
        }
        if !(self.lambda_min > 0.0) {
            return bad("lambda_min must be positive".into());
        }
        if self.line_search.is_empty() || self.line_search.iter().any(|a| !(*a > 0.0 && *a <= 1.0))
        {
            return bad("line search scalings must be non-empty and lie in (0, 1]".into());
        }
        Ok(())
    }

    fn raise(&self, lambda: f64) -> f64 {
        (lambda * self.lambda_increase).max(self.lambda_min)
    }

    fn lower(&self, lambda: f64) -> f64 {
        let l = lambda / self.lambda_decrease;
        if l < self.lambda_min {
            0.0
        } else {
            l
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Converged,
    MaxIters,
    RegularizationExhausted,
    /// An accepted step fell below `step_tol` while the residual was still above `residual_tol`.
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Residual at the iterate held after this iteration.
    pub residual: f64,
    /// `‖δu‖∞` of the accepted step, or of the full attempted step when rejected.
    pub step_norm: f64,
    pub lambda: f64,
    pub alpha: Option<f64>,
    pub accepted: bool,
    pub costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    /// State before the first iteration, recorded as iteration 0.
    pub initial: IterationRecord,
    pub records: Vec<IterationRecord>,
    pub status: SolveStatus,
    pub final_residual: f64,
    /// Accepted trajectories, starting with the initial one (only when requested).
    #[serde(skip)]
    pub iterates: Vec<Trajectory>,
}

impl SolveReport {
    pub fn accepted_iterations(&self) -> usize {
        self.records.iter().filter(|r| r.accepted).count()
    }

    /// Initial record followed by every iteration.
    pub fn all_records(&self) -> impl Iterator<Item = &IterationRecord> {
        std::iter::once(&self.initial).chain(&self.records)
    }
}

struct Iterate {
    traj: Trajectory,
    quads: Quadraticization,
    residual: f64,
    costs: Vec<f64>,
}

fn evaluate(
    problem: &GameProblem,
    traj: Trajectory,
    provider: &DerivativeProvider,
) -> Result<Iterate> {
    let quads = quadraticize(problem, &traj, provider)?;
    let residual = vec_inf_norm(&necessary_conditions(&quads.linearization()));
    let costs = evaluate_costs(problem, &traj)?.totals;
    Ok(Iterate {
        traj,
        quads,
        residual,
        costs,
    })
}

fn step_norm(a: &Trajectory, b: &Trajectory) -> f64 {
    a.inputs
        .iter()
        .zip(&b.inputs)
        .map(|(x, y)| (x - y).amax())
        .fold(0.0, f64::max)
}

fn acceptable(rule: AcceptRule, current: &Iterate, candidate: &Iterate) -> bool {
    match rule {
        AcceptRule::Always => true,
        AcceptRule::ResidualDecrease => candidate.residual < current.residual,
        AcceptRule::AnyPlayerCostDecrease => candidate
            .costs
            .iter()
            .zip(&current.costs)
            .any(|(c, o)| c < o),
    }
}

/// Runs game-DDP from `initial_inputs`.
pub fn solve(
    problem: &GameProblem,
    initial_inputs: &[DVector<f64>],
    config: &SolverConfig,
    provider: &DerivativeProvider,
) -> Result<(Trajectory, SolveReport)> {
    config.validate()?;
    let mut current = evaluate(problem, rollout(problem, initial_inputs)?, provider)?;
    let mut lambda = config.lambda_init;
    let initial = IterationRecord {
        iter: 0,
        residual: current.residual,
        step_norm: 0.0,
        lambda,
        alpha: None,
        accepted: true,
        costs: current.costs.clone(),
    };
    let mut records = Vec::new();
    let mut iterates = Vec::new();
    if config.record_iterates {
        iterates.push(current.traj.clone());
    }

    let mut status = if current.residual <= config.residual_tol {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIters
    };

    'outer: for iter in 1..=config.max_iters {
        if status == SolveStatus::Converged {
            break;
        }
        let backward = loop {
            match ddp_backward(&current.quads, lambda) {
                Ok(b) => break b,
                Err(Error::SingularStageGame { .. }) => {
                    if config.is_fixed_lambda() {
                        status = SolveStatus::RegularizationExhausted;
                        break 'outer;
                    }
                    lambda = config.raise(lambda);
                    if lambda > config.lambda_max {
                        status = SolveStatus::RegularizationExhausted;
                        break 'outer;
                    }
                }
                Err(e) => return Err(e),
            }
        };

        let mut accepted = None;
        let mut attempted_norm = 0.0;
        for (i, &alpha) in config.line_search.iter().enumerate() {
            let traj = ddp_forward(problem, &current.traj, &backward.rules, alpha)?;
            let norm = step_norm(&traj, &current.traj);
            if i == 0 {
                attempted_norm = norm;
            }
            let candidate = evaluate(problem, traj, provider)?;
            if acceptable(config.accept_rule, &current, &candidate) {
                accepted = Some((alpha, norm, candidate));
                break;
            }
        }

        match accepted {
            Some((alpha, norm, candidate)) => {
                current = candidate;
                records.push(IterationRecord {
                    iter,
                    residual: current.residual,
                    step_norm: norm,
                    lambda,
                    alpha: Some(alpha),
                    accepted: true,
                    costs: current.costs.clone(),
                });
                if config.record_iterates {
                    iterates.push(current.traj.clone());
                }
                if current.residual <= config.residual_tol {
                    status = SolveStatus::Converged;
                } else if norm <= config.step_tol {
                    status = SolveStatus::Stalled;
                    break;
                }
                lambda = config.lower(lambda);
            }
            None => {
                records.push(IterationRecord {
                    iter,
                    residual: current.residual,
                    step_norm: attempted_norm,
                    lambda,
                    alpha: None,
                    accepted: false,
                    costs: current.costs.clone(),
                });
                if config.is_fixed_lambda() {
                    status = SolveStatus::Stalled;
                    break;
                }
                lambda = config.raise(lambda);
                if lambda > config.lambda_max {
                    status = SolveStatus::RegularizationExhausted;
                    break;
                }
            }
        }
    }

    let report = SolveReport {
        initial,
        records,
        status,
        final_residual: current.residual,
        iterates,
    };
    Ok((current.traj, report))
}
