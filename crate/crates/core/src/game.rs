//! Dynamic game definition, trajectories, rollout and cost evaluation.
//!
//! A game is a shared discrete-time system `x_{k+1} = f_k(x_k, u_{:,k})`
//! driven by `N` players, where player `n` picks the block `u_{n,k}` of the
//! stacked input and pays `J_n(u) = Σ_{k=0}^{T} c_{n,k}(x_k, u_{:,k})`.
//! Dynamics exist for `k = 0..T-1`; costs accrue at every stage `0..=T`.
//!
//! Problem functions are plain evaluation handles. They must be pure and
//! safe to call from several threads at once.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::diff::AnalyticDerivatives;
use crate::error::{Error, Result};

/// `f_k(x, u)` for `k = 0..T-1`.
pub type DynamicsFn =
    Arc<dyn Fn(usize, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// `c_{n,k}(x, u)` called as `cost(n, k, x, u)` with 0-based player index.
pub type CostFn = Arc<dyn Fn(usize, usize, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;

/// Dimensions shared by every object derived from a game.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GameDims {
    pub horizon: usize,
    pub state_dim: usize,
    pub input_dims: Vec<usize>,
}

impl GameDims {
    pub fn num_players(&self) -> usize {
        self.input_dims.len()
    }

    /// Stacked input dimension `n_u = Σ n_{u_n}`.
    pub fn input_dim(&self) -> usize {
        self.input_dims.iter().sum()
    }

    /// Offset of player `n`'s block inside `u_{:,k}`.
    pub fn input_offset(&self, n: usize) -> usize {
        self.input_dims[..n].iter().sum()
    }

    pub fn num_stages(&self) -> usize {
        self.horizon + 1
    }

    /// Length of the stacked decision vector `u` over all players and stages.
    pub fn stacked_len(&self) -> usize {
        self.input_dim() * self.num_stages()
    }

    /// Side of the bordered matrices `M`, `Γ`: `1 + n_x + n_u`.
    pub fn bordered_dim(&self) -> usize {
        1 + self.state_dim + self.input_dim()
    }
}

#[derive(Clone)]
pub struct GameProblem {
    id: String,
    dims: GameDims,
    initial_state: DVector<f64>,
    dynamics: DynamicsFn,
    cost: CostFn,
    analytic: AnalyticDerivatives,
}

impl fmt::Debug for GameProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GameProblem")
            .field("id", &self.id)
            .field("dims", &self.dims)
            .field("initial_state", &self.initial_state.as_slice())
            .field("analytic", &self.analytic)
            .finish_non_exhaustive()
    }
}

impl GameProblem {
    pub fn new(
        id: impl Into<String>,
        horizon: usize,
        input_dims: Vec<usize>,
        initial_state: DVector<f64>,
        dynamics: DynamicsFn,
        cost: CostFn,
    ) -> Result<Self> {
        if input_dims.is_empty() {
            return Err(Error::InvalidProblem(
                "a game needs at least one player".into(),
            ));
        }
        if let Some(n) = input_dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidProblem(format!(
                "player {n} has an empty input"
            )));
        }
        if initial_state.is_empty() {
            return Err(Error::InvalidProblem(
                "state dimension must be positive".into(),
            ));
        }
        Ok(Self {
            id: id.into(),
            dims: GameDims {
                horizon,
                state_dim: initial_state.len(),
                input_dims,
            },
            initial_state,
            dynamics,
            cost,
            analytic: AnalyticDerivatives::default(),
        })
    }

    pub fn with_analytic(mut self, analytic: AnalyticDerivatives) -> Self {
        self.analytic = analytic;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dims(&self) -> &GameDims {
        &self.dims
    }

    pub fn horizon(&self) -> usize {
        self.dims.horizon
    }

    pub fn num_players(&self) -> usize {
        self.dims.num_players()
    }

    pub fn state_dim(&self) -> usize {
        self.dims.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.dims.input_dim()
    }

    pub fn initial_state(&self) -> &DVector<f64> {
        &self.initial_state
    }

    pub fn analytic(&self) -> &AnalyticDerivatives {
        &self.analytic
    }

    pub fn dynamics(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.dynamics)(k, x, u)
    }

    pub fn stage_cost(&self, n: usize, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (self.cost)(n, k, x, u)
    }

    /// Zero inputs for every stage.
    pub fn zero_inputs(&self) -> Vec<DVector<f64>> {
        vec![DVector::zeros(self.input_dim()); self.dims.num_stages()]
    }

    pub(crate) fn check_inputs(&self, inputs: &[DVector<f64>]) -> Result<()> {
        if inputs.len() != self.dims.num_stages() {
            return Err(Error::dim(
                "input sequence length",
                self.dims.num_stages(),
                inputs.len(),
            ));
        }
        for u in inputs {
            if u.len() != self.input_dim() {
                return Err(Error::dim("stage input", self.input_dim(), u.len()));
            }
        }
        Ok(())
    }

    pub(crate) fn check_trajectory(&self, traj: &Trajectory) -> Result<()> {
        self.check_inputs(&traj.inputs)?;
        if traj.states.len() != self.dims.num_stages() {
            return Err(Error::dim(
                "state sequence length",
                self.dims.num_stages(),
                traj.states.len(),
            ));
        }
        for x in &traj.states {
            if x.len() != self.state_dim() {
                return Err(Error::dim("stage state", self.state_dim(), x.len()));
            }
        }
        Ok(())
    }
}

/// A dynamically consistent state/input sequence `(x̄, ū)`, one entry per stage `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn num_stages(&self) -> usize {
        self.states.len()
    }
}

/// Per-player cost totals `J_n` and the per-stage table they sum.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerCosts {
    pub totals: Vec<f64>,
    /// `per_stage[n][k] = c_{n,k}(x_k, u_{:,k})`.
    pub per_stage: Vec<Vec<f64>>,
}

/// Simulates the true dynamics from the problem's initial state.
pub fn rollout(problem: &GameProblem, inputs: &[DVector<f64>]) -> Result<Trajectory> {
    problem.check_inputs(inputs)?;
    let mut states = Vec::with_capacity(inputs.len());
    states.push(problem.initial_state().clone());
    for (k, u) in inputs.iter().enumerate().take(problem.horizon()) {
        let next = problem.dynamics(k, &states[k], u);
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
    Ok(Trajectory {
        states,
        inputs: inputs.to_vec(),
    })
}

pub fn evaluate_costs(problem: &GameProblem, traj: &Trajectory) -> Result<PlayerCosts> {
    problem.check_trajectory(traj)?;
    let mut per_stage = vec![Vec::with_capacity(traj.num_stages()); problem.num_players()];
    for (n, row) in per_stage.iter_mut().enumerate() {
        for (k, (x, u)) in traj.states.iter().zip(&traj.inputs).enumerate() {
            let c = problem.stage_cost(n, k, x, u);
            if !c.is_finite() {
                return Err(Error::NonFiniteCost {
                    player: n,
                    stage: k,
                });
            }
            row.push(c);
        }
    }
    let totals = per_stage.iter().map(|row| row.iter().sum()).collect();
    Ok(PlayerCosts { totals, per_stage })
}

/// Stacks per-stage inputs player-major: all of player 0's stages, then player 1's, ...
pub fn stack_inputs(dims: &GameDims, inputs: &[DVector<f64>]) -> Result<DVector<f64>> {
    if inputs.len() != dims.num_stages() {
        return Err(Error::dim(
            "input sequence length",
            dims.num_stages(),
            inputs.len(),
        ));
    }
    let mut out = Vec::with_capacity(dims.stacked_len());
    for n in 0..dims.num_players() {
        let (off, len) = (dims.input_offset(n), dims.input_dims[n]);
        for u in inputs {
            if u.len() != dims.input_dim() {
                return Err(Error::dim("stage input", dims.input_dim(), u.len()));
            }
            out.extend_from_slice(&u.as_slice()[off..off + len]);
        }
    }
    Ok(DVector::from_vec(out))
}

/// Inverse of [`stack_inputs`].
pub fn unstack_inputs(dims: &GameDims, v: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    if v.len() != dims.stacked_len() {
        return Err(Error::dim(
            "stacked input vector",
            dims.stacked_len(),
            v.len(),
        ));
    }
    let mut inputs = vec![DVector::zeros(dims.input_dim()); dims.num_stages()];
    let mut cursor = 0;
    for n in 0..dims.num_players() {
        let (off, len) = (dims.input_offset(n), dims.input_dims[n]);
        for u in inputs.iter_mut() {
            u.rows_mut(off, len).copy_from(&v.rows(cursor, len));
            cursor += len;
        }
    }
    Ok(inputs)
}

/// Index of `u_{n,k}[i]` in the stacked vector.
pub fn stacked_index(dims: &GameDims, n: usize, k: usize, i: usize) -> usize {
    dims.input_offset(n) * dims.num_stages() + k * dims.input_dims[n] + i
}
