//! The exact Newton step on the necessary conditions `𝒥(u) = 0`, two ways.
//!
//! * [`newton_step_dp`] runs the stagewise recursion whose value functions
//!   carry the tail-cost gradient `Ω_{n,k}` in place of DDP's value
//!   gradient, then propagates `δx_{k+1} = A_k δx_k + B_k δu_k` from
//!   `δx_0 = 0`. The second-order state `Δx` never needs to be formed: it
//!   only enters through `Ω_{n,k} Δx_k`, which the recursion folds into
//!   `D_{n,k} = Σ_l Ω^l_{n,k+1} G^l_k`.
//! * [`newton_step_dense`] builds `∂𝒥/∂u` column by column with central
//!   differences of the residual map and solves the dense system. It is the
//!   oracle for the recursion and is only meant for small problems.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::diff::{linearize, quadraticize, DerivativeProvider, Linearization, Quadraticization};
use crate::error::{Error, Result};
use crate::game::{rollout, stack_inputs, unstack_inputs, GameProblem, Trajectory};
use crate::linalg::{lu_solve, mat_inf_norm, vec_inf_norm};
use crate::recursion::{backward_recursion, CurvatureWeight};
use crate::stagegame::{AffineStageRule, StageGameCoefficients};

/// Default cap on the number of unknowns in the dense oracle.
pub const DENSE_ORACLE_CAP: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonBackwardResult {
    pub lambda: f64,
    pub rules: Vec<AffineStageRule>,
    /// `values[n][k]`, `k = 0..=T+1`, with `values[n][T+1] = 0`.
    pub values: Vec<Vec<DMatrix<f64>>>,
    /// `omegas[n][k]` as a column vector, `k = 0..=T+1`, with `omegas[n][T+1] = 0`.
    pub omegas: Vec<Vec<DVector<f64>>>,
    pub gammas: Vec<Vec<DMatrix<f64>>>,
    pub d_terms: Vec<Vec<DMatrix<f64>>>,
    pub coefficients: Vec<StageGameCoefficients>,
}

pub fn newton_backward(quads: &Quadraticization, lambda: f64) -> Result<NewtonBackwardResult> {
    let out = backward_recursion(quads, lambda, CurvatureWeight::TailGradient)?;
    Ok(NewtonBackwardResult {
        lambda,
        rules: out.rules,
        values: out.values,
        omegas: out.omegas,
        gammas: out.gammas,
        d_terms: out.d_terms,
        coefficients: out.coefficients,
    })
}

/// `Ω_{n,k}`: gradient of player `n`'s tail cost `Σ_{i≥k} c_{n,i}` with
/// respect to `x_k` along the nominal trajectory. Indexed `[n][k]`,
/// `k = 0..=T+1`.
pub fn tail_gradients(lin: &Linearization) -> Vec<Vec<DVector<f64>>> {
    let nx = lin.dims.state_dim;
    let stages = lin.stages.len();
    let mut omegas = vec![vec![DVector::zeros(nx); stages + 1]; lin.dims.num_players()];
    for (n, omega) in omegas.iter_mut().enumerate() {
        for (k, st) in lin.stages.iter().enumerate().rev() {
            let grad_x = st.cost_gradients[n].rows(0, nx).into_owned();
            omega[k] = match &st.dynamics {
                Some((a, _)) => grad_x + a.transpose() * &omega[k + 1],
                None => grad_x,
            };
        }
    }
    omegas
}

/// Stacked necessary conditions: block `(n, k)` is
/// `∂J_n/∂u_{n,k} = c_u + (Ω_{n,k+1} B_k)` restricted to player `n`'s inputs.
pub fn necessary_conditions(lin: &Linearization) -> DVector<f64> {
    let dims = &lin.dims;
    let nx = dims.state_dim;
    let omegas = tail_gradients(lin);
    let mut out = Vec::with_capacity(dims.stacked_len());
    for n in 0..dims.num_players() {
        let (off, len) = (dims.input_offset(n), dims.input_dims[n]);
        for (k, st) in lin.stages.iter().enumerate() {
            let mut g = st.cost_gradients[n].rows(nx + off, len).into_owned();
            if let Some((_, b)) = &st.dynamics {
                g += b.columns(off, len).transpose() * &omegas[n][k + 1];
            }
            out.extend(g.iter());
        }
    }
    DVector::from_vec(out)
}

/// Linear propagation of the affine rules from `δx_0 = 0`.
/// Returns `(δx_k, δu_k)` for `k = 0..=T`.
pub fn propagate_linear(
    quads: &Quadraticization,
    rules: &[AffineStageRule],
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let nx = quads.dims.state_dim;
    let mut dx = vec![DVector::zeros(nx)];
    let mut du = Vec::with_capacity(rules.len());
    for (st, rule) in quads.stages.iter().zip(rules) {
        let u = rule.apply(dx.last().unwrap(), 1.0);
        if let Some(d) = &st.dynamics {
            let next = &d.a * dx.last().unwrap() + &d.b * &u;
            dx.push(next);
        }
        du.push(u);
    }
    (dx, du)
}

/// Newton step for `𝒥(u) = 0` from the stagewise recursion. With `λ = 0`
/// this is the exact Newton step.
pub fn newton_step_dp(
    problem: &GameProblem,
    traj: &Trajectory,
    provider: &DerivativeProvider,
    lambda: f64,
) -> Result<Vec<DVector<f64>>> {
    let quads = quadraticize(problem, traj, provider)?;
    let back = newton_backward(&quads, lambda)?;
    Ok(propagate_linear(&quads, &back.rules).1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNewtonSystem {
    /// `∂𝒥/∂u`; row block `n` differentiates player `n`'s own gradient.
    pub jacobian: DMatrix<f64>,
    /// `−𝒥(ū)`.
    pub rhs: DVector<f64>,
    /// `δu^N`, stacked player-major.
    pub solution: DVector<f64>,
    /// `‖∇𝒥 δu − rhs‖∞ / (‖∇𝒥‖∞ ‖δu‖∞ + ‖rhs‖∞)`.
    pub relative_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseOptions {
    pub cap: usize,
    /// Relative step; column `j` uses `h = rel_step · max(1, |u_j|)`.
    pub rel_step: f64,
}

impl Default for DenseOptions {
    fn default() -> Self {
        Self {
            cap: DENSE_ORACLE_CAP,
            rel_step: 1e-5,
        }
    }
}

/// `𝒥` at the rollout of `inputs`, stacked player-major.
pub fn residual_at(
    problem: &GameProblem,
    inputs: &[DVector<f64>],
    provider: &DerivativeProvider,
) -> Result<DVector<f64>> {
    let traj = rollout(problem, inputs)?;
    Ok(necessary_conditions(&linearize(problem, &traj, provider)?))
}

pub fn newton_step_dense(
    problem: &GameProblem,
    traj: &Trajectory,
    provider: &DerivativeProvider,
    options: DenseOptions,
) -> Result<DenseNewtonSystem> {
    let dims = problem.dims();
    let m = dims.stacked_len();
    if m > options.cap {
        return Err(Error::OracleCapExceeded {
            size: m,
            cap: options.cap,
        });
    }
    problem.check_trajectory(traj)?;
    let u = stack_inputs(dims, &traj.inputs)?;
    let rhs = -necessary_conditions(&linearize(problem, traj, provider)?);

    let columns = (0..m)
        .into_par_iter()
        .map(|j| {
            let h = options.rel_step * u[j].abs().max(1.0);
            let (mut up, mut um) = (u.clone(), u.clone());
            up[j] += h;
            um[j] -= h;
            let rp = residual_at(problem, &unstack_inputs(dims, &up)?, provider)?;
            let rm = residual_at(problem, &unstack_inputs(dims, &um)?, provider)?;
            Ok((rp - rm) / (2.0 * h))
        })
        .collect::<Result<Vec<_>>>()?;
    let jacobian = DMatrix::from_columns(&columns);

    let rhs_mat = DMatrix::from_column_slice(m, 1, rhs.as_slice());
    let solution = lu_solve(&jacobian, &rhs_mat)
        .map_err(|pivot| Error::SingularNewtonSystem { pivot })?
        .column(0)
        .into_owned();
    let scale = mat_inf_norm(&jacobian) * vec_inf_norm(&solution) + vec_inf_norm(&rhs);
    let relative_residual = if scale > 0.0 {
        vec_inf_norm(&(&jacobian * &solution - &rhs)) / scale
    } else {
        0.0
    };
    Ok(DenseNewtonSystem {
        jacobian,
        rhs,
        solution,
        relative_residual,
    })
}
