//! Backward recursion shared by the DDP pass and the exact Newton pass.
//!
//! Both recursions propagate per-player value matrices `S_{n,k}` through
//!
//! ```text
//! Γ_{n,k} = M_{n,k} + Lᵀ S_{n,k+1} L + diag(0, D_{n,k}),   L = [[1, 0, 0], [0, A_k, B_k]]
//! D_{n,k} = Σ_l w^l G_k^l
//! ```
//!
//! and differ only in the weight vector `w`: DDP uses player `n`'s costate
//! at the nominal state, `S̃^{x1}_{n,k+1}`; the Newton recursion uses the
//! tail-cost gradient `Ω_{n,k+1}`.
//!
//! The `x` rows of `S_{n,k}` carry the costate (see
//! [`descend_costate`]), so `Γ` is a gradient Jacobian rather than a
//! Hessian and is not symmetrized. The symmetric substitution of
//! [`descend_value`] is kept as [`ValueUpdate::Substitution`] for
//! comparison; for more than one player its fixed points are not zeros of
//! `𝒥`.

use nalgebra::{DMatrix, DVector};

use crate::diff::Quadraticization;
use crate::error::Result;
use crate::linalg::symmetrize;
use crate::stagegame::{
    assemble_stage_game, descend_costate, descend_value, solve_stage_game, AffineStageRule,
    StageGameCoefficients,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CurvatureWeight {
    ValueGradient,
    TailGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ValueUpdate {
    Costate,
    Substitution,
}

pub(crate) struct RecursionOutput {
    pub rules: Vec<AffineStageRule>,
    pub values: Vec<Vec<DMatrix<f64>>>,
    pub gammas: Vec<Vec<DMatrix<f64>>>,
    pub d_terms: Vec<Vec<DMatrix<f64>>>,
    pub omegas: Vec<Vec<DVector<f64>>>,
    pub coefficients: Vec<StageGameCoefficients>,
}

pub(crate) fn backward_recursion(
    quads: &Quadraticization,
    lambda: f64,
    weight: CurvatureWeight,
) -> Result<RecursionOutput> {
    backward_recursion_with(quads, lambda, weight, ValueUpdate::Costate)
}

pub(crate) fn backward_recursion_with(
    quads: &Quadraticization,
    lambda: f64,
    weight: CurvatureWeight,
    update: ValueUpdate,
) -> Result<RecursionOutput> {
    let dims = &quads.dims;
    let (nx, nu, np) = (dims.state_dim, dims.input_dim(), dims.num_players());
    let stages = quads.stages.len();
    let side = 1 + nx + nu;

    let mut values = vec![vec![DMatrix::zeros(1 + nx, 1 + nx); stages + 1]; np];
    let mut omegas = vec![vec![DVector::zeros(nx); stages + 1]; np];
    let mut gammas = vec![Vec::with_capacity(stages); np];
    let mut d_terms = vec![Vec::with_capacity(stages); np];
    let mut rules = Vec::with_capacity(stages);
    let mut coefficients = Vec::with_capacity(stages);

    for (k, stage) in quads.stages.iter().enumerate().rev() {
        let mut stage_gammas = Vec::with_capacity(np);
        for n in 0..np {
            let m = &stage.m[n];
            let grad_x: DVector<f64> = m.column(0).rows(1, nx).into_owned();
            let (gamma, d) = match &stage.dynamics {
                Some(dynx) => {
                    omegas[n][k] = grad_x + dynx.a.transpose() * &omegas[n][k + 1];
                    let next = &values[n][k + 1];
                    let w: DVector<f64> = match weight {
                        CurvatureWeight::ValueGradient => next.column(0).rows(1, nx).into_owned(),
                        CurvatureWeight::TailGradient => omegas[n][k + 1].clone(),
                    };
                    let mut d = DMatrix::zeros(nx + nu, nx + nu);
                    for (wl, g) in w.iter().zip(&dynx.g) {
                        d += g * *wl;
                    }
                    let mut lift = DMatrix::zeros(1 + nx, side);
                    lift[(0, 0)] = 1.0;
                    lift.view_mut((1, 1), (nx, nx)).copy_from(&dynx.a);
                    lift.view_mut((1, 1 + nx), (nx, nu)).copy_from(&dynx.b);
                    let mut gamma = m + lift.transpose() * next * &lift;
                    let mut inner = gamma.view_mut((1, 1), (nx + nu, nx + nu));
                    inner += &d;
                    if update == ValueUpdate::Substitution {
                        symmetrize(&mut gamma);
                    }
                    (gamma, d)
                }
                None => {
                    omegas[n][k] = grad_x;
                    (m.clone(), DMatrix::zeros(nx + nu, nx + nu))
                }
            };
            stage_gammas.push(gamma);
            d_terms[n].push(d);
        }

        let mut coeffs = assemble_stage_game(&stage_gammas, &dims.input_dims, nx)?;
        coeffs.regularization = lambda;
        let rule = solve_stage_game(&coeffs, lambda).map_err(|e| e.at_stage(k))?;
        for n in 0..np {
            values[n][k] = match update {
                ValueUpdate::Costate => descend_costate(&stage_gammas[n], &rule)?,
                ValueUpdate::Substitution => descend_value(&stage_gammas[n], &rule)?,
            };
        }
        for (n, g) in stage_gammas.into_iter().enumerate() {
            gammas[n].push(g);
        }
        rules.push(rule);
        coefficients.push(coeffs);
    }

    // Filled back to front.
    rules.reverse();
    coefficients.reverse();
    for n in 0..np {
        gammas[n].reverse();
        d_terms[n].reverse();
    }

    Ok(RecursionOutput {
        rules,
        values,
        gammas,
        d_terms,
        omegas,
        coefficients,
    })
}
