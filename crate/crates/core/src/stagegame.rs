//! The static quadratic game solved at every stage of a backward pass.
//!
//! Player `n`'s model of the stage is `Q_n = ½[1;δx;δu]ᵀ Γ_n [1;δx;δu]`.
//! Setting each player's own-input gradient to zero gives
//! `F δu + P δx + H = 0`, where row block `n` of `F`, `P`, `H` is taken from
//! the `u_n` rows of `Γ_n`. `F` mixes rows from different players and is in
//! general not symmetric.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{lu_solve, symmetrize};

#[derive(Debug, Clone, PartialEq)]
pub struct StageGameCoefficients {
    pub f: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub h: DVector<f64>,
    /// λ applied when the game was solved; 0 until then.
    pub regularization: f64,
}

/// Equilibrium rule `δu = K δx + s`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStageRule {
    pub k: DMatrix<f64>,
    pub s: DVector<f64>,
}

impl AffineStageRule {
    pub fn zeros(nu: usize, nx: usize) -> Self {
        Self {
            k: DMatrix::zeros(nu, nx),
            s: DVector::zeros(nu),
        }
    }

    pub fn apply(&self, dx: &DVector<f64>, alpha: f64) -> DVector<f64> {
        &self.k * dx + alpha * &self.s
    }
}

/// Extracts `F`, `P`, `H` from the per-player bordered matrices.
pub fn assemble_stage_game(
    gammas: &[DMatrix<f64>],
    input_dims: &[usize],
    nx: usize,
) -> Result<StageGameCoefficients> {
    if gammas.len() != input_dims.len() {
        return Err(Error::dim(
            "number of player Γ matrices",
            input_dims.len(),
            gammas.len(),
        ));
    }
    let nu: usize = input_dims.iter().sum();
    let side = 1 + nx + nu;
    let mut f = DMatrix::zeros(nu, nu);
    let mut p = DMatrix::zeros(nu, nx);
    let mut h = DVector::zeros(nu);
    let mut row = 0;
    for (gamma, &dim) in gammas.iter().zip(input_dims) {
        if gamma.nrows() != side || gamma.ncols() != side {
            return Err(Error::dim("Γ side", side, gamma.nrows().max(gamma.ncols())));
        }
        let r0 = 1 + nx + row;
        f.rows_mut(row, dim)
            .copy_from(&gamma.view((r0, 1 + nx), (dim, nu)));
        p.rows_mut(row, dim)
            .copy_from(&gamma.view((r0, 1), (dim, nx)));
        h.rows_mut(row, dim)
            .copy_from(&gamma.view((r0, 0), (dim, 1)));
        row += dim;
    }
    Ok(StageGameCoefficients {
        f,
        p,
        h,
        regularization: 0.0,
    })
}

/// Solves `(F + λI) s = −H`, `(F + λI) K = −P`.
///
/// A numerically singular `F + λI` yields [`Error::SingularStageGame`]
/// (stage index 0; callers re-tag it) so the caller can raise λ.
pub fn solve_stage_game(coeffs: &StageGameCoefficients, lambda: f64) -> Result<AffineStageRule> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "regularization must be non-negative, got {lambda}"
        )));
    }
    let nu = coeffs.f.nrows();
    let nx = coeffs.p.ncols();
    let lhs = &coeffs.f + DMatrix::identity(nu, nu) * lambda;
    let mut rhs = DMatrix::zeros(nu, 1 + nx);
    rhs.column_mut(0).copy_from(&(-&coeffs.h));
    rhs.columns_mut(1, nx).copy_from(&(-&coeffs.p));
    let sol = lu_solve(&lhs, &rhs).map_err(|pivot| Error::SingularStageGame { stage: 0, pivot })?;
    Ok(AffineStageRule {
        s: sol.column(0).into_owned(),
        k: sol.columns(1, nx).into_owned(),
    })
}

/// Substitutes `δu = K δx + s` into `Γ`, giving the value matrix
/// `S = Eᵀ Γ E` with `E = [[1, 0], [0, I], [s, K]]`.
pub fn descend_value(gamma: &DMatrix<f64>, rule: &AffineStageRule) -> Result<DMatrix<f64>> {
    let (nu, nx) = rule.k.shape();
    let side = 1 + nx + nu;
    if gamma.nrows() != side || gamma.ncols() != side {
        return Err(Error::dim("Γ side", side, gamma.nrows()));
    }
    if rule.s.len() != nu {
        return Err(Error::dim("feedforward length", nu, rule.s.len()));
    }
    let mut e = DMatrix::zeros(side, 1 + nx);
    e[(0, 0)] = 1.0;
    e.view_mut((1, 1), (nx, nx)).fill_with_identity();
    e.view_mut((1 + nx, 0), (nu, 1)).copy_from(&rule.s);
    e.view_mut((1 + nx, 1), (nu, nx)).copy_from(&rule.k);
    let mut s = e.transpose() * gamma * &e;
    symmetrize(&mut s);
    Ok(s)
}

/// Open-loop descent. Row 0 is `[1, 0, sᵀ] Γ E`; the `x` rows are `Γ^{x·} E`,
/// player `n`'s costate: the gradient of its tail cost with respect to `x`
/// with every input held at the rule's value. The result is not symmetric.
///
/// [`descend_value`] instead substitutes the rule on both sides, and its `x`
/// rows pick up `K_mᵀ Γ_n^{u_m·} E` for the other players `m`, which is a
/// feedback response the open-loop conditions do not contain. For a single
/// player at `λ = 0` those terms vanish and both descents agree.
pub fn descend_costate(gamma: &DMatrix<f64>, rule: &AffineStageRule) -> Result<DMatrix<f64>> {
    let (nu, nx) = rule.k.shape();
    let side = 1 + nx + nu;
    if gamma.nrows() != side || gamma.ncols() != side {
        return Err(Error::dim("Γ side", side, gamma.nrows()));
    }
    if rule.s.len() != nu {
        return Err(Error::dim("feedforward length", nu, rule.s.len()));
    }
    let mut e = DMatrix::zeros(side, 1 + nx);
    e[(0, 0)] = 1.0;
    e.view_mut((1, 1), (nx, nx)).fill_with_identity();
    e.view_mut((1 + nx, 0), (nu, 1)).copy_from(&rule.s);
    e.view_mut((1 + nx, 1), (nu, nx)).copy_from(&rule.k);
    let ge = gamma * &e;
    let mut s = ge.rows(0, 1 + nx).into_owned();
    let top = ge.row(0) + rule.s.transpose() * ge.rows(1 + nx, nu);
    s.row_mut(0).copy_from(&top);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{mat_inf_norm, symmetrized};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        symmetrized(DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0)))
    }

    fn bordered_identity(nx: usize, nu: usize) -> DMatrix<f64> {
        let mut g = DMatrix::identity(1 + nx + nu, 1 + nx + nu);
        g[(0, 0)] = 0.0;
        g
    }

    #[test]
    fn single_player_takes_whole_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_symmetric(&mut rng, 1 + 2 + 3);
        let c = assemble_stage_game(std::slice::from_ref(&g), &[3], 2).unwrap();
        assert_eq!(c.f, g.view((3, 3), (3, 3)).into_owned());
        assert_eq!(c.p, g.view((3, 1), (3, 2)).into_owned());
        assert_eq!(c.h, g.view((3, 0), (3, 1)).column(0).into_owned());
    }

    #[test]
    fn bordered_identities_give_identity_f() {
        let g = bordered_identity(1, 2);
        let c = assemble_stage_game(&[g.clone(), g], &[1, 1], 1).unwrap();
        assert_eq!(c.f, DMatrix::identity(2, 2));
        assert_eq!(c.h, DVector::zeros(2));
    }

    #[test]
    fn extraction_matches_index_walk() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (nx, dims) = (2usize, [1usize, 2, 1]);
        let nu: usize = dims.iter().sum();
        let gammas: Vec<_> = (0..3)
            .map(|_| random_symmetric(&mut rng, 1 + nx + nu))
            .collect();
        let c = assemble_stage_game(&gammas, &dims, nx).unwrap();
        // Reference: walk every stacked input row and find its owner.
        let owner = |i: usize| -> usize {
            let mut acc = 0;
            for (n, d) in dims.iter().enumerate() {
                acc += d;
                if i < acc {
                    return n;
                }
            }
            unreachable!()
        };
        for i in 0..nu {
            let g = &gammas[owner(i)];
            assert_eq!(c.h[i], g[(1 + nx + i, 0)]);
            for j in 0..nx {
                assert_eq!(c.p[(i, j)], g[(1 + nx + i, 1 + j)]);
            }
            for j in 0..nu {
                assert_eq!(c.f[(i, j)], g[(1 + nx + i, 1 + nx + j)]);
            }
        }
    }

    #[test]
    fn assemble_rejects_bad_dims() {
        let g = bordered_identity(1, 2);
        assert!(assemble_stage_game(std::slice::from_ref(&g), &[1, 1], 1).is_err());
        assert!(assemble_stage_game(&[g.clone(), g], &[1, 1], 2).is_err());
    }

    fn coeffs(f: DMatrix<f64>, p: DMatrix<f64>, h: DVector<f64>) -> StageGameCoefficients {
        StageGameCoefficients {
            f,
            p,
            h,
            regularization: 0.0,
        }
    }

    #[test]
    fn identity_game() {
        let c = coeffs(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DVector::from_vec(vec![1.0, 1.0]),
        );
        let r = solve_stage_game(&c, 0.0).unwrap();
        assert_eq!(r.s, DVector::from_vec(vec![-1.0, -1.0]));
        assert_eq!(r.k, DMatrix::zeros(2, 1));
    }

    #[test]
    fn full_regularization_is_gradient_step() {
        let h = DVector::from_vec(vec![0.3, -2.0]);
        let c = coeffs(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), h.clone());
        let r = solve_stage_game(&c, 1.0).unwrap();
        assert_eq!(r.s, -h);
    }

    #[test]
    fn two_by_two_hand_elimination() {
        // [[2,1],[1,3]] s = -(1,1): s2 = -1/5, s1 = -2/5.
        let c = coeffs(
            DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]),
            DMatrix::zeros(2, 1),
            DVector::from_vec(vec![1.0, 1.0]),
        );
        let r = solve_stage_game(&c, 0.0).unwrap();
        assert!((r.s[0] + 0.4).abs() < 1e-15);
        assert!((r.s[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn singular_game_is_reported() {
        let c = coeffs(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            DVector::zeros(2),
        );
        assert!(matches!(
            solve_stage_game(&c, 0.0),
            Err(Error::SingularStageGame { .. })
        ));
        assert!(solve_stage_game(&c, 1e-3).is_ok());
        assert!(matches!(
            solve_stage_game(&c, -1.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn solution_residuals_are_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let f = DMatrix::from_fn(3, 3, |i, j| {
                rng.gen_range(-1.0..1.0) + if i == j { 3.0 } else { 0.0 }
            });
            let c = coeffs(
                f,
                DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0)),
                DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)),
            );
            for lambda in [0.0, 0.5, 10.0] {
                let r = solve_stage_game(&c, lambda).unwrap();
                let lhs = &c.f + DMatrix::identity(3, 3) * lambda;
                let scale = 1e-10 * mat_inf_norm(&lhs);
                assert!((&lhs * &r.s + &c.h).amax() <= scale);
                assert!((&lhs * &r.k + &c.p).amax() <= scale);
            }
        }
    }

    #[test]
    fn zero_rule_keeps_leading_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_symmetric(&mut rng, 1 + 2 + 2);
        let s = descend_value(&g, &AffineStageRule::zeros(2, 2)).unwrap();
        assert_eq!(s, g.view((0, 0), (3, 3)).into_owned());
    }

    #[test]
    fn scalar_lqr_descent_matches_riccati() {
        // One player, x+ = a x + b u, stage cost ½(q x² + r u²), next value ½ p x².
        let (a, b, q, r, p_next) = (1.1, 0.7, 2.0, 0.5, 3.0);
        let mut gamma = DMatrix::zeros(3, 3);
        gamma[(1, 1)] = q + a * a * p_next;
        gamma[(1, 2)] = a * b * p_next;
        gamma[(2, 1)] = a * b * p_next;
        gamma[(2, 2)] = r + b * b * p_next;
        let c = assemble_stage_game(std::slice::from_ref(&gamma), &[1], 1).unwrap();
        let rule = solve_stage_game(&c, 0.0).unwrap();
        let s = descend_value(&gamma, &rule).unwrap();
        let gain = a * b * p_next / (r + b * b * p_next);
        let riccati = q + a * a * p_next - (a * b * p_next).powi(2) / (r + b * b * p_next);
        assert!((rule.k[(0, 0)] + gain).abs() < 1e-14);
        assert!((s[(1, 1)] - riccati).abs() < 1e-12);
        assert_eq!(rule.s[0], 0.0);
    }

    #[test]
    fn descent_equals_substitution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (nx, nu) = (3, 2);
        let g = random_symmetric(&mut rng, 1 + nx + nu);
        let rule = AffineStageRule {
            k: DMatrix::from_fn(nu, nx, |_, _| rng.gen_range(-1.0..1.0)),
            s: DVector::from_fn(nu, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let s = descend_value(&g, &rule).unwrap();
        assert_eq!(s, s.transpose());
        for _ in 0..100 {
            let dx = DVector::from_fn(nx, |_, _| rng.gen_range(-1.0..1.0));
            let du = rule.apply(&dx, 1.0);
            let z = DVector::from_iterator(
                1 + nx + nu,
                std::iter::once(1.0)
                    .chain(dx.iter().copied())
                    .chain(du.iter().copied()),
            );
            let y = DVector::from_iterator(1 + nx, std::iter::once(1.0).chain(dx.iter().copied()));
            let lhs = 0.5 * y.dot(&(&s * &y));
            let rhs = 0.5 * z.dot(&(&g * &z));
            assert!(
                (lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0),
                "{lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn stationarity_of_each_player() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (nx, dims) = (2, [1usize, 2]);
        let nu = 3;
        let gammas: Vec<_> = (0..2)
            .map(|_| {
                let mut g = random_symmetric(&mut rng, 1 + nx + nu);
                for i in 0..nu {
                    g[(1 + nx + i, 1 + nx + i)] += 4.0;
                }
                g
            })
            .collect();
        let c = assemble_stage_game(&gammas, &dims, nx).unwrap();
        let rule = solve_stage_game(&c, 0.0).unwrap();
        for _ in 0..10 {
            let dx = DVector::from_fn(nx, |_, _| rng.gen_range(-1.0..1.0));
            let du = rule.apply(&dx, 1.0);
            let z = DVector::from_iterator(
                1 + nx + nu,
                std::iter::once(1.0)
                    .chain(dx.iter().copied())
                    .chain(du.iter().copied()),
            );
            // Player n's own-input gradient of ½zᵀΓ_n z is the u_n rows of Γ_n z.
            let mut off = 0;
            for (n, &d) in dims.iter().enumerate() {
                let grad = (&gammas[n] * &z).rows(1 + nx + off, d).into_owned();
                assert!(grad.amax() < 1e-12);
                off += d;
            }
        }
    }

    #[test]
    fn costate_descent_keeps_partial_gradient_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = random_symmetric(&mut rng, 1 + 2 + 2);
        let rule = AffineStageRule {
            k: DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0)),
            s: DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let s = descend_costate(&g, &rule).unwrap();
        for _ in 0..20 {
            let dx = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let du = rule.apply(&dx, 1.0);
            let z = DVector::from_iterator(
                5,
                std::iter::once(1.0)
                    .chain(dx.iter().copied())
                    .chain(du.iter().copied()),
            );
            let direct = (&g * &z).rows(1, 2).into_owned();
            let lifted = DVector::from_iterator(3, std::iter::once(1.0).chain(dx.iter().copied()));
            let via = (&s * &lifted).rows(1, 2).into_owned();
            assert!((direct - via).amax() <= 1e-12);
        }
    }

    #[test]
    fn costate_descent_matches_substitution_for_one_player() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let g = random_symmetric(&mut rng, 1 + 3 + 2);
            let g = &g + DMatrix::from_fn(6, 6, |i, j| if i == j && i >= 4 { 4.0 } else { 0.0 });
            let c = assemble_stage_game(std::slice::from_ref(&g), &[2], 3).unwrap();
            let rule = solve_stage_game(&c, 0.0).unwrap();
            let a = descend_value(&g, &rule).unwrap();
            let b = descend_costate(&g, &rule).unwrap();
            assert!((&a - &b).amax() <= 1e-10 * g.amax().max(1.0));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // If the solve succeeds at λ, it also succeeds at any larger λ when F's symmetric part is positive.
            #[test]
            fn invertibility_is_monotone_in_lambda(
                entries in prop::collection::vec(-1.0f64..1.0, 9),
                lambda in 0.0f64..5.0,
                extra in 0.0f64..100.0,
            ) {
                let a = DMatrix::from_row_slice(3, 3, &entries);
                let f = &a * a.transpose() + (&a - a.transpose()) * 2.0 + DMatrix::identity(3, 3) * 1e-3;
                let c = coeffs(f, DMatrix::zeros(3, 1), DVector::from_element(3, 1.0));
                if solve_stage_game(&c, lambda).is_ok() {
                    prop_assert!(solve_stage_game(&c, lambda + extra).is_ok());
                }
            }
        }
    }
}
