//! Seeded smooth nonlinear games used as oracle fixtures.
//!
//! Dynamics `f^l = (A x + B u)_l + β_l tanh(xᵀ C_l u)`; player `n` pays
//! `½ zᵀ Q_n z + q_nᵀ z + γ_n sin(a_nᵀ z + φ_n)` over `z = (x, u)`. The sine
//! amplitude is `γ_n = 0.2 / ‖a_n‖²`, below the `0.5` eigenvalue floor of
//! `Q_n`, so every own-input Hessian block stays positive definite.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::lq::{check_dims, random_contraction, random_spd, uniform_matrix, uniform_vector};
use crate::ddp::ddp_backward;
use crate::diff::{quadraticize, AnalyticDerivatives, DerivativeMode, DerivativeProvider};
use crate::error::{Error, Result};
use crate::game::{rollout, GameProblem};
use crate::newton::newton_backward;

const MAX_RESEEDS: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RandomGameOptions {
    pub seed: u64,
    pub players: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub input_dims: Vec<usize>,
}

impl Default for RandomGameOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            players: 2,
            horizon: 5,
            state_dim: 2,
            input_dims: vec![1, 1],
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomGame {
    pub problem: GameProblem,
    /// Seed the accepted instance was drawn from; differs from the request
    /// only after a re-seed.
    pub seed_used: u64,
    pub notes: Vec<String>,
}

struct Data {
    nx: usize,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    beta: Vec<f64>,
    c: Vec<DMatrix<f64>>,
    q: Vec<DMatrix<f64>>,
    lin: Vec<DVector<f64>>,
    gamma: Vec<f64>,
    dir: Vec<DVector<f64>>,
    phase: Vec<f64>,
}

impl Data {
    fn draw(seed: u64, opts: &RandomGameOptions) -> (Self, DVector<f64>) {
        let nx = opts.state_dim;
        let nu: usize = opts.input_dims.iter().sum();
        let nz = nx + nu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_contraction(&mut rng, nx, 0.9);
        let b = uniform_matrix(&mut rng, nx, nu);
        let beta = (0..nx)
            .map(|_| if rng.gen_bool(0.5) { 0.5 } else { -0.5 })
            .collect();
        let c = (0..nx).map(|_| uniform_matrix(&mut rng, nx, nu)).collect();
        let x0 = uniform_vector(&mut rng, nx);
        let (mut q, mut lin, mut gamma, mut dir, mut phase) =
            (vec![], vec![], vec![], vec![], vec![]);
        for _ in 0..opts.players {
            q.push(random_spd(&mut rng, nz, 0.5));
            lin.push(uniform_vector(&mut rng, nz));
            let d = uniform_vector(&mut rng, nz);
            gamma.push(0.2 / d.norm_squared().max(1e-12));
            dir.push(d);
            phase.push(rng.gen_range(0.0..std::f64::consts::TAU));
        }
        let data = Data {
            nx,
            a,
            b,
            beta,
            c,
            q,
            lin,
            gamma,
            dir,
            phase,
        };
        (data, x0)
    }

    fn join(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut f = &self.a * x + &self.b * u;
        for l in 0..self.nx {
            f[l] += self.beta[l] * x.dot(&(&self.c[l] * u)).tanh();
        }
        f
    }

    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let (nx, nu) = (self.nx, u.len());
        let mut j = DMatrix::zeros(nx, nx + nu);
        j.columns_mut(0, nx).copy_from(&self.a);
        j.columns_mut(nx, nu).copy_from(&self.b);
        for l in 0..nx {
            let cu = &self.c[l] * u;
            let ctx = self.c[l].transpose() * x;
            let s1 = 1.0 - x.dot(&cu).tanh().powi(2);
            let w = self.beta[l] * s1;
            for i in 0..nx {
                j[(l, i)] += w * cu[i];
            }
            for i in 0..nu {
                j[(l, nx + i)] += w * ctx[i];
            }
        }
        j
    }

    fn hessians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let (nx, nu) = (self.nx, u.len());
        (0..nx)
            .map(|l| {
                let grad = self.join(&(&self.c[l] * u), &(self.c[l].transpose() * x));
                let t = x.dot(&(&self.c[l] * u)).tanh();
                let s1 = 1.0 - t * t;
                let s2 = -2.0 * t * s1;
                let mut h = &grad * grad.transpose() * s2;
                let mut cross = DMatrix::zeros(nx + nu, nx + nu);
                cross.view_mut((0, nx), (nx, nu)).copy_from(&self.c[l]);
                cross
                    .view_mut((nx, 0), (nu, nx))
                    .copy_from(&self.c[l].transpose());
                h += cross * s1;
                h * self.beta[l]
            })
            .collect()
    }

    fn cost(&self, n: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let z = self.join(x, u);
        0.5 * z.dot(&(&self.q[n] * &z))
            + self.lin[n].dot(&z)
            + self.gamma[n] * (self.dir[n].dot(&z) + self.phase[n]).sin()
    }

    fn cost_gradient(&self, n: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let z = self.join(x, u);
        let arg = self.dir[n].dot(&z) + self.phase[n];
        &self.q[n] * &z + &self.lin[n] + &self.dir[n] * (self.gamma[n] * arg.cos())
    }

    fn cost_hessian(&self, n: usize, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let z = self.join(x, u);
        let arg = self.dir[n].dot(&z) + self.phase[n];
        &self.q[n] - &self.dir[n] * self.dir[n].transpose() * (self.gamma[n] * arg.sin())
    }
}

fn assemble(id: &str, opts: &RandomGameOptions, seed: u64) -> Result<GameProblem> {
    let (data, x0) = Data::draw(seed, opts);
    let data = Arc::new(data);
    let d = data.clone();
    let dynamics = Arc::new(move |_: usize, x: &DVector<f64>, u: &DVector<f64>| d.dynamics(x, u));
    let d = data.clone();
    let cost =
        Arc::new(move |n: usize, _: usize, x: &DVector<f64>, u: &DVector<f64>| d.cost(n, x, u));
    let (d1, d2, d3, d4) = (data.clone(), data.clone(), data.clone(), data);
    let analytic = AnalyticDerivatives {
        dynamics_jacobian: Some(Arc::new(move |_, x: &DVector<f64>, u: &DVector<f64>| {
            d1.jacobian(x, u)
        })),
        dynamics_hessian: Some(Arc::new(move |_, x: &DVector<f64>, u: &DVector<f64>| {
            d2.hessians(x, u)
        })),
        cost_gradient: Some(Arc::new(move |n, _, x: &DVector<f64>, u: &DVector<f64>| {
            d3.cost_gradient(n, x, u)
        })),
        cost_hessian: Some(Arc::new(move |n, _, x: &DVector<f64>, u: &DVector<f64>| {
            d4.cost_hessian(n, x, u)
        })),
    };
    Ok(GameProblem::new(
        id,
        opts.horizon,
        opts.input_dims.clone(),
        x0,
        dynamics,
        cost,
    )?
    .with_analytic(analytic))
}

/// Both recursions must get through every stage at `λ = 0` from `u = 0`.
fn solvable_at_origin(p: &GameProblem) -> Result<bool> {
    let provider = DerivativeProvider::for_problem(p, DerivativeMode::Analytic);
    let quads = quadraticize(p, &rollout(p, &p.zero_inputs())?, &provider)?;
    let singular = |e: &Error| matches!(e, Error::SingularStageGame { .. });
    for ok in [
        ddp_backward(&quads, 0.0).map(|_| ()),
        newton_backward(&quads, 0.0).map(|_| ()),
    ] {
        match ok {
            Ok(()) => {}
            Err(e) if singular(&e) => return Ok(false),
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

pub fn build_random_smooth_game(opts: &RandomGameOptions) -> Result<RandomGame> {
    check_dims(opts.players, opts.state_dim, &opts.input_dims)?;
    let mut notes = Vec::new();
    for attempt in 0..MAX_RESEEDS {
        let seed = opts
            .seed
            .wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let problem = assemble("random_smooth", opts, seed)?;
        if solvable_at_origin(&problem)? {
            return Ok(RandomGame {
                problem,
                seed_used: seed,
                notes,
            });
        }
        notes.push(format!(
            "seed {seed}: a stage game is singular at u = 0 with λ = 0, re-seeding"
        ));
    }
    Err(Error::InvalidProblem(format!(
        "no solvable random game after {MAX_RESEEDS} seeds starting from {}",
        opts.seed
    )))
}
