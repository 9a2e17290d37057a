//! Seeded linear-quadratic games.
//!
//! Dynamics `x_{k+1} = A x_k + B u_k` with `‖A‖₂ = 1 − margin`, and player `n`
//! paying `½ zᵀ W_n z + q_nᵀ z` with `z = (x, u_n)` and `W_n` positive
//! definite. Since the dynamics are linear and the costs quadratic, one
//! Newton step from anywhere lands on the equilibrium.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::AnalyticDerivatives;
use crate::error::{Error, Result};
use crate::game::GameProblem;

#[derive(Debug, Clone, PartialEq)]
pub struct LqOptions {
    pub seed: u64,
    pub players: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub input_dims: Vec<usize>,
    pub stability_margin: f64,
    /// Include the linear cost terms `q_n`. Without them the equilibrium
    /// from `x_0 = 0` would be trivial, so they default to on.
    pub linear_terms: bool,
}

impl Default for LqOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            players: 2,
            horizon: 5,
            state_dim: 2,
            input_dims: vec![1, 1],
            stability_margin: 0.1,
            linear_terms: true,
        }
    }
}

/// The matrices behind an LQ game, exposed so tests can run independent
/// oracles against them.
#[derive(Debug, Clone, PartialEq)]
pub struct LqData {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub input_dims: Vec<usize>,
    /// `W_n`, square of side `n_x + n_{u_n}`.
    pub weights: Vec<DMatrix<f64>>,
    /// `q_n`, length `n_x + n_{u_n}`.
    pub linear: Vec<DVector<f64>>,
}

pub(crate) fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub(crate) fn uniform_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.gen_range(-1.0..1.0))
}

/// `L Lᵀ / side + floor·I`, positive definite with smallest eigenvalue ≥ `floor`.
pub(crate) fn random_spd(rng: &mut ChaCha8Rng, side: usize, floor: f64) -> DMatrix<f64> {
    let l = uniform_matrix(rng, side, side);
    &l * l.transpose() / side as f64 + DMatrix::identity(side, side) * floor
}

/// A random matrix rescaled to spectral norm `target`.
pub(crate) fn random_contraction(rng: &mut ChaCha8Rng, side: usize, target: f64) -> DMatrix<f64> {
    let a = uniform_matrix(rng, side, side);
    let norm = a.clone().singular_values().max();
    if norm > 0.0 {
        a * (target / norm)
    } else {
        a
    }
}

pub(crate) fn check_dims(players: usize, state_dim: usize, input_dims: &[usize]) -> Result<()> {
    if players == 0 {
        return Err(Error::InvalidProblem("need at least one player".into()));
    }
    if state_dim == 0 {
        return Err(Error::InvalidProblem(
            "state dimension must be positive".into(),
        ));
    }
    if input_dims.len() != players {
        return Err(Error::dim("input_dims", players, input_dims.len()));
    }
    Ok(())
}

pub fn lq_data(opts: &LqOptions) -> Result<LqData> {
    check_dims(opts.players, opts.state_dim, &opts.input_dims)?;
    if !(opts.stability_margin > 0.0 && opts.stability_margin <= 1.0) {
        return Err(Error::BadParameter {
            name: "stability_margin".into(),
            reason: format!("must lie in (0, 1], got {}", opts.stability_margin),
        });
    }
    let nx = opts.state_dim;
    let nu: usize = opts.input_dims.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let a = random_contraction(&mut rng, nx, 1.0 - opts.stability_margin);
    let b = uniform_matrix(&mut rng, nx, nu);
    let x0 = uniform_vector(&mut rng, nx);
    let mut weights = Vec::with_capacity(opts.players);
    let mut linear = Vec::with_capacity(opts.players);
    for &d in &opts.input_dims {
        weights.push(random_spd(&mut rng, nx + d, 0.5));
        let q = uniform_vector(&mut rng, nx + d);
        linear.push(if opts.linear_terms {
            q
        } else {
            DVector::zeros(nx + d)
        });
    }
    Ok(LqData {
        a,
        b,
        x0,
        input_dims: opts.input_dims.clone(),
        weights,
        linear,
    })
}

impl LqData {
    fn offsets(&self) -> Vec<usize> {
        self.input_dims
            .iter()
            .scan(0, |acc, &d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect()
    }

    /// Indices of `(x, u_n)` inside the full `(x, u)` vector.
    fn selection(&self, n: usize) -> Vec<usize> {
        let nx = self.a.nrows();
        let off = nx + self.offsets()[n];
        (0..nx).chain(off..off + self.input_dims[n]).collect()
    }

    pub fn into_problem(self, id: &str, horizon: usize) -> Result<GameProblem> {
        let nx = self.a.nrows();
        let nu: usize = self.input_dims.iter().sum();
        let data = Arc::new(self);
        let sel: Arc<Vec<Vec<usize>>> = Arc::new(
            (0..data.input_dims.len())
                .map(|n| data.selection(n))
                .collect(),
        );

        let local = {
            let sel = sel.clone();
            move |n: usize, x: &DVector<f64>, u: &DVector<f64>| {
                DVector::from_iterator(
                    sel[n].len(),
                    sel[n]
                        .iter()
                        .map(|&i| if i < nx { x[i] } else { u[i - nx] }),
                )
            }
        };
        let local = Arc::new(local);

        let dynamics = {
            let data = data.clone();
            Arc::new(move |_: usize, x: &DVector<f64>, u: &DVector<f64>| &data.a * x + &data.b * u)
        };
        let cost = {
            let (data, local) = (data.clone(), local.clone());
            Arc::new(
                move |n: usize, _: usize, x: &DVector<f64>, u: &DVector<f64>| {
                    let z = local(n, x, u);
                    0.5 * z.dot(&(&data.weights[n] * &z)) + data.linear[n].dot(&z)
                },
            )
        };
        let jacobian = {
            let data = data.clone();
            Arc::new(move |_: usize, _: &DVector<f64>, _: &DVector<f64>| {
                let mut j = DMatrix::zeros(nx, nx + nu);
                j.columns_mut(0, nx).copy_from(&data.a);
                j.columns_mut(nx, nu).copy_from(&data.b);
                j
            })
        };
        let gradient = {
            let (data, sel, local) = (data.clone(), sel.clone(), local.clone());
            Arc::new(
                move |n: usize, _: usize, x: &DVector<f64>, u: &DVector<f64>| {
                    let g = &data.weights[n] * local(n, x, u) + &data.linear[n];
                    let mut full = DVector::zeros(nx + nu);
                    for (a, &i) in sel[n].iter().enumerate() {
                        full[i] = g[a];
                    }
                    full
                },
            )
        };
        let hessian = {
            let (data, sel) = (data.clone(), sel.clone());
            Arc::new(
                move |n: usize, _: usize, _: &DVector<f64>, _: &DVector<f64>| {
                    let mut full = DMatrix::zeros(nx + nu, nx + nu);
                    for (a, &i) in sel[n].iter().enumerate() {
                        for (b, &j) in sel[n].iter().enumerate() {
                            full[(i, j)] = data.weights[n][(a, b)];
                        }
                    }
                    full
                },
            )
        };
        let analytic = AnalyticDerivatives {
            dynamics_jacobian: Some(jacobian),
            dynamics_hessian: Some(Arc::new(move |_, _: &DVector<f64>, _: &DVector<f64>| {
                vec![DMatrix::zeros(nx + nu, nx + nu); nx]
            })),
            cost_gradient: Some(gradient),
            cost_hessian: Some(hessian),
        };
        Ok(GameProblem::new(
            id,
            horizon,
            data.input_dims.clone(),
            data.x0.clone(),
            dynamics,
            cost,
        )?
        .with_analytic(analytic))
    }
}

pub fn build_lq_game(opts: &LqOptions) -> Result<GameProblem> {
    let id = if opts.players == 1 {
        "single_agent"
    } else {
        "lq"
    };
    lq_data(opts)?.into_problem(id, opts.horizon)
}
