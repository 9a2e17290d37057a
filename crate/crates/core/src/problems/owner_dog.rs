//! The two-player owner-dog game on a line.
//!
//! State `(x⁰, x¹)` = (owner, dog) positions, each moved by `tanh` of its
//! own player's input. The owner wants to reach 1 while keeping the dog
//! near 2; the dog only wants to be close to the owner.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::diff::AnalyticDerivatives;
use crate::game::GameProblem;

pub const DEFAULT_HORIZON: usize = 11;
pub const DEFAULT_X0: [f64; 2] = [-1.0, 2.0];

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `c₀ = 10·sigmoid((x⁰−1)²) + 40(x¹−2)² + (u⁰)²`
pub fn owner_cost(x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    10.0 * sigmoid((x[0] - 1.0).powi(2)) + 40.0 * (x[1] - 2.0).powi(2) + u[0] * u[0]
}

/// `c₁ = tanh²(x⁰−x¹) + (u¹)²`
pub fn dog_cost(x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    (x[0] - x[1]).tanh().powi(2) + u[1] * u[1]
}

fn cost_gradient(n: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(4);
    if n == 0 {
        let e = x[0] - 1.0;
        let s = sigmoid(e * e);
        g[0] = 10.0 * s * (1.0 - s) * 2.0 * e;
        g[1] = 80.0 * (x[1] - 2.0);
        g[2] = 2.0 * u[0];
    } else {
        let t = (x[0] - x[1]).tanh();
        let d = 2.0 * t * (1.0 - t * t);
        g[0] = d;
        g[1] = -d;
        g[3] = 2.0 * u[1];
    }
    g
}

fn cost_hessian(n: usize, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(4, 4);
    if n == 0 {
        let e = x[0] - 1.0;
        let s = sigmoid(e * e);
        let ds = s * (1.0 - s);
        let dds = ds * (1.0 - 2.0 * s);
        h[(0, 0)] = 10.0 * (dds * 4.0 * e * e + ds * 2.0);
        h[(1, 1)] = 80.0;
        h[(2, 2)] = 2.0;
    } else {
        let t = (x[0] - x[1]).tanh();
        let dd = 2.0 * (1.0 - t * t) * (1.0 - 3.0 * t * t);
        h[(0, 0)] = dd;
        h[(1, 1)] = dd;
        h[(0, 1)] = -dd;
        h[(1, 0)] = -dd;
        h[(3, 3)] = 2.0;
    }
    h
}

pub fn build_owner_dog(horizon: usize, x0: DVector<f64>) -> GameProblem {
    let analytic = AnalyticDerivatives {
        dynamics_jacobian: Some(Arc::new(|_, _: &DVector<f64>, u: &DVector<f64>| {
            let mut j = DMatrix::zeros(2, 4);
            j[(0, 0)] = 1.0;
            j[(1, 1)] = 1.0;
            j[(0, 2)] = 1.0 - u[0].tanh().powi(2);
            j[(1, 3)] = 1.0 - u[1].tanh().powi(2);
            j
        })),
        dynamics_hessian: Some(Arc::new(|_, _: &DVector<f64>, u: &DVector<f64>| {
            (0..2)
                .map(|l| {
                    let t = u[l].tanh();
                    let mut g = DMatrix::zeros(4, 4);
                    g[(2 + l, 2 + l)] = -2.0 * t * (1.0 - t * t);
                    g
                })
                .collect()
        })),
        cost_gradient: Some(Arc::new(|n, _, x: &DVector<f64>, u: &DVector<f64>| {
            cost_gradient(n, x, u)
        })),
        cost_hessian: Some(Arc::new(|n, _, x: &DVector<f64>, u: &DVector<f64>| {
            cost_hessian(n, x, u)
        })),
    };
    GameProblem::new(
        "owner_dog",
        horizon,
        vec![1, 1],
        x0,
        Arc::new(|_, x: &DVector<f64>, u: &DVector<f64>| {
            DVector::from_vec(vec![x[0] + u[0].tanh(), x[1] + u[1].tanh()])
        }),
        Arc::new(|n, _, x: &DVector<f64>, u: &DVector<f64>| {
            if n == 0 {
                owner_cost(x, u)
            } else {
                dog_cost(x, u)
            }
        }),
    )
    .expect("owner-dog dimensions are valid")
    .with_analytic(analytic)
}

pub fn default_owner_dog() -> GameProblem {
    build_owner_dog(DEFAULT_HORIZON, DVector::from_row_slice(&DEFAULT_X0))
}
