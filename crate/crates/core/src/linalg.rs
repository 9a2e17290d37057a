//! Small dense helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

/// Relative pivot threshold below which an LU factorization is treated as singular.
pub const PIVOT_TOL: f64 = 1e-12;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// Maximum absolute row sum.
pub fn mat_inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn vec_inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc: f64, x| acc.max(x.abs()))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0, |acc: f64, (x, y)| acc.max((x - y).abs()))
}

/// Solves `m · X = rhs` with LU and partial pivoting.
///
/// Returns `Err(pivot)` with the smallest pivot magnitude when it falls at or
/// below `PIVOT_TOL · ‖m‖∞`.
pub fn lu_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, f64> {
    let threshold = PIVOT_TOL * mat_inf_norm(m);
    let lu = m.clone().lu();
    let min_pivot = lu
        .u()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |acc, p| acc.min(p.abs()));
    if !(min_pivot > threshold) {
        return Err(min_pivot);
    }
    lu.solve(rhs).ok_or(min_pivot)
}
