//! Per-stage derivative data for both solvers.
//!
//! For every stage `k` along a nominal trajectory this produces
//!
//! * `A_k = ∂f_k/∂x`, `B_k = ∂f_k/∂u` and one Hessian `G_k^l` per state
//!   component `l` of `f_k` with respect to `z = (x, u)`, for `k < T`;
//! * for every player the bordered cost expansion
//!   `M_{n,k} = [[2c, c_x, c_u], [c_xᵀ, c_xx, c_xu], [c_uᵀ, c_ux, c_uu]]`,
//!   so that `½[1;δz]ᵀ M [1;δz]` is the second-order model of `c_{n,k}`.
//!
//! Derivatives come from analytic handles, central finite differences, or a
//! mix. Second derivatives by finite differences are central differences of
//! the first-derivative source.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::game::{GameDims, GameProblem, Trajectory};
use crate::linalg::symmetrize;

/// Jacobian `[∂f/∂x ∂f/∂u]`, shape `n_x × (n_x + n_u)`.
pub type DynamicsJacobianFn =
    Arc<dyn Fn(usize, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
/// One Hessian per output component, each `(n_x + n_u)²`.
pub type DynamicsHessianFn =
    Arc<dyn Fn(usize, &DVector<f64>, &DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>;
/// Gradient of `c_{n,k}` with respect to `(x, u)`, called as `(n, k, x, u)`.
pub type CostGradientFn =
    Arc<dyn Fn(usize, usize, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
/// Hessian of `c_{n,k}` with respect to `(x, u)`, called as `(n, k, x, u)`.
pub type CostHessianFn =
    Arc<dyn Fn(usize, usize, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Optional closed-form derivatives supplied by a problem author.
#[derive(Clone, Default)]
pub struct AnalyticDerivatives {
    pub dynamics_jacobian: Option<DynamicsJacobianFn>,
    pub dynamics_hessian: Option<DynamicsHessianFn>,
    pub cost_gradient: Option<CostGradientFn>,
    pub cost_hessian: Option<CostHessianFn>,
}

impl AnalyticDerivatives {
    pub fn is_empty(&self) -> bool {
        self.dynamics_jacobian.is_none()
            && self.dynamics_hessian.is_none()
            && self.cost_gradient.is_none()
            && self.cost_hessian.is_none()
    }
}

impl fmt::Debug for AnalyticDerivatives {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnalyticDerivatives")
            .field("dynamics_jacobian", &self.dynamics_jacobian.is_some())
            .field("dynamics_hessian", &self.dynamics_hessian.is_some())
            .field("cost_gradient", &self.cost_gradient.is_some())
            .field("cost_hessian", &self.cost_hessian.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeMode {
    Analytic,
    FiniteDifference,
    /// Analytic where a handle exists, finite differences otherwise.
    Hybrid,
}

impl std::str::FromStr for DerivativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "fd" | "finite_difference" | "finite-difference" => Ok(Self::FiniteDifference),
            "hybrid" => Ok(Self::Hybrid),
            other => Err(Error::Parse(format!("unknown derivative mode `{other}`"))),
        }
    }
}

impl fmt::Display for DerivativeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Analytic => "analytic",
            Self::FiniteDifference => "finite_difference",
            Self::Hybrid => "hybrid",
        })
    }
}

/// Relative finite-difference steps; the actual step for coordinate `j` is
/// `h · max(1, |z_j|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSteps {
    pub first: f64,
    pub second: f64,
}

impl Default for FdSteps {
    fn default() -> Self {
        Self {
            first: 1e-5,
            second: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DerivativeProvider {
    pub mode: DerivativeMode,
    pub analytic: AnalyticDerivatives,
    pub fd: FdSteps,
}

impl DerivativeProvider {
    pub fn finite_difference() -> Self {
        Self {
            mode: DerivativeMode::FiniteDifference,
            analytic: AnalyticDerivatives::default(),
            fd: FdSteps::default(),
        }
    }

    /// Provider using whatever analytic handles the problem ships with.
    pub fn for_problem(problem: &GameProblem, mode: DerivativeMode) -> Self {
        Self {
            mode,
            analytic: problem.analytic().clone(),
            fd: FdSteps::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fd.first > 0.0 && self.fd.second > 0.0) {
            return Err(Error::InvalidConfig(
                "finite-difference steps must be positive".into(),
            ));
        }
        Ok(())
    }

    fn pick<'a, T>(&self, handle: &'a Option<T>, name: &'static str) -> Result<Option<&'a T>> {
        match self.mode {
            DerivativeMode::FiniteDifference => Ok(None),
            DerivativeMode::Hybrid => Ok(handle.as_ref()),
            DerivativeMode::Analytic => handle
                .as_ref()
                .map(Some)
                .ok_or(Error::MissingAnalytic(name)),
        }
    }

    fn dynamics_jacobian(
        &self,
        p: &GameProblem,
        k: usize,
        z: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let nx = p.state_dim();
        let (x, u) = split(z, nx);
        let jac = match self.pick(&self.analytic.dynamics_jacobian, "dynamics_jacobian")? {
            Some(h) => {
                let j = h(k, &x, &u);
                check_shape(&j, nx, z.len(), "analytic dynamics jacobian")?;
                j
            }
            None => fd_jacobian(
                &|zz| {
                    let (x, u) = split(zz, nx);
                    p.dynamics(k, &x, &u)
                },
                z,
                self.fd.first,
            ),
        };
        Ok(jac)
    }

    fn dynamics_hessians(
        &self,
        p: &GameProblem,
        k: usize,
        z: &DVector<f64>,
    ) -> Result<Vec<DMatrix<f64>>> {
        let nx = p.state_dim();
        let dim = z.len();
        let mut hess = match self.pick(&self.analytic.dynamics_hessian, "dynamics_hessian")? {
            Some(h) => {
                let (x, u) = split(z, nx);
                let gs = h(k, &x, &u);
                if gs.len() != nx {
                    return Err(Error::dim("analytic dynamics hessian count", nx, gs.len()));
                }
                for g in &gs {
                    check_shape(g, dim, dim, "analytic dynamics hessian")?;
                }
                gs
            }
            None => {
                // Central differences of the Jacobian, one column of every G^l per coordinate.
                let mut gs = vec![DMatrix::zeros(dim, dim); nx];
                for j in 0..dim {
                    let h = self.fd.second * z[j].abs().max(1.0);
                    let (mut zp, mut zm) = (z.clone(), z.clone());
                    zp[j] += h;
                    zm[j] -= h;
                    let d = (self.dynamics_jacobian(p, k, &zp)?
                        - self.dynamics_jacobian(p, k, &zm)?)
                        / (2.0 * h);
                    for (l, g) in gs.iter_mut().enumerate() {
                        g.set_column(j, &d.row(l).transpose());
                    }
                }
                gs
            }
        };
        hess.iter_mut().for_each(symmetrize);
        Ok(hess)
    }

    fn cost_gradient(
        &self,
        p: &GameProblem,
        n: usize,
        k: usize,
        z: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let nx = p.state_dim();
        match self.pick(&self.analytic.cost_gradient, "cost_gradient")? {
            Some(h) => {
                let (x, u) = split(z, nx);
                let g = h(n, k, &x, &u);
                if g.len() != z.len() {
                    return Err(Error::dim("analytic cost gradient", z.len(), g.len()));
                }
                Ok(g)
            }
            None => Ok(fd_gradient(
                &|zz| {
                    let (x, u) = split(zz, nx);
                    p.stage_cost(n, k, &x, &u)
                },
                z,
                self.fd.first,
            )),
        }
    }

    fn cost_hessian(
        &self,
        p: &GameProblem,
        n: usize,
        k: usize,
        z: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let dim = z.len();
        let mut hess = match self.pick(&self.analytic.cost_hessian, "cost_hessian")? {
            Some(h) => {
                let (x, u) = split(z, p.state_dim());
                let m = h(n, k, &x, &u);
                check_shape(&m, dim, dim, "analytic cost hessian")?;
                m
            }
            None => {
                let mut m = DMatrix::zeros(dim, dim);
                for j in 0..dim {
                    let h = self.fd.second * z[j].abs().max(1.0);
                    let (mut zp, mut zm) = (z.clone(), z.clone());
                    zp[j] += h;
                    zm[j] -= h;
                    let d = (self.cost_gradient(p, n, k, &zp)?
                        - self.cost_gradient(p, n, k, &zm)?)
                        / (2.0 * h);
                    m.set_column(j, &d);
                }
                m
            }
        };
        symmetrize(&mut hess);
        Ok(hess)
    }
}

/// First and second derivatives of `f_k` at a stage with dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsExpansion {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `g[l]` is the Hessian of component `l` of `f_k` with respect to `(x, u)`.
    pub g: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageQuadraticization {
    pub stage: usize,
    /// `None` at the terminal stage `k = T`.
    pub dynamics: Option<DynamicsExpansion>,
    /// Bordered cost expansions, one per player.
    pub m: Vec<DMatrix<f64>>,
}

impl StageQuadraticization {
    pub fn has_dynamics(&self) -> bool {
        self.dynamics.is_some()
    }
}

/// Quadraticization of a whole trajectory, stages `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadraticization {
    pub dims: GameDims,
    pub stages: Vec<StageQuadraticization>,
}

impl Quadraticization {
    /// The first-order part, read off the bordered gradient rows.
    pub fn linearization(&self) -> Linearization {
        let stages = self
            .stages
            .iter()
            .map(|st| StageLinearization {
                stage: st.stage,
                dynamics: st.dynamics.as_ref().map(|d| (d.a.clone(), d.b.clone())),
                cost_gradients: st
                    .m
                    .iter()
                    .map(|m| m.column(0).rows(1, m.nrows() - 1).into_owned())
                    .collect(),
            })
            .collect();
        Linearization {
            dims: self.dims.clone(),
            stages,
        }
    }
}

/// First-order data only: what the necessary-conditions residual needs.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLinearization {
    pub stage: usize,
    /// `(A_k, B_k)`, absent at `k = T`.
    pub dynamics: Option<(DMatrix<f64>, DMatrix<f64>)>,
    /// Gradient of each player's stage cost with respect to `(x, u)`.
    pub cost_gradients: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub dims: GameDims,
    pub stages: Vec<StageLinearization>,
}

pub fn quadraticize(
    problem: &GameProblem,
    traj: &Trajectory,
    provider: &DerivativeProvider,
) -> Result<Quadraticization> {
    problem.check_trajectory(traj)?;
    provider.validate()?;
    let stages = (0..traj.num_stages())
        .into_par_iter()
        .map(|k| quadraticize_stage(problem, traj, provider, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(Quadraticization {
        dims: problem.dims().clone(),
        stages,
    })
}

fn quadraticize_stage(
    p: &GameProblem,
    traj: &Trajectory,
    provider: &DerivativeProvider,
    k: usize,
) -> Result<StageQuadraticization> {
    let nx = p.state_dim();
    let z = join(&traj.states[k], &traj.inputs[k]);
    let dim = z.len();

    let dynamics = if k < p.horizon() {
        let jac = provider.dynamics_jacobian(p, k, &z)?;
        ensure_finite(jac.iter(), k, "dynamics jacobian")?;
        let g = provider.dynamics_hessians(p, k, &z)?;
        ensure_finite(g.iter().flat_map(|m| m.iter()), k, "dynamics hessian")?;
        Some(DynamicsExpansion {
            a: jac.columns(0, nx).into_owned(),
            b: jac.columns(nx, dim - nx).into_owned(),
            g,
        })
    } else {
        None
    };

    let mut m = Vec::with_capacity(p.num_players());
    for n in 0..p.num_players() {
        let c = p.stage_cost(n, k, &traj.states[k], &traj.inputs[k]);
        if !c.is_finite() {
            return Err(Error::NonFiniteCost {
                player: n,
                stage: k,
            });
        }
        let grad = provider.cost_gradient(p, n, k, &z)?;
        ensure_finite(grad.iter(), k, "cost gradient")?;
        let hess = provider.cost_hessian(p, n, k, &z)?;
        ensure_finite(hess.iter(), k, "cost hessian")?;
        m.push(bordered(c, &grad, &hess));
    }

    Ok(StageQuadraticization {
        stage: k,
        dynamics,
        m,
    })
}

pub fn linearize(
    problem: &GameProblem,
    traj: &Trajectory,
    provider: &DerivativeProvider,
) -> Result<Linearization> {
    problem.check_trajectory(traj)?;
    provider.validate()?;
    let nx = problem.state_dim();
    let stages = (0..traj.num_stages())
        .into_par_iter()
        .map(|k| {
            let z = join(&traj.states[k], &traj.inputs[k]);
            let dynamics = if k < problem.horizon() {
                let jac = provider.dynamics_jacobian(problem, k, &z)?;
                ensure_finite(jac.iter(), k, "dynamics jacobian")?;
                Some((
                    jac.columns(0, nx).into_owned(),
                    jac.columns(nx, z.len() - nx).into_owned(),
                ))
            } else {
                None
            };
            let cost_gradients = (0..problem.num_players())
                .map(|n| {
                    let g = provider.cost_gradient(problem, n, k, &z)?;
                    ensure_finite(g.iter(), k, "cost gradient")?;
                    Ok(g)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(StageLinearization {
                stage: k,
                dynamics,
                cost_gradients,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Linearization {
        dims: problem.dims().clone(),
        stages,
    })
}

/// `R_k(δx, δu)`: component `l` is `[δx;δu]ᵀ G^l [δx;δu]`.
pub fn eval_quadratic_residual(
    quad: &StageQuadraticization,
    dx: &DVector<f64>,
    du: &DVector<f64>,
) -> Result<DVector<f64>> {
    let dynamics = quad
        .dynamics
        .as_ref()
        .ok_or_else(|| Error::InvalidProblem(format!("stage {} has no dynamics", quad.stage)))?;
    let nx = dynamics.a.nrows();
    let nu = dynamics.b.ncols();
    if dx.len() != nx {
        return Err(Error::dim("state perturbation", nx, dx.len()));
    }
    if du.len() != nu {
        return Err(Error::dim("input perturbation", nu, du.len()));
    }
    let z = join(dx, du);
    Ok(DVector::from_iterator(
        nx,
        dynamics.g.iter().map(|g| z.dot(&(g * &z))),
    ))
}

/// Kinds of derivative a provider can supply analytically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DerivativeKind {
    DynamicsJacobian,
    DynamicsHessian,
    CostGradient,
    CostHessian,
}

impl fmt::Display for DerivativeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DynamicsJacobian => "dynamics_jacobian",
            Self::DynamicsHessian => "dynamics_hessian",
            Self::CostGradient => "cost_gradient",
            Self::CostHessian => "cost_hessian",
        })
    }
}

/// Worst analytic-vs-finite-difference disagreement for one derivative kind.
#[derive(Debug, Clone, PartialEq)]
pub struct KindCheck {
    pub kind: DerivativeKind,
    pub max_rel_error: f64,
    pub stage: usize,
    /// Player index for cost derivatives, output component for dynamics Hessians.
    pub component: Option<usize>,
    pub entry: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    pub checks: Vec<KindCheck>,
}

impl DerivativeReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VerifyOutcome {
    /// The provider has no analytic handles to check.
    NotApplicable,
    Report(DerivativeReport),
}

/// Compares every analytic handle against central finite differences.
///
/// Errors are relative: `|analytic − fd| / max(1, |fd|)`.
pub fn verify_derivatives(
    problem: &GameProblem,
    traj: &Trajectory,
    provider: &DerivativeProvider,
) -> Result<VerifyOutcome> {
    problem.check_trajectory(traj)?;
    if provider.mode == DerivativeMode::FiniteDifference || provider.analytic.is_empty() {
        return Ok(VerifyOutcome::NotApplicable);
    }
    let analytic = DerivativeProvider {
        mode: DerivativeMode::Analytic,
        ..provider.clone()
    };
    let fd = DerivativeProvider {
        fd: provider.fd,
        ..DerivativeProvider::finite_difference()
    };
    let a = &provider.analytic;
    let mut checks: Vec<KindCheck> = Vec::new();
    let mut record = |kind, err: (f64, (usize, usize)), stage, component| match checks
        .iter_mut()
        .find(|c| c.kind == kind)
    {
        Some(c) if c.max_rel_error >= err.0 => {}
        Some(c) => {
            *c = KindCheck {
                kind,
                max_rel_error: err.0,
                stage,
                component,
                entry: err.1,
            }
        }
        None => checks.push(KindCheck {
            kind,
            max_rel_error: err.0,
            stage,
            component,
            entry: err.1,
        }),
    };

    for k in 0..traj.num_stages() {
        let z = join(&traj.states[k], &traj.inputs[k]);
        if k < problem.horizon() {
            if a.dynamics_jacobian.is_some() {
                let e = worst_rel(
                    &analytic.dynamics_jacobian(problem, k, &z)?,
                    &fd.dynamics_jacobian(problem, k, &z)?,
                );
                record(DerivativeKind::DynamicsJacobian, e, k, None);
            }
            if a.dynamics_hessian.is_some() {
                let (ga, gf) = (
                    analytic.dynamics_hessians(problem, k, &z)?,
                    fd.dynamics_hessians(problem, k, &z)?,
                );
                for (l, (x, y)) in ga.iter().zip(&gf).enumerate() {
                    record(DerivativeKind::DynamicsHessian, worst_rel(x, y), k, Some(l));
                }
            }
        }
        for n in 0..problem.num_players() {
            if a.cost_gradient.is_some() {
                let ga = DMatrix::from_column_slice(
                    z.len(),
                    1,
                    analytic.cost_gradient(problem, n, k, &z)?.as_slice(),
                );
                let gf = DMatrix::from_column_slice(
                    z.len(),
                    1,
                    fd.cost_gradient(problem, n, k, &z)?.as_slice(),
                );
                record(
                    DerivativeKind::CostGradient,
                    worst_rel(&ga, &gf),
                    k,
                    Some(n),
                );
            }
            if a.cost_hessian.is_some() {
                let e = worst_rel(
                    &analytic.cost_hessian(problem, n, k, &z)?,
                    &fd.cost_hessian(problem, n, k, &z)?,
                );
                record(DerivativeKind::CostHessian, e, k, Some(n));
            }
        }
    }
    checks.sort_by_key(|c| c.kind);
    Ok(VerifyOutcome::Report(DerivativeReport { checks }))
}

fn worst_rel(a: &DMatrix<f64>, f: &DMatrix<f64>) -> (f64, (usize, usize)) {
    let mut worst = (0.0, (0, 0));
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let e = (a[(i, j)] - f[(i, j)]).abs() / f[(i, j)].abs().max(1.0);
            if e > worst.0 || e.is_nan() {
                worst = (e, (i, j));
            }
        }
    }
    worst
}

/// `[[2c, gᵀ], [g, H]]`, symmetrized.
fn bordered(c: f64, grad: &DVector<f64>, hess: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = grad.len();
    let mut m = DMatrix::zeros(dim + 1, dim + 1);
    m[(0, 0)] = 2.0 * c;
    m.view_mut((0, 1), (1, dim)).copy_from(&grad.transpose());
    m.view_mut((1, 0), (dim, 1)).copy_from(grad);
    m.view_mut((1, 1), (dim, dim)).copy_from(hess);
    symmetrize(&mut m);
    m
}

pub(crate) fn join(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
}

pub(crate) fn split(z: &DVector<f64>, nx: usize) -> (DVector<f64>, DVector<f64>) {
    (
        z.rows(0, nx).into_owned(),
        z.rows(nx, z.len() - nx).into_owned(),
    )
}

fn check_shape(m: &DMatrix<f64>, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.nrows() != rows {
        return Err(Error::dim(format!("{what} rows"), rows, m.nrows()));
    }
    if m.ncols() != cols {
        return Err(Error::dim(format!("{what} columns"), cols, m.ncols()));
    }
    Ok(())
}

fn ensure_finite<'a>(
    mut values: impl Iterator<Item = &'a f64>,
    stage: usize,
    which: &'static str,
) -> Result<()> {
    if values.any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteDerivative { stage, which });
    }
    Ok(())
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient(
    f: &dyn Fn(&DVector<f64>) -> f64,
    z: &DVector<f64>,
    rel_step: f64,
) -> DVector<f64> {
    DVector::from_iterator(
        z.len(),
        (0..z.len()).map(|j| {
            let h = rel_step * z[j].abs().max(1.0);
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[j] += h;
            zm[j] -= h;
            (f(&zp) - f(&zm)) / (2.0 * h)
        }),
    )
}

/// Central-difference Jacobian of a vector function.
pub fn fd_jacobian(
    f: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    z: &DVector<f64>,
    rel_step: f64,
) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..z.len())
        .map(|j| {
            let h = rel_step * z[j].abs().max(1.0);
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[j] += h;
            zm[j] -= h;
            (f(&zp) - f(&zm)) / (2.0 * h)
        })
        .collect();
    DMatrix::from_columns(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::rollout;

    fn poly_problem() -> GameProblem {
        // Degree-2 polynomial dynamics and costs: the quadratic model is exact.
        GameProblem::new(
            "poly",
            2,
            vec![1, 1],
            DVector::from_vec(vec![0.3, -0.2]),
            Arc::new(|_, x: &DVector<f64>, u: &DVector<f64>| {
                DVector::from_vec(vec![
                    x[0] + 0.5 * x[1] * u[0] + 0.1 * u[1] * u[1],
                    0.9 * x[1] - 0.3 * x[0] * x[0] + u[0] * u[1],
                ])
            }),
            Arc::new(|n, _, x: &DVector<f64>, u: &DVector<f64>| {
                if n == 0 {
                    x[0] * x[0] + 0.5 * x[0] * u[1] + u[0] * u[0] - x[1]
                } else {
                    (x[1] - 1.0).powi(2) + 0.2 * x[0] * u[0] + 2.0 * u[1] * u[1]
                }
            }),
        )
        .unwrap()
    }

    #[test]
    fn terminal_stage_has_no_dynamics() {
        let p = poly_problem();
        let traj = rollout(&p, &p.zero_inputs()).unwrap();
        let q = quadraticize(&p, &traj, &DerivativeProvider::finite_difference()).unwrap();
        assert_eq!(q.stages.len(), 3);
        assert!(q.stages[..2].iter().all(|s| s.has_dynamics()));
        assert!(!q.stages[2].has_dynamics());
    }

    #[test]
    fn bordered_block_stores_twice_the_cost() {
        let p = poly_problem();
        let traj = rollout(&p, &p.zero_inputs()).unwrap();
        let q = quadraticize(&p, &traj, &DerivativeProvider::finite_difference()).unwrap();
        for s in &q.stages {
            for (n, m) in s.m.iter().enumerate() {
                let c = p.stage_cost(n, s.stage, &traj.states[s.stage], &traj.inputs[s.stage]);
                assert_eq!(m[(0, 0)], 2.0 * c);
                assert_eq!(m, &m.transpose());
            }
        }
    }

    #[test]
    fn quadratic_residual_basic_cases() {
        let mut quad = StageQuadraticization {
            stage: 0,
            dynamics: Some(DynamicsExpansion {
                a: DMatrix::identity(1, 1),
                b: DMatrix::identity(1, 1),
                g: vec![DMatrix::zeros(2, 2)],
            }),
            m: vec![],
        };
        let one = DVector::from_vec(vec![1.0]);
        assert_eq!(eval_quadratic_residual(&quad, &one, &one).unwrap()[0], 0.0);
        quad.dynamics.as_mut().unwrap().g[0] = DMatrix::identity(2, 2);
        assert_eq!(eval_quadratic_residual(&quad, &one, &one).unwrap()[0], 2.0);
        assert!(eval_quadratic_residual(&quad, &DVector::zeros(2), &one).is_err());
        quad.dynamics = None;
        assert!(eval_quadratic_residual(&quad, &one, &one).is_err());
    }

    #[test]
    fn quadratic_model_is_exact_for_polynomial_problem() {
        let p = poly_problem();
        let u = vec![DVector::from_vec(vec![0.4, -0.1]); 3];
        let traj = rollout(&p, &u).unwrap();
        let q = quadraticize(&p, &traj, &DerivativeProvider::finite_difference()).unwrap();
        let s = &q.stages[1];
        let d = s.dynamics.as_ref().unwrap();
        let (x, u) = (&traj.states[1], &traj.inputs[1]);
        for (dx, du) in [([0.1, -0.2], [0.3, 0.05]), ([-0.7, 0.4], [-0.2, 0.9])] {
            let dx = DVector::from_vec(dx.to_vec());
            let du = DVector::from_vec(du.to_vec());
            let r = eval_quadratic_residual(s, &dx, &du).unwrap();
            let model = p.dynamics(1, x, u) + &d.a * &dx + &d.b * &du + 0.5 * r;
            let truth = p.dynamics(1, &(x + &dx), &(u + &du));
            assert!((model - truth).amax() < 1e-7);
            let dz = DVector::from_iterator(
                5,
                std::iter::once(1.0)
                    .chain(dx.iter().copied())
                    .chain(du.iter().copied()),
            );
            for n in 0..2 {
                let cm = 0.5 * dz.dot(&(&s.m[n] * &dz));
                let ct = p.stage_cost(n, 1, &(x + &dx), &(u + &du));
                assert!((cm - ct).abs() < 1e-7, "player {n}: {cm} vs {ct}");
            }
        }
    }

    #[test]
    fn cost_model_error_is_third_order() {
        // Smooth non-polynomial cost: the model error must shrink like |δ|³.
        let p = GameProblem::new(
            "smooth",
            1,
            vec![1],
            DVector::from_vec(vec![0.2]),
            Arc::new(|_, x: &DVector<f64>, u: &DVector<f64>| {
                DVector::from_element(1, x[0] + u[0].sin())
            }),
            Arc::new(|_, _, x: &DVector<f64>, u: &DVector<f64>| (x[0] * u[0]).exp() + x[0].cos()),
        )
        .unwrap();
        let traj = rollout(
            &p,
            &[
                DVector::from_element(1, 0.5),
                DVector::from_element(1, -0.3),
            ],
        )
        .unwrap();
        let q = quadraticize(&p, &traj, &DerivativeProvider::finite_difference()).unwrap();
        let m = &q.stages[0].m[0];
        let err = |t: f64| {
            let dz = DVector::from_vec(vec![1.0, 0.6 * t, -0.8 * t]);
            let model = 0.5 * dz.dot(&(m * &dz));
            let truth = p.stage_cost(
                0,
                0,
                &DVector::from_element(1, 0.2 + 0.6 * t),
                &DVector::from_element(1, 0.5 - 0.8 * t),
            );
            (model - truth).abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((ratio - 8.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn analytic_mode_requires_handles() {
        let p = poly_problem();
        let traj = rollout(&p, &p.zero_inputs()).unwrap();
        let provider = DerivativeProvider::for_problem(&p, DerivativeMode::Analytic);
        assert!(matches!(
            quadraticize(&p, &traj, &provider),
            Err(Error::MissingAnalytic(_))
        ));
        let hybrid = DerivativeProvider::for_problem(&p, DerivativeMode::Hybrid);
        assert!(quadraticize(&p, &traj, &hybrid).is_ok());
    }

    #[test]
    fn pure_fd_cannot_be_verified() {
        let p = poly_problem();
        let traj = rollout(&p, &p.zero_inputs()).unwrap();
        let out = verify_derivatives(&p, &traj, &DerivativeProvider::finite_difference()).unwrap();
        assert_eq!(out, VerifyOutcome::NotApplicable);
    }

    #[test]
    fn analytic_shape_mismatch_is_dimension_error() {
        let p = poly_problem().with_analytic(AnalyticDerivatives {
            dynamics_jacobian: Some(Arc::new(|_, _: &DVector<f64>, _: &DVector<f64>| {
                DMatrix::zeros(2, 3)
            })),
            ..Default::default()
        });
        let traj = rollout(&p, &p.zero_inputs()).unwrap();
        let provider = DerivativeProvider::for_problem(&p, DerivativeMode::Hybrid);
        assert!(matches!(
            quadraticize(&p, &traj, &provider),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn non_finite_derivative_is_reported() {
        let p = poly_problem().with_analytic(AnalyticDerivatives {
            cost_gradient: Some(Arc::new(|_, k, _: &DVector<f64>, _: &DVector<f64>| {
                DVector::from_element(4, if k == 1 { f64::NAN } else { 0.0 })
            })),
            ..Default::default()
        });
        let traj = rollout(&p, &p.zero_inputs()).unwrap();
        let provider = DerivativeProvider::for_problem(&p, DerivativeMode::Hybrid);
        assert_eq!(
            quadraticize(&p, &traj, &provider),
            Err(Error::NonFiniteDerivative {
                stage: 1,
                which: "cost gradient"
            })
        );
    }

    #[test]
    fn fd_helpers_on_known_functions() {
        let z = DVector::from_vec(vec![0.5, -2.0]);
        let g = fd_gradient(&|v| v[0] * v[0] * v[1], &z, 1e-5);
        assert!((g[0] - 2.0 * 0.5 * -2.0).abs() < 1e-8);
        assert!((g[1] - 0.25).abs() < 1e-8);
        let j = fd_jacobian(
            &|v| DVector::from_vec(vec![v[0].sin(), v[0] * v[1]]),
            &z,
            1e-5,
        );
        assert!((j[(0, 0)] - 0.5f64.cos()).abs() < 1e-9);
        assert!((j[(1, 0)] + 2.0).abs() < 1e-9 && (j[(1, 1)] - 0.5).abs() < 1e-9);
    }
}
