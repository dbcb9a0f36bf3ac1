//! The 4D-Var cost functional, its gradients, the Hessian quadratic form and
//! the Euler-Lagrange fixed-point map.
//!
//! Everything here is evaluated on the discrete trajectory, so the gradient
//! and Hessian are exact derivatives of the discrete cost.

mod hessian;
mod observations;

use log::debug;
use serde::{Deserialize, Serialize};

pub use hessian::{assemble_hessian, HessianReport};
pub use observations::{ObservationSet, ObservationSetRaw};

use crate::error::{Error, Result};
use crate::grid::GridFn;
use crate::model::ModelSpec;
use crate::pde::{
    self, solve_adjoint, solve_forward_with, solve_second_variation, solve_tangent,
    AdjointTrajectory, ForwardOptions, TimeMesh, Trajectory,
};

/// Gaussian prior `N(u0, -sigma^2 Lap^{-1})`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorSpec {
    pub u0: GridFn,
    pub sigma: f64,
}

impl PriorSpec {
    pub fn new(u0: GridFn, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidPrior(format!("sigma must be positive, got {sigma}")));
        }
        if !u0.is_finite() {
            return Err(Error::InvalidPrior("u0 has non-finite values".into()));
        }
        Ok(PriorSpec { u0, sigma })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub total: f64,
    pub misfit: f64,
    pub reg: f64,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub cost: CostReport,
    pub grad_l2: GridFn,
    pub grad_v: GridFn,
    /// `p(0)` from the adjoint sweep.
    pub p0: GridFn,
}

/// The three pieces of `D^2 J(u)(v, v)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HessianTerms {
    /// Time integral of `<r''(y) eta^2, p> + <f''(y) eta^2, p_x>`, entering with a minus sign.
    pub nonlinear: f64,
    /// `sum_i |R^{-1/2} H eta(t_i)|^2`.
    pub observational: f64,
    /// `sigma^{-2} ||v||_V^2`.
    pub prior: f64,
}

impl HessianTerms {
    pub fn total(&self) -> f64 {
        self.nonlinear + self.observational + self.prior
    }
}

/// Model, observations, prior and time mesh: everything `J` depends on.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: ModelSpec,
    pub obs: ObservationSet,
    pub prior: PriorSpec,
    pub mesh: TimeMesh,
    pub forward: ForwardOptions,
    obs_nodes: Vec<usize>,
}

impl Problem {
    pub fn new(
        model: ModelSpec,
        obs: ObservationSet,
        prior: PriorSpec,
        mesh: TimeMesh,
    ) -> Result<Self> {
        let obs_nodes = obs
            .times()
            .iter()
            .map(|&t| mesh.node_index(t).ok_or(Error::ObservationOffMesh { time: t }))
            .collect::<Result<Vec<_>>>()?;
        if obs.n_obs() > 0 && !obs.rows()[0].same_grid(&prior.u0) {
            return Err(Error::MeshMismatch(
                "observation rows and prior mean live on different grids".into(),
            ));
        }
        Ok(Problem {
            model,
            obs,
            prior,
            mesh,
            forward: ForwardOptions::default(),
            obs_nodes,
        })
    }

    pub fn with_prior(&self, prior: PriorSpec) -> Self {
        Problem {
            prior,
            ..self.clone()
        }
    }

    pub fn with_observations(&self, obs: ObservationSet) -> Result<Self> {
        Problem::new(self.model.clone(), obs, self.prior.clone(), self.mesh.clone())
    }

    /// Mesh node index of each observation time.
    pub fn obs_nodes(&self) -> &[usize] {
        &self.obs_nodes
    }

    /// Number of interior grid nodes.
    pub fn grid_size(&self) -> usize {
        self.prior.u0.interior_len()
    }

    pub fn sigma(&self) -> f64 {
        self.prior.sigma
    }

    fn check_grid(&self, u: &GridFn) -> Result<()> {
        if !u.same_grid(&self.prior.u0) {
            return Err(Error::MeshMismatch(format!(
                "state has {} interior nodes, problem uses {}",
                u.interior_len(),
                self.grid_size()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, u: &GridFn) -> Result<Trajectory> {
        self.check_grid(u)?;
        solve_forward_with(&self.model, u, &self.mesh, &self.forward)
    }

    /// `sum_i |R^{-1/2}(H y(t_i) - z_i)|^2` (no factor one half).
    pub fn misfit_sum(&self, y: &Trajectory) -> f64 {
        self.obs_nodes
            .iter()
            .enumerate()
            .map(|(i, &k)| self.obs.weighted_sq(&self.obs.residual(&y.states[k], i)))
            .sum()
    }

    fn cost_of(&self, u: &GridFn, y: &Trajectory) -> CostReport {
        let misfit = 0.5 * self.misfit_sum(y);
        let d = u - &self.prior.u0;
        let reg = d.dot_v(&d) / (2.0 * self.sigma() * self.sigma());
        CostReport {
            total: misfit + reg,
            misfit,
            reg,
        }
    }

    pub fn cost(&self, u: &GridFn) -> Result<CostReport> {
        let y = self.forward(u)?;
        Ok(self.cost_of(u, &y))
    }

    pub fn adjoint(&self, y: &Trajectory) -> Result<AdjointTrajectory> {
        solve_adjoint(&self.model, y, &self.obs)
    }

    pub fn gradient(&self, u: &GridFn) -> Result<Gradients> {
        let y = self.forward(u)?;
        let cost = self.cost_of(u, &y);
        let adj = self.adjoint(&y)?;
        Ok(self.gradients_from(u, cost, adj.initial().clone()))
    }

    fn gradients_from(&self, u: &GridFn, cost: CostReport, p0: GridFn) -> Gradients {
        let s2 = self.sigma() * self.sigma();
        let d = u - &self.prior.u0;
        let grad_v = p0.inverse_laplacian().axpy(1.0 / s2, &d);
        let grad_l2 = p0.scale(-1.0).axpy(-1.0 / s2, &d.laplacian());
        Gradients {
            cost,
            grad_l2,
            grad_v,
            p0,
        }
    }

    /// `u0 - sigma^2 Lap^{-1} p(0)`.
    pub fn fixed_point_map(&self, u: &GridFn) -> Result<GridFn> {
        let y = self.forward(u)?;
        let adj = self.adjoint(&y)?;
        Ok(self.map_from_p0(adj.initial()))
    }

    pub(crate) fn map_from_p0(&self, p0: &GridFn) -> GridFn {
        let s2 = self.sigma() * self.sigma();
        self.prior.u0.axpy(-s2, &p0.inverse_laplacian())
    }

    /// `D^2 J(u)(v, v)` split into its three terms, given precomputed
    /// forward, adjoint and tangent trajectories.
    ///
    /// The time integral is taken with the quadrature the time-stepper
    /// induces: step `n` pairs `N''(y^n)(eta^n, eta^n)` with the implicit
    /// adjoint state `(I - dt/2 Lap)^{-1} p(t_{n+1}^-)`, weighted by `dt_n`.
    pub fn hessian_terms_from(
        &self,
        y: &Trajectory,
        adj: &AdjointTrajectory,
        eta: &Trajectory,
        v: &GridFn,
    ) -> HessianTerms {
        let mut integral = 0.0;
        for n in 0..self.mesh.n_steps() {
            let src =
                pde::second_derivative_source(&self.model, &y.states[n], &eta.states[n], &eta.states[n]);
            let w = adj.implicit[n].values();
            let pair: f64 = w.iter().zip(&src).map(|(a, b)| a * b).sum::<f64>() * v.dx();
            integral += self.mesh.dt(n) * pair;
        }
        let observational = self
            .obs_nodes
            .iter()
            .map(|&k| self.obs.weighted_sq(&self.obs.observe(&eta.states[k])))
            .sum();
        let prior = v.dot_v(v) / (self.sigma() * self.sigma());
        HessianTerms {
            nonlinear: -integral,
            observational,
            prior,
        }
    }

    pub fn hessian_terms(&self, u: &GridFn, v: &GridFn) -> Result<HessianTerms> {
        self.check_grid(v)?;
        let y = self.forward(u)?;
        let adj = self.adjoint(&y)?;
        let eta = solve_tangent(&self.model, &y, v)?;
        Ok(self.hessian_terms_from(&y, &adj, &eta, v))
    }

    pub fn hessian_form(&self, u: &GridFn, v: &GridFn) -> Result<f64> {
        Ok(self.hessian_terms(u, v)?.total())
    }

    /// `sum_i <omega(t_i), H* R^{-1}(H y(t_i) - z_i)>` computed from the
    /// second-variation trajectory, for cross-checking the adjoint integral.
    pub fn omega_pairing(&self, u: &GridFn, v: &GridFn) -> Result<f64> {
        let y = self.forward(u)?;
        let eta = solve_tangent(&self.model, &y, v)?;
        let omega = solve_second_variation(&self.model, &y, &eta)?;
        Ok(self
            .obs_nodes
            .iter()
            .enumerate()
            .map(|(i, &k)| omega.states[k].dot(&self.obs.jump(&y.states[k], i)))
            .sum())
    }
}

pub fn eval_cost(
    u: &GridFn,
    obs: &ObservationSet,
    prior: &PriorSpec,
    m: &ModelSpec,
    mesh: &TimeMesh,
) -> Result<CostReport> {
    Problem::new(m.clone(), obs.clone(), prior.clone(), mesh.clone())?.cost(u)
}

/// Returns `(grad_L2, grad_V)`.
pub fn grad_cost(
    u: &GridFn,
    obs: &ObservationSet,
    prior: &PriorSpec,
    m: &ModelSpec,
    mesh: &TimeMesh,
) -> Result<(GridFn, GridFn)> {
    let g = Problem::new(m.clone(), obs.clone(), prior.clone(), mesh.clone())?.gradient(u)?;
    Ok((g.grad_l2, g.grad_v))
}

pub fn hessian_quadratic_form(
    u: &GridFn,
    v: &GridFn,
    obs: &ObservationSet,
    prior: &PriorSpec,
    m: &ModelSpec,
    mesh: &TimeMesh,
) -> Result<f64> {
    Problem::new(m.clone(), obs.clone(), prior.clone(), mesh.clone())?.hessian_form(u, v)
}

pub fn fixed_point_map(
    u: &GridFn,
    obs: &ObservationSet,
    prior: &PriorSpec,
    m: &ModelSpec,
    mesh: &TimeMesh,
) -> Result<GridFn> {
    let p = Problem::new(m.clone(), obs.clone(), prior.clone(), mesh.clone())?;
    let out = p.fixed_point_map(u)?;
    debug!("fixed-point map: ||map(u) - u||_V = {:e}", (&out - u).norm_v());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_model, ModelKind};
    use std::f64::consts::PI;

    fn heat_problem(m: usize, t1: f64, z: f64) -> Problem {
        let model = make_model(ModelKind::Heat).unwrap();
        let obs = ObservationSet::with_scalar_covariance(
            vec![t1],
            vec![GridFn::sine_mode(m, 1)],
            1.0,
            vec![vec![z]],
        )
        .unwrap();
        let prior = PriorSpec::new(GridFn::zeros(m), 1.0).unwrap();
        let mesh = TimeMesh::new(&[t1], t1, t1 / 1000.0).unwrap();
        Problem::new(model, obs, prior, mesh).unwrap()
    }

    #[test]
    fn prior_requires_positive_sigma() {
        assert!(PriorSpec::new(GridFn::zeros(5), 0.0).is_err());
        assert!(PriorSpec::new(GridFn::zeros(5), f64::NAN).is_err());
    }

    #[test]
    fn pure_prior_cost() {
        let m = 31;
        let model = make_model(ModelKind::Burgers).unwrap();
        let obs = ObservationSet::empty(m);
        let u0 = GridFn::sine_mode(m, 2).scale(0.3);
        let prior = PriorSpec::new(u0.clone(), 0.5).unwrap();
        let mesh = TimeMesh::new(&[], 0.1, 1e-3).unwrap();
        let p = Problem::new(model, obs, prior, mesh).unwrap();
        let u = GridFn::from_fn(m, |x| x * (1.0 - x));
        let c = p.cost(&u).unwrap();
        let d = &u - &u0;
        assert_eq!(c.misfit, 0.0);
        assert!((c.total - d.dot_v(&d) / (2.0 * 0.25)).abs() < 1e-14);
        // p == 0, so the map returns u0.
        assert_eq!(p.fixed_point_map(&u).unwrap(), u0);
    }

    #[test]
    fn heat_closed_form_cost() {
        // u = sin(pi x), u0 = 0, sigma = 1, H = <., sin(pi x)>, z = 0.
        let (m, t1) = (255, 0.05);
        let p = heat_problem(m, t1, 0.0);
        let u = GridFn::sine_mode(m, 1);
        let c = p.cost(&u).unwrap();
        let oracle = 0.5 * ((-PI * PI * t1).exp() * 0.5).powi(2) + (PI * PI / 2.0) / 2.0;
        assert!((c.total - oracle).abs() / oracle < 1e-4, "{} vs {}", c.total, oracle);
        assert!((c.misfit + c.reg - c.total).abs() < 1e-15);
    }

    #[test]
    fn zero_misfit_at_prior_mean_gives_zero_gradient() {
        let m = 31;
        let model = make_model(ModelKind::BoundedReaction { c: 1.0 }).unwrap();
        let u0 = GridFn::sine_mode(m, 1).scale(0.8);
        let mesh = TimeMesh::new(&[0.02, 0.05], 0.05, 1e-3).unwrap();
        let y = solve_forward_with(&model, &u0, &mesh, &ForwardOptions::default()).unwrap();
        let rows = vec![GridFn::sine_mode(m, 1), GridFn::sine_mode(m, 2)];
        let tmp = ObservationSet::with_scalar_covariance(
            vec![0.02, 0.05],
            rows.clone(),
            1.0,
            vec![vec![0.0; 2]; 2],
        )
        .unwrap();
        let data = mesh
            .obs_indices()
            .iter()
            .map(|&k| tmp.observe(&y.states[k]))
            .collect();
        let obs = tmp.with_data(data).unwrap();
        let prior = PriorSpec::new(u0.clone(), 1.0).unwrap();
        let p = Problem::new(model, obs, prior, mesh).unwrap();
        let g = p.gradient(&u0).unwrap();
        assert!(g.cost.total < 1e-28);
        assert!(g.grad_v.sup_norm() < 1e-14);
        assert!(g.grad_l2.sup_norm() < 1e-14);
    }

    #[test]
    fn gradient_is_sigma_scaled_distance_to_map() {
        let p = heat_problem(31, 0.05, 0.7);
        let u = GridFn::from_fn(31, |x| (2.0 * PI * x).sin() + x * (1.0 - x));
        let g = p.gradient(&u).unwrap();
        let fp = p.fixed_point_map(&u).unwrap();
        let s2 = p.sigma() * p.sigma();
        let alt = (&u - &fp).scale(1.0 / s2);
        assert!((&alt - &g.grad_v).sup_norm() <= 1e-12 * g.grad_v.sup_norm().max(1.0));
    }

    #[test]
    fn linear_model_hessian_without_observed_response_is_prior_only() {
        // H sees only mode 1; a mode-3 direction is invisible under the heat flow.
        let p = heat_problem(31, 0.05, 0.4);
        let u = GridFn::sine_mode(31, 1);
        let v = GridFn::sine_mode(31, 3);
        let q = p.hessian_form(&u, &v).unwrap();
        let prior = v.dot_v(&v) / (p.sigma() * p.sigma());
        assert!((q - prior).abs() <= 1e-12 * prior);
    }
}
