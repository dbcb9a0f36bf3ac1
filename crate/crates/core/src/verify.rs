//! Numerical self-checks: derivative consistency, discrete duality, Taylor
//! remainders, gradient and Hessian finite differences, prior statistics and
//! the a priori bounds. `run_verify` bundles them into a report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assimilation::{assemble_hessian, Problem};
use crate::bayes::{log_density_ratio, KLExpansion};
use crate::certificates::{convexity_certificate, verify_apriori_bounds};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::grid::GridFn;
use crate::model::{check_global_existence, ModelSpec};
use crate::optimize::{cost_floor, minimize, Method, OptimizeOptions};
use crate::pde::{solve_forward, solve_second_variation, solve_tangent, TimeMesh};

/// `sum_{n<=modes} amp * xi_n / n * sin(n pi x)` with standard normal `xi_n`.
pub fn random_smooth<R: Rng + ?Sized>(m: usize, modes: usize, amp: f64, rng: &mut R) -> GridFn {
    (1..=modes.min(m)).fold(GridFn::zeros(m), |acc, n| {
        let xi: f64 = rng.sample(StandardNormal);
        acc.axpy(amp * xi / n as f64, &GridFn::sine_mode(m, n))
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Relative error between `<grad_V J(u), v>_V` and the central difference of `J`.
pub fn gradient_check(problem: &Problem, u: &GridFn, v: &GridFn, eps: f64) -> Result<f64> {
    let g = problem.gradient(u)?;
    let exact = g.grad_v.dot_v(v);
    let jp = problem.cost(&u.axpy(eps, v))?.total;
    let jm = problem.cost(&u.axpy(-eps, v))?.total;
    let fd = (jp - jm) / (2.0 * eps);
    Ok((fd - exact).abs() / exact.abs().max(f64::MIN_POSITIVE))
}

/// Relative gap between `<grad_V, v>_V` and `<grad_L2, v>`.
pub fn riesz_check(problem: &Problem, u: &GridFn, v: &GridFn) -> Result<f64> {
    let g = problem.gradient(u)?;
    let a = g.grad_v.dot_v(v);
    let b = g.grad_l2.dot(v);
    Ok((a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE))
}

/// Relative gap between `D^2 J(u)(v, v)` and the second central difference.
pub fn hessian_check(problem: &Problem, u: &GridFn, v: &GridFn, eps: f64) -> Result<f64> {
    let q = problem.hessian_form(u, v)?;
    let j0 = problem.cost(u)?.total;
    let jp = problem.cost(&u.axpy(eps, v))?.total;
    let jm = problem.cost(&u.axpy(-eps, v))?.total;
    let fd = (jp - 2.0 * j0 + jm) / (eps * eps);
    Ok((fd - q).abs() / q.abs().max(f64::MIN_POSITIVE))
}

/// Relative gap between `grad_V J(u)` and `sigma^{-2}(u - map(u))`.
pub fn fixed_point_identity(problem: &Problem, u: &GridFn) -> Result<f64> {
    let g = problem.gradient(u)?;
    let map = problem.fixed_point_map(u)?;
    let alt = (u - &map).scale(1.0 / (problem.sigma() * problem.sigma()));
    Ok((&alt - &g.grad_v).norm_v() / g.grad_v.norm_v().max(f64::MIN_POSITIVE))
}

/// Largest relative variation of `<p(t^+), eta(t)>` across the mesh nodes
/// between consecutive observation times.
pub fn duality_variation(problem: &Problem, u: &GridFn, v: &GridFn) -> Result<f64> {
    let y = problem.forward(u)?;
    let eta = solve_tangent(&problem.model, &y, v)?;
    let adj = problem.adjoint(&y)?;
    let mut worst = 0.0_f64;
    let mut start = 0;
    for &k in problem.obs_nodes() {
        let mut vals: Vec<f64> = (start..k).map(|n| adj.right[n].dot(&eta.states[n])).collect();
        vals.push(adj.left[k].dot(&eta.states[k]));
        let scale = vals.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if scale > 0.0 {
            for v in &vals {
                worst = worst.max((v - vals[0]).abs() / scale);
            }
        }
        start = k;
    }
    Ok(worst)
}

/// Remainders `||y(u + eps v)(T) - y(u)(T) - eps eta(T)||` for each `eps`.
pub fn taylor_remainders(m: &ModelSpec, mesh: &TimeMesh, u: &GridFn, v: &GridFn, eps: &[f64]) -> Result<Vec<f64>> {
    let y = solve_forward(m, u, mesh)?;
    let eta = solve_tangent(m, &y, v)?;
    eps.iter()
        .map(|&e| {
            let yp = solve_forward(m, &u.axpy(e, v), mesh)?;
            Ok((&(yp.last() - y.last()) - &eta.last().scale(e)).norm())
        })
        .collect()
}

/// Remainders `||omega(T) - (y(u+eps v) - 2 y(u) + y(u-eps v))(T) / eps^2||`.
pub fn second_variation_remainders(
    m: &ModelSpec,
    mesh: &TimeMesh,
    u: &GridFn,
    v: &GridFn,
    eps: &[f64],
) -> Result<Vec<f64>> {
    let y = solve_forward(m, u, mesh)?;
    let eta = solve_tangent(m, &y, v)?;
    let omega = solve_second_variation(m, &y, &eta)?;
    eps.iter()
        .map(|&e| {
            let yp = solve_forward(m, &u.axpy(e, v), mesh)?;
            let ym = solve_forward(m, &u.axpy(-e, v), mesh)?;
            let fd = (&(yp.last() + ym.last()) - &y.last().scale(2.0)).scale(1.0 / (e * e));
            Ok((&fd - omega.last()).norm())
        })
        .collect()
}

/// Observational part of the Hessian computed two ways: pairing the second
/// variation with the misfit, and the adjoint time integral.
pub fn observational_term_gap(problem: &Problem, u: &GridFn, v: &GridFn) -> Result<(f64, f64)> {
    let pairing = problem.omega_pairing(u, v)?;
    let terms = problem.hessian_terms(u, v)?;
    Ok((pairing, terms.nonlinear))
}

/// Monte-Carlo estimate of `E||u - u0||^2` with its standard error.
pub fn prior_energy<R: Rng + ?Sized>(kl: &KLExpansion, draws: usize, rng: &mut R) -> (f64, f64) {
    let vals: Vec<f64> = (0..draws)
        .map(|_| {
            let d = kl.sample_perturbation(rng);
            d.dot(&d)
        })
        .collect();
    mean_and_se(&vals)
}

pub fn mean_and_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Suite {
    pub name: String,
    pub checks: Vec<Check>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VerifyReport {
    pub seed: u64,
    pub suites: Vec<Suite>,
    pub passed: bool,
}

struct SuiteBuilder {
    name: &'static str,
    checks: Vec<Check>,
}

impl SuiteBuilder {
    fn new(name: &'static str) -> Self {
        SuiteBuilder {
            name,
            checks: Vec::new(),
        }
    }

    fn at_most(&mut self, name: impl Into<String>, value: f64, threshold: f64) {
        self.checks.push(Check {
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
        });
    }

    fn within(&mut self, name: impl Into<String>, value: f64, lo: f64, hi: f64) {
        self.checks.push(Check {
            name: name.into(),
            value,
            threshold: hi,
            passed: value >= lo && value <= hi,
        });
    }

    fn holds(&mut self, name: impl Into<String>, ok: bool) {
        self.checks.push(Check {
            name: name.into(),
            value: if ok { 1.0 } else { 0.0 },
            threshold: 1.0,
            passed: ok,
        });
    }

    fn build(self) -> Suite {
        let passed = self.checks.iter().all(|c| c.passed);
        Suite {
            name: self.name.into(),
            checks: self.checks,
            passed,
        }
    }
}

/// Remainders below this level are treated as exact (linear dependence).
const EXACT_REMAINDER: f64 = 1e-11;

fn model_suite(m: &ModelSpec) -> Suite {
    let mut s = SuiteBuilder::new("model");
    let samples: Vec<f64> = (0..=40).map(|k| -10.0 + 0.5 * k as f64).collect();
    let (h1, h2) = (1e-2, 5e-3);
    let r1 = m.derivative_residuals(&samples, h1);
    let r2 = m.derivative_residuals(&samples, h2);
    for (k, name) in ["df", "d2f", "dr", "d2r"].iter().enumerate() {
        if r1[k] <= 1e-9 {
            s.at_most(format!("{name}_residual_exact"), r1[k], 1e-9);
        } else {
            s.within(format!("{name}_convergence_order"), (r1[k] / r2[k]).log2(), 1.8, 2.2);
        }
    }
    s.holds("maps_finite", m.all_finite_on(&samples));
    let g = check_global_existence(m, 1.0);
    s.holds("growth_screen_agrees_with_flag", g.well_posed == m.globally_well_posed || g.indeterminate);
    s.build()
}

fn pde_suite(p: &Problem, dirs: &[(GridFn, GridFn)]) -> Result<Suite> {
    let mut s = SuiteBuilder::new("pde");
    let m = &p.model;
    let zero = GridFn::zeros(p.grid_size());
    if (m.r)(0.0) == 0.0 {
        let y = solve_forward(m, &zero, &p.mesh)?;
        let sup = y.states.iter().fold(0.0_f64, |a, st| a.max(st.sup_norm()));
        s.at_most("zero_equilibrium", sup, 0.0);
    }
    let eps = [1e-1, 1e-2, 1e-3, 1e-4];
    for (k, (u, v)) in dirs.iter().enumerate() {
        s.at_most(format!("duality_{k}"), duality_variation(p, u, v)?, 1e-12);
        let rem = taylor_remainders(m, &p.mesh, u, v, &eps)?;
        if rem.iter().all(|r| *r <= EXACT_REMAINDER) {
            s.at_most(format!("taylor_exact_{k}"), rem[0], EXACT_REMAINDER);
        } else {
            s.within(format!("taylor_order_{k}"), loglog_slope(&eps, &rem), 1.9, 2.1);
        }
    }
    Ok(s.build())
}

fn assimilation_suite(p: &Problem, dirs: &[(GridFn, GridFn)]) -> Result<Suite> {
    let mut s = SuiteBuilder::new("assimilation");
    for (k, (u, v)) in dirs.iter().enumerate() {
        s.at_most(format!("gradient_fd_{k}"), gradient_check(p, u, v, 1e-5)?, 1e-6);
        s.at_most(format!("riesz_{k}"), riesz_check(p, u, v)?, 1e-12);
        s.at_most(format!("fixed_point_identity_{k}"), fixed_point_identity(p, u)?, 1e-12);
        s.at_most(format!("hessian_fd_{k}"), hessian_check(p, u, v, 1e-3)?, 1e-4);
        let (a, b) = observational_term_gap(p, u, v)?;
        s.at_most(
            format!("second_variation_pairing_{k}"),
            (a - b).abs() / a.abs().max(b.abs()).max(1e-300),
            1e-6,
        );
    }
    let modes = (p.grid_size() / 2).min(4);
    let h = assemble_hessian(p, &dirs[0].0, modes)?;
    let mut asym = 0.0_f64;
    let mut norm = 0.0_f64;
    for i in 0..modes {
        for j in 0..modes {
            asym = asym.max((h.matrix[i][j] - h.matrix[j][i]).abs());
            norm = norm.max(h.matrix[i][j].abs());
        }
    }
    s.at_most("hessian_symmetry", asym / norm.max(1e-300), 1e-10);
    if p.model.is_linear_on(&[-5.0, -1.0, 0.0, 1.0, 5.0]) {
        s.holds("linear_model_hessian_positive", h.min_eigenvalue() > 0.0);
    }
    Ok(s.build())
}

fn optimize_suite(p: &Problem) -> Result<Suite> {
    let mut s = SuiteBuilder::new("optimize");
    let opts = OptimizeOptions {
        max_iters: 2000,
        ..Default::default()
    };
    let r = minimize(p, &p.prior.u0, Method::Lbfgs, &opts)?;
    s.holds("converged", r.converged);
    s.holds("monotone_path", r.path_costs.windows(2).all(|w| w[1] <= w[0] + cost_floor(w[0])));
    let map = p.fixed_point_map(&r.minimizer)?;
    let s2 = p.sigma() * p.sigma();
    s.at_most(
        "fixed_point_residual",
        (&map - &r.minimizer).norm_v(),
        s2 * r.tolerance * (1.0 + 1e-6),
    );
    Ok(s.build())
}

fn bayes_suite<R: Rng + ?Sized>(p: &Problem, draws: usize, u: &GridFn, rng: &mut R) -> Result<Suite> {
    let mut s = SuiteBuilder::new("bayes");
    let kl = KLExpansion::new(p.prior.u0.clone(), p.sigma(), None)?;
    let target: f64 = kl.eigenvalues.iter().sum();
    let (mean, se) = prior_energy(&kl, draws, rng);
    s.at_most("prior_energy_standard_errors", (mean - target).abs() / se, 3.0);
    let ldr = log_density_ratio(u, &p.obs, &p.model, &p.mesh)?;
    let c = p.cost(u)?;
    s.at_most(
        "density_ratio_vs_misfit",
        (ldr + 2.0 * c.misfit).abs(),
        1e-12 * c.misfit.max(1.0),
    );
    Ok(s.build())
}

fn certificates_suite(p: &Problem, dirs: &[(GridFn, GridFn)]) -> Result<Suite> {
    let mut s = SuiteBuilder::new("certificates");
    let rep = convexity_certificate(p, None)?;
    s.holds("constants_finite", rep.lhs.is_finite() && rep.b_sup.is_finite());
    for (k, pair) in dirs.windows(2).enumerate() {
        let u = pair[0].0.scale(1.0 / pair[0].0.norm_v().max(1.0));
        let other = pair[1].0.scale(1.0 / pair[1].0.norm_v().max(1.0));
        let b = verify_apriori_bounds(p, &u, &pair[0].1, &other, 1e-8)?;
        for r in &b.records {
            s.holds(format!("{}_{k}", r.name), r.passes);
        }
    }
    Ok(s.build())
}

/// Runs every suite on the configured problem; deterministic for a fixed seed.
pub fn run_verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    let p = cfg.build_problem()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = p.grid_size();
    let n = cfg.verify.samples.max(2);
    let dirs: Vec<(GridFn, GridFn)> = (0..n)
        .map(|_| {
            let u = p.prior.u0.axpy(1.0, &random_smooth(m, 4, 0.5, &mut rng));
            let v = random_smooth(m, 4, 1.0, &mut rng);
            (u, v)
        })
        .collect();
    let suites = vec![
        model_suite(&p.model),
        pde_suite(&p, &dirs)?,
        assimilation_suite(&p, &dirs)?,
        optimize_suite(&p)?,
        bayes_suite(&p, cfg.verify.prior_draws, &dirs[0].0, &mut rng)?,
        certificates_suite(&p, &dirs)?,
    ];
    let passed = suites.iter().all(|s| s.passed);
    Ok(VerifyReport {
        seed: cfg.seed,
        suites,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.7)).collect();
        assert!((loglog_slope(&xs, &ys) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn default_config_verifies() {
        let cfg = ExperimentConfig::default();
        let rep = run_verify(&cfg).unwrap();
        for s in &rep.suites {
            for c in &s.checks {
                assert!(c.passed, "{}::{} = {:e} (threshold {:e})", s.name, c.name, c.value, c.threshold);
            }
        }
    }
}
