//! A priori constants, the convexity certificate for uniqueness of critical
//! points, empirical checks of the a priori bounds, and construction of
//! instances where `u = 0` is a saddle of high Morse index.

use std::f64::consts::PI;
use std::io::Write;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assimilation::{assemble_hessian, HessianReport, ObservationSet, PriorSpec, Problem};
use crate::error::{Error, Result};
use crate::grid::GridFn;
use crate::model::{ModelSpec, ScalarMap};
use crate::pde::{solve_adjoint, solve_forward, solve_tangent, TimeMesh, Trajectory};

const SUP_SAMPLES: usize = 4096;
const SUP_INFLATION: f64 = 1.05;
const ODE_CEILING: f64 = 1e100;

/// Comparison functions `psi_+ >= y >= psi_-` for the forward equation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointwiseBound {
    pub b: f64,
    pub times: Vec<f64>,
    pub psi_plus: Vec<f64>,
    pub psi_minus: Vec<f64>,
}

fn rk4(g: &dyn Fn(f64) -> f64, y: f64, h: f64) -> f64 {
    let k1 = g(y);
    let k2 = g(y + 0.5 * h * k1);
    let k3 = g(y + 0.5 * h * k2);
    let k4 = g(y + h * k3);
    y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Integrates `psi' = +-|r(psi)|`, `psi(0) = +-a` through the given increasing
/// times, taking `substeps` RK4 steps per interval.
pub fn pointwise_bound_on(
    m: &ModelSpec,
    a: f64,
    times: &[f64],
    substeps: usize,
) -> Result<PointwiseBound> {
    if !(a >= 0.0 && a.is_finite()) {
        return Err(Error::Config(format!("initial bound must be >= 0, got {a}")));
    }
    let r = &m.r;
    let up = |y: f64| r(y).abs();
    let down = |y: f64| -r(y).abs();
    let substeps = substeps.max(1);
    let mut plus = vec![a];
    let mut minus = vec![-a];
    let (mut p, mut q) = (a, -a);
    for w in times.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for _ in 0..substeps {
            p = rk4(&up, p, h);
            q = rk4(&down, q, h);
        }
        if !(p.abs() < ODE_CEILING && q.abs() < ODE_CEILING) {
            return Err(Error::OdeBlowUp { time: w[1] });
        }
        plus.push(p);
        minus.push(q);
    }
    let b = plus
        .iter()
        .zip(&minus)
        .fold(0.0_f64, |acc, (p, q)| acc.max(*p).max(-q));
    Ok(PointwiseBound {
        b,
        times: times.to_vec(),
        psi_plus: plus,
        psi_minus: minus,
    })
}

/// Sup-norm bound `B` on `[0, t]` for initial data with `|u| <= a`.
pub fn pointwise_bound(m: &ModelSpec, a: f64, t: f64) -> Result<PointwiseBound> {
    if !(t > 0.0) {
        return Err(Error::Config(format!("horizon must be positive, got {t}")));
    }
    let n = 1000;
    let times: Vec<f64> = (0..=n).map(|k| t * k as f64 / n as f64).collect();
    pointwise_bound_on(m, a, &times, 4)
}

/// Sampled `sup |g|` on `[-b, b]`, inflated by 5%.
pub fn sampled_sup(g: &ScalarMap, b: f64) -> f64 {
    let n = SUP_SAMPLES;
    let s = (0..n)
        .map(|k| {
            let y = -b + 2.0 * b * k as f64 / (n - 1) as f64;
            g(y).abs()
        })
        .fold(0.0_f64, f64::max);
    s * SUP_INFLATION
}

/// `int_0^T exp(alpha t + beta (T - t)) dt`.
pub fn exp_integral(alpha: f64, beta: f64, t: f64) -> f64 {
    let d = alpha - beta;
    if (d * t).abs() < 1e-12 {
        t * (alpha * t).exp()
    } else {
        (beta * t).exp() * (d * t).exp_m1() / d
    }
}

/// Quantities the certificate depends on besides the model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CertificateInputs {
    /// Radius of the V-ball containing every minimizer.
    pub a_bound: f64,
    pub t_n: f64,
    pub n_obs: usize,
    pub sigma: f64,
    pub data_bound: f64,
    /// `||H||` from L2 to `R^q`.
    pub h_norm: f64,
    /// `||H* R^{-1}||` from `R^q` to L2.
    pub hr_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub v_norm: f64,
    pub in_ball: bool,
    pub hessian_min_eig: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateReport {
    pub inputs: CertificateInputs,
    pub a_bound: f64,
    pub b_sup: f64,
    pub r1: f64,
    pub r2: f64,
    pub f1: f64,
    pub f2: f64,
    pub alpha: f64,
    pub beta: f64,
    /// `2 R1 + F1^2`, the explicit adjoint growth rate.
    pub gamma: f64,
    /// `4 beta`, the relaxed form of the same rate.
    pub gamma_relaxed: f64,
    pub c_prime: f64,
    pub cp: f64,
    /// `lhs / sqrt(t_N)`.
    pub gamma_bound: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub passes: bool,
    pub probe: Option<ProbeReport>,
}

/// Evaluates the certificate constants for explicit inputs.
pub fn certificate_from_inputs(m: &ModelSpec, inp: &CertificateInputs) -> Result<CertificateReport> {
    let pb = pointwise_bound(m, inp.a_bound, inp.t_n)?;
    let b = pb.b;
    let r1 = sampled_sup(&m.dr, b);
    let r2 = sampled_sup(&m.d2r, b);
    let f1 = sampled_sup(&m.df, b);
    let f2 = sampled_sup(&m.d2f, b);
    let alpha = (4.0 * r1 + 3.0 * f1 * f1) / 2.0;
    let beta = r1 + f1 * f1 / 4.0;
    let gamma = 2.0 * r1 + f1 * f1;
    let c_prime = inp.hr_norm * (inp.h_norm * b + inp.data_bound);
    let cp = inp.n_obs as f64 * c_prime;
    let t = inp.t_n;
    let lhs = cp * r2 * exp_integral(alpha, beta, t)
        + cp * f2 * t.sqrt() * ((alpha + 2.0 * beta) * t).exp();
    let rhs = 1.0 / (inp.sigma * inp.sigma);
    let consts = [
        ("B", b),
        ("R1", r1),
        ("R2", r2),
        ("F1", f1),
        ("F2", f2),
        ("alpha", alpha),
        ("beta", beta),
        ("C'", c_prime),
        ("C", cp),
        ("lhs", lhs),
        ("rhs", rhs),
    ];
    if let Some((name, _)) = consts.iter().find(|(_, c)| !c.is_finite()) {
        return Err(Error::NonFiniteConstant((*name).into()));
    }
    Ok(CertificateReport {
        inputs: *inp,
        a_bound: inp.a_bound,
        b_sup: b,
        r1,
        r2,
        f1,
        f2,
        alpha,
        beta,
        gamma,
        gamma_relaxed: 4.0 * beta,
        c_prime,
        cp,
        gamma_bound: lhs / t.sqrt(),
        lhs,
        rhs,
        passes: lhs < rhs,
        probe: None,
    })
}

/// `sum_i |R^{-1/2}(H y(t_i) - z_i)|^2` for the solution started from zero.
fn misfit_from_zero(problem: &Problem) -> Result<f64> {
    let y = problem.forward(&GridFn::zeros(problem.grid_size()))?;
    Ok(problem.misfit_sum(&y))
}

/// `||u0||_V + sqrt(sigma^2 m0 + ||u0||_V^2)`: every minimizer lies in this ball.
fn minimizer_radius(u0: &GridFn, sigma: f64, m0: f64) -> f64 {
    let n0 = u0.norm_v();
    n0 + (sigma * sigma * m0 + n0 * n0).sqrt()
}

fn inputs_for(problem: &Problem, m0: f64) -> CertificateInputs {
    CertificateInputs {
        a_bound: minimizer_radius(&problem.prior.u0, problem.sigma(), m0),
        t_n: problem.mesh.t_end(),
        n_obs: problem.obs.n_obs(),
        sigma: problem.sigma(),
        data_bound: problem.obs.data_bound(),
        h_norm: problem.obs.h_op_norm(),
        hr_norm: problem.obs.h_adjoint_rinv_op_norm(),
    }
}

pub fn convexity_certificate(problem: &Problem, u_probe: Option<&GridFn>) -> Result<CertificateReport> {
    let m0 = misfit_from_zero(problem)?;
    let mut rep = certificate_from_inputs(&problem.model, &inputs_for(problem, m0))?;
    if let Some(u) = u_probe {
        let v_norm = u.norm_v();
        let modes = (problem.grid_size() / 2).min(4);
        let eig = if modes > 0 {
            Some(assemble_hessian(problem, u, modes)?.min_eigenvalue())
        } else {
            None
        };
        rep.probe = Some(ProbeReport {
            v_norm,
            in_ball: v_norm <= rep.a_bound,
            hessian_min_eig: eig,
        });
    }
    debug!("certificate: lhs = {:e}, rhs = {:e}", rep.lhs, rep.rhs);
    Ok(rep)
}

/// The same problem with every observation time scaled so that the last one
/// is `t_n`; the mesh keeps its number of steps per interval.
pub fn rescale_horizon(problem: &Problem, t_n: f64) -> Result<Problem> {
    let t_old = problem.mesh.t_end();
    let last = problem.obs.last_time().unwrap_or(t_old);
    let s = t_n / last;
    let mut times: Vec<f64> = problem.obs.times().iter().map(|t| t * s).collect();
    if let Some(t) = times.last_mut() {
        *t = t_n;
    }
    let t_end = if t_old == last { t_n } else { (t_old * s).max(t_n) };
    let obs = ObservationSet::new(
        times.clone(),
        problem.obs.rows().to_vec(),
        cov_rows(problem.obs.covariance()),
        problem.obs.data().to_vec(),
        Some(problem.obs.data_bound()),
    )?;
    let mesh = TimeMesh::new(&times, t_end, problem.mesh.dt_max() * s)?;
    Problem::new(problem.model.clone(), obs, problem.prior.clone(), mesh)
}

fn cov_rows(r: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..r.nrows()).map(|i| r.row(i).iter().copied().collect()).collect()
}

/// Geometric bisection for the boundary of a predicate that holds at `lo`
/// and fails at `hi`. Returns `None` if the bracket is not valid.
fn bisect(lo: f64, hi: f64, pred: impl Fn(f64) -> Result<bool>) -> Result<Option<f64>> {
    if !pred(lo)? || pred(hi)? {
        return Ok(None);
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..60 {
        let mid = (a * b).sqrt();
        if pred(mid)? {
            a = mid;
        } else {
            b = mid;
        }
        if b / a - 1.0 < 1e-10 {
            break;
        }
    }
    Ok(Some(a))
}

/// Overflowing constants mean the certificate cannot pass.
fn passes_or_overflow(r: Result<CertificateReport>) -> Result<bool> {
    match r {
        Ok(rep) => Ok(rep.passes),
        Err(Error::NonFiniteConstant(_) | Error::OdeBlowUp { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Largest final observation time (within `[lo, hi]`) for which the
/// certificate passes.
pub fn threshold_horizon(problem: &Problem, lo: f64, hi: f64) -> Result<Option<f64>> {
    bisect(lo, hi, |t| {
        let p = rescale_horizon(problem, t)?;
        passes_or_overflow(convexity_certificate(&p, None))
    })
}

/// Largest prior scale (within `[lo, hi]`) for which the certificate passes.
pub fn threshold_sigma(problem: &Problem, lo: f64, hi: f64) -> Result<Option<f64>> {
    let m0 = misfit_from_zero(problem)?;
    bisect(lo, hi, |s| {
        let mut inp = inputs_for(problem, m0);
        inp.sigma = s;
        inp.a_bound = minimizer_radius(&problem.prior.u0, s, m0);
        passes_or_overflow(certificate_from_inputs(&problem.model, &inp))
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub t_n: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub passes: bool,
}

/// Certificate on the grid `sigmas x horizons`, row-major in `sigma`.
pub fn certificate_sweep(problem: &Problem, sigmas: &[f64], horizons: &[f64]) -> Result<Vec<SweepRow>> {
    let cells: Vec<(f64, f64)> = sigmas
        .iter()
        .flat_map(|&s| horizons.iter().map(move |&t| (s, t)))
        .collect();
    cells
        .par_iter()
        .map(|&(sigma, t_n)| {
            let p = rescale_horizon(problem, t_n)?;
            let p = p.with_prior(PriorSpec::new(p.prior.u0.clone(), sigma)?);
            let row = match convexity_certificate(&p, None) {
                Ok(rep) => SweepRow {
                    sigma,
                    t_n,
                    lhs: rep.lhs,
                    rhs: rep.rhs,
                    passes: rep.passes,
                },
                Err(Error::NonFiniteConstant(_) | Error::OdeBlowUp { .. }) => SweepRow {
                    sigma,
                    t_n,
                    lhs: f64::INFINITY,
                    rhs: sigma.powi(-2),
                    passes: false,
                },
                Err(e) => return Err(e),
            };
            Ok(row)
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "sigma,t_n,lhs,rhs,passes")?;
    for r in rows {
        writeln!(w, "{:e},{:e},{:e},{:e},{}", r.sigma, r.t_n, r.lhs, r.rhs, r.passes)?;
    }
    Ok(())
}

/// One bound checked along the time mesh.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundRecord {
    pub name: String,
    pub times: Vec<f64>,
    pub bound: Vec<f64>,
    pub observed: Vec<f64>,
    /// `min_t (bound - observed) / observed`; infinite when nothing is observed.
    pub margin: f64,
    pub passes: bool,
}

impl BoundRecord {
    fn new(name: &str, times: Vec<f64>, bound: Vec<f64>, observed: Vec<f64>, tol: f64) -> Self {
        let mut margin = f64::INFINITY;
        let mut passes = true;
        for (b, o) in bound.iter().zip(&observed) {
            if *o > 0.0 {
                margin = margin.min((b - o) / o);
            }
            if !(*o <= b * (1.0 + tol)) {
                passes = false;
            }
        }
        BoundRecord {
            name: name.into(),
            times,
            bound,
            observed,
            margin,
            passes,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundCheckReport {
    pub records: Vec<BoundRecord>,
    pub a: f64,
    pub b: f64,
    pub k_r: f64,
    pub k_f: f64,
    /// Lipschitz factor at the final time.
    pub l: f64,
    pub alpha: f64,
    pub beta: f64,
    pub cp: f64,
    pub sup_bound: f64,
    pub passes: bool,
}

impl BoundCheckReport {
    pub fn record(&self, name: &str) -> Option<&BoundRecord> {
        self.records.iter().find(|r| r.name == name)
    }
}

/// `int_0^t e^{a s}(c + b s) ds`.
fn growth_integral(a: f64, b: f64, c: f64, t: f64) -> f64 {
    if a.abs() * t < 1e-12 {
        c * t + 0.5 * b * t * t
    } else {
        let e = (a * t).exp_m1();
        c * e / a + b * (t * (a * t).exp() / a - e / (a * a))
    }
}

/// Checks the a priori bounds along the solutions from `u` and `u_other` and
/// the tangent in direction `v`, using the problem's observations and model.
pub fn verify_apriori_bounds(
    problem: &Problem,
    u: &GridFn,
    v: &GridFn,
    u_other: &GridFn,
    tol: f64,
) -> Result<BoundCheckReport> {
    let m = &problem.model;
    let mesh = &problem.mesh;
    let times = mesh.nodes().to_vec();
    let t_n = mesh.t_end();
    let y = solve_forward(m, u, mesh)?;
    let y2 = solve_forward(m, u_other, mesh)?;
    let eta = solve_tangent(m, &y, v)?;
    let adj = solve_adjoint(m, &y, &problem.obs)?;

    let a0 = u.sup_norm().max(u_other.sup_norm());
    let pb = pointwise_bound_on(m, a0, &times, 8)?;
    let big_b = pb.b;
    let r1 = sampled_sup(&m.dr, big_b);
    let f1 = sampled_sup(&m.df, big_b);
    let k_f = sampled_sup(&m.d2f, big_b);
    let k_r = r1;
    let alpha = (4.0 * r1 + 3.0 * f1 * f1) / 2.0;
    let beta = r1 + f1 * f1 / 4.0;
    let obs = &problem.obs;
    let c_prime = obs.h_adjoint_rinv_op_norm() * (obs.h_op_norm() * big_b + obs.data_bound());
    let cp = obs.n_obs() as f64 * c_prime;

    let mut records = Vec::new();

    let sup = |t: &Trajectory| t.states.iter().map(|s| s.sup_norm()).collect::<Vec<_>>();
    let comparison: Vec<f64> = pb
        .psi_plus
        .iter()
        .zip(&pb.psi_minus)
        .map(|(p, q)| p.max(-q))
        .collect();
    let obs_sup: Vec<f64> = sup(&y).into_iter().zip(sup(&y2)).map(|(a, b)| a.max(b)).collect();
    records.push(BoundRecord::new("pointwise", times.clone(), comparison, obs_sup, tol));

    let v2 = v.l4_sq();
    records.push(BoundRecord::new(
        "tangent_l4",
        times.clone(),
        times.iter().map(|t| v2 * (alpha * t).exp()).collect(),
        eta.states.iter().map(|e| e.l4_sq()).collect(),
        tol,
    ));

    let p_obs: Vec<f64> = adj
        .left
        .iter()
        .zip(&adj.right)
        .map(|(l, r)| l.norm().max(r.norm()))
        .collect();
    records.push(BoundRecord::new(
        "adjoint_l2",
        times.clone(),
        times.iter().map(|t| cp * (beta * (t_n - t)).exp()).collect(),
        p_obs,
        tol,
    ));

    let px_int: f64 = (0..mesh.n_steps())
        .map(|n| 0.5 * mesh.dt(n) * (adj.right[n].norm_v() + adj.left[n + 1].norm_v()))
        .sum();
    records.push(BoundRecord::new(
        "adjoint_gradient_integral",
        vec![t_n],
        vec![cp * t_n.sqrt() * (2.0 * beta * t_n).exp()],
        vec![px_int],
        tol,
    ));

    let r0 = (m.r)(0.0);
    let a = 2.0 * k_r + if r0 != 0.0 { 1.0 } else { 0.0 };
    let b = r0 * r0;
    let u_sq = u.dot(u);
    records.push(BoundRecord::new(
        "state_l2",
        times.clone(),
        times.iter().map(|t| (a * t).exp() * (u_sq + b * t)).collect(),
        y.states.iter().map(|s| s.dot(s)).collect(),
        tol,
    ));

    let gradient_energy = |w: &GridFn, t: f64| {
        let c = w.dot(w);
        0.5 * (c + a * growth_integral(a, b, c, t) + b * t)
    };
    let fp0 = (m.df)(0.0).abs();
    let lip = |t: f64| {
        let i = gradient_energy(u, t) + gradient_energy(u_other, t);
        (2.0 * (k_r * t + 0.75 * (k_f * k_f * i + fp0 * fp0 * t))).exp()
    };
    let d0 = u - u_other;
    let d0_sq = d0.dot(&d0);
    records.push(BoundRecord::new(
        "lipschitz",
        times.clone(),
        times.iter().map(|&t| lip(t) * d0_sq).collect(),
        y.states
            .iter()
            .zip(&y2.states)
            .map(|(p, q)| {
                let d = p - q;
                d.dot(&d)
            })
            .collect(),
        tol,
    ));

    let passes = records.iter().all(|r| r.passes);
    Ok(BoundCheckReport {
        records,
        a,
        b,
        k_r,
        k_f,
        l: lip(t_n),
        alpha,
        beta,
        cp,
        sup_bound: big_b,
        passes,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaddleOptions {
    pub q: usize,
    pub times: Vec<f64>,
    pub sigma: f64,
    /// Interior grid nodes.
    pub grid: usize,
    pub dt_max: f64,
    /// Data magnitude; the threshold formula is used when absent.
    pub magnitude: Option<f64>,
    /// Number of modes for the validating Hessian; at least `2q`.
    pub hessian_modes: usize,
    /// Maximum number of magnitude doublings during validation.
    pub max_doublings: usize,
}

impl Default for SaddleOptions {
    fn default() -> Self {
        SaddleOptions {
            q: 1,
            times: vec![0.05, 0.1],
            sigma: 1.0,
            grid: 63,
            dt_max: 1e-4,
            magnitude: None,
            hessian_modes: 0,
            max_doublings: 30,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaddleInstance {
    pub obs: ObservationSet,
    pub prior: PriorSpec,
    pub mesh: TimeMesh,
    /// Common data value `z_i`.
    pub z: f64,
    /// Magnitude from the closed-form threshold, before any validation.
    pub threshold_magnitude: f64,
    pub doublings: usize,
    pub hessian: HessianReport,
}

impl SaddleInstance {
    pub fn problem(&self, model: &ModelSpec) -> Result<Problem> {
        Problem::new(model.clone(), self.obs.clone(), self.prior.clone(), self.mesh.clone())
    }
}

/// Data magnitude above which `D^2 J(0)` is negative along the `q`-th mode.
pub fn saddle_threshold(q: usize, times: &[f64], sigma: f64, r2_at_zero: f64) -> f64 {
    let pi2 = PI * PI;
    let qf = q as f64;
    let num: f64 = times.iter().map(|t| (-2.0 * pi2 * t).exp()).sum::<f64>() + 0.5 / (sigma * sigma);
    let coef = 4.0 * qf * qf / (2.0 * PI.powi(3) * (4.0 * qf * qf - 1.0));
    let s: f64 = times
        .iter()
        .map(|t| (-2.0 * qf * qf * pi2 * t).exp() * (pi2 * t).exp_m1())
        .sum();
    2.0 * num / (coef * r2_at_zero.abs() / 2.0 * s)
}

fn saddle_at(
    model: &ModelSpec,
    opts: &SaddleOptions,
    mesh: &TimeMesh,
    z: f64,
) -> Result<(ObservationSet, PriorSpec)> {
    let m = opts.grid;
    let n = opts.times.len();
    let obs = ObservationSet::with_scalar_covariance(
        opts.times.clone(),
        vec![GridFn::sine_mode(m, 1)],
        1.0,
        vec![vec![z]; n],
    )?
    .with_data_bound(z.abs())?;
    let zero = GridFn::zeros(m);
    let y = solve_forward(model, &zero, mesh)?;
    let adj = solve_adjoint(model, &y, &obs)?;
    let u0 = adj.initial().inverse_laplacian().scale(opts.sigma * opts.sigma);
    Ok((obs, PriorSpec::new(u0, opts.sigma)?))
}

/// Builds observations and prior for which `u = 0` is a critical point of
/// Morse index at least `q`, doubling the data magnitude until the assembled
/// Hessian confirms it.
pub fn construct_saddle(model: &ModelSpec, opts: &SaddleOptions) -> Result<SaddleInstance> {
    let r0 = (model.r)(0.0);
    let dr0 = (model.dr)(0.0);
    let d2r0 = (model.d2r)(0.0);
    if r0.abs() > 1e-12 || dr0.abs() > 1e-12 || d2r0.abs() < 1e-6 {
        return Err(Error::Hypotheses(format!(
            "need r(0) = r'(0) = 0 and r''(0) != 0, got {r0:e}, {dr0:e}, {d2r0:e}"
        )));
    }
    if opts.q == 0 {
        return Err(Error::Hypotheses("Morse index target must be at least 1".into()));
    }
    let modes = opts.hessian_modes.max(2 * opts.q);
    if modes > opts.grid / 2 {
        return Err(Error::TooManyModes {
            requested: modes,
            max: opts.grid / 2,
        });
    }
    let t_end = *opts
        .times
        .last()
        .ok_or_else(|| Error::Hypotheses("need at least one observation time".into()))?;
    let mesh = TimeMesh::new(&opts.times, t_end, opts.dt_max)?;
    let threshold = saddle_threshold(opts.q, &opts.times, opts.sigma, d2r0);
    if !threshold.is_finite() {
        return Err(Error::NonFiniteConstant("data magnitude threshold".into()));
    }
    let sign = d2r0.signum();
    let validate = opts.magnitude.is_none();
    let mut mag = opts.magnitude.unwrap_or(threshold);
    let mut doublings = 0;
    loop {
        let z = sign * mag;
        let (obs, prior) = saddle_at(model, opts, &mesh, z)?;
        let problem = Problem::new(model.clone(), obs.clone(), prior.clone(), mesh.clone())?;
        let hessian = assemble_hessian(&problem, &GridFn::zeros(opts.grid), modes)?;
        info!(
            "saddle q={}: |z| = {mag:e}, morse index {}",
            opts.q, hessian.morse_index
        );
        if !validate || hessian.morse_index >= opts.q || doublings >= opts.max_doublings {
            return Ok(SaddleInstance {
                obs,
                prior,
                mesh,
                z,
                threshold_magnitude: threshold,
                doublings,
                hessian,
            });
        }
        mag *= 2.0;
        doublings += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_model, CustomMaps, ModelKind};
    use std::sync::Arc;

    fn custom_reaction(r: fn(f64) -> f64, dr: fn(f64) -> f64, d2r: fn(f64) -> f64) -> ModelSpec {
        let zero: ScalarMap = Arc::new(|_| 0.0);
        make_model(ModelKind::Custom(
            CustomMaps::default()
                .flux(zero.clone(), zero.clone(), zero)
                .reaction(Arc::new(r), Arc::new(dr), Arc::new(d2r)),
        ))
        .unwrap()
    }

    #[test]
    fn comparison_bound_examples() {
        let heat = make_model(ModelKind::Heat).unwrap();
        let pb = pointwise_bound(&heat, 0.7, 1.0).unwrap();
        assert_eq!(pb.b, 0.7);
        let lin = custom_reaction(|y| y, |_| 1.0, |_| 0.0);
        let pb = pointwise_bound(&lin, 1.0, 1.0).unwrap();
        assert!((pb.b - std::f64::consts::E).abs() < 1e-10);
        let c = 1.5;
        let br = make_model(ModelKind::BoundedReaction { c }).unwrap();
        let pb = pointwise_bound(&br, 2.0, 0.8).unwrap();
        assert!(pb.b <= 2.0 + c * 0.8);
        let quad = custom_reaction(|y| y * y, |y| 2.0 * y, |_| 2.0);
        assert!(matches!(
            pointwise_bound(&quad, 1.0, 2.0),
            Err(Error::OdeBlowUp { .. })
        ));
    }

    #[test]
    fn exp_integral_matches_quadrature_and_degenerate_limit() {
        let (a, b, t) = (1.3, 0.4, 0.9);
        let n = 100_000;
        let h = t / n as f64;
        let quad: f64 = (0..n)
            .map(|k| {
                let s = (k as f64 + 0.5) * h;
                (a * s + b * (t - s)).exp() * h
            })
            .sum();
        assert!((exp_integral(a, b, t) - quad).abs() < 1e-8);
        assert!((exp_integral(0.5, 0.5, 2.0) - 2.0 * 1f64.exp()).abs() < 1e-12);
    }

    fn base_inputs() -> CertificateInputs {
        CertificateInputs {
            a_bound: 1.0,
            t_n: 0.1,
            n_obs: 2,
            sigma: 1.0,
            data_bound: 1.0,
            h_norm: 0.7,
            hr_norm: 0.7,
        }
    }

    #[test]
    fn linear_model_always_passes() {
        let m = make_model(ModelKind::Linear {
            advection: 1.0,
            reaction: 2.0,
        })
        .unwrap();
        for sigma in [0.1, 10.0, 1e4] {
            let rep = certificate_from_inputs(&m, &CertificateInputs { sigma, ..base_inputs() }).unwrap();
            assert_eq!(rep.lhs, 0.0);
            assert!(rep.passes);
        }
    }

    #[test]
    fn lhs_monotone_in_horizon_and_data() {
        let m = make_model(ModelKind::Burgers).unwrap();
        let mut prev = 0.0;
        for t_n in [0.01, 0.05, 0.1, 0.5, 1.0] {
            let rep = certificate_from_inputs(&m, &CertificateInputs { t_n, ..base_inputs() }).unwrap();
            assert!(rep.lhs >= prev);
            prev = rep.lhs;
        }
        let mut prev = 0.0;
        for data_bound in [0.0, 0.5, 1.0, 4.0] {
            let rep =
                certificate_from_inputs(&m, &CertificateInputs { data_bound, ..base_inputs() }).unwrap();
            assert!(rep.lhs >= prev);
            prev = rep.lhs;
        }
    }

    #[test]
    fn zero_data_saddle_is_convex() {
        let m = make_model(ModelKind::BoundedReaction { c: 1.0 }).unwrap();
        let opts = SaddleOptions {
            q: 2,
            grid: 31,
            dt_max: 1e-3,
            magnitude: Some(0.0),
            ..Default::default()
        };
        let inst = construct_saddle(&m, &opts).unwrap();
        assert_eq!(inst.hessian.morse_index, 0);
        assert_eq!(inst.prior.u0.sup_norm(), 0.0);
        assert!(inst.hessian.eigenvalues[0] > 0.0);
    }

    #[test]
    fn saddle_rejects_bad_reaction() {
        let burgers = make_model(ModelKind::Burgers).unwrap();
        assert!(matches!(
            construct_saddle(&burgers, &SaddleOptions::default()),
            Err(Error::Hypotheses(_))
        ));
    }
}
