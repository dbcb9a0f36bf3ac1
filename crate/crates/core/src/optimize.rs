//! Descent in the V metric, fixed-point iteration of the Euler-Lagrange map,
//! and multi-start cataloguing of critical points.

use std::collections::VecDeque;
use std::io::Write;

use log::{debug, trace, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assimilation::{assemble_hessian, Gradients, Problem};
use crate::bayes::KLExpansion;
use crate::error::{Error, Result};
use crate::grid::GridFn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SobolevGd,
    Lbfgs,
    FixedPoint,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeOptions {
    /// Absolute tolerance on `||grad_V J||_V`.
    pub tol: f64,
    /// Relative tolerance against the starting gradient norm; 0 disables it.
    pub rel_tol: f64,
    pub max_iters: usize,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub lbfgs_memory: usize,
    /// Damping for the fixed-point iteration.
    pub damping: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            tol: 1e-8,
            rel_tol: 0.0,
            max_iters: 500,
            armijo_c: 1e-4,
            backtrack: 0.5,
            max_backtracks: 60,
            lbfgs_memory: 10,
            damping: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub minimizer: GridFn,
    pub cost: f64,
    pub grad_norm_v: f64,
    pub iterations: usize,
    pub converged: bool,
    pub path_costs: Vec<f64>,
    pub method: Method,
    /// Tolerance that `converged` was judged against.
    pub tolerance: f64,
    /// Steps accepted by the approximate Armijo test at roundoff level.
    pub stalled_steps: usize,
}

struct Iterate {
    u: GridFn,
    g: Gradients,
}

impl Iterate {
    fn at(problem: &Problem, u: GridFn) -> Result<Self> {
        let g = problem.gradient(&u)?;
        Ok(Iterate { u, g })
    }

    fn cost(&self) -> f64 {
        self.g.cost.total
    }
}

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::BlowUp { .. } | Error::NonFinite { .. })
}

const WOLFE_CURVATURE: f64 = 0.9;

enum LineSearch {
    Accepted(Iterate, f64),
    Stalled(Iterate),
    Failed,
}

/// Relative size of the roundoff carried by a computed cost.
pub const COST_FLOOR_REL: f64 = 1e-11;

/// Cost changes below this are indistinguishable from roundoff in `J`.
pub fn cost_floor(j: f64) -> f64 {
    COST_FLOOR_REL * j.abs().max(1.0)
}

/// Line search along `d` from `cur`, with `slope = <grad, d>_V < 0`.
///
/// Accepts on sufficient decrease when `J` resolves it. Near a critical point
/// that test drowns in roundoff, so a trial within the cost floor of `J(cur)`
/// is also accepted under the approximate Wolfe conditions
/// `0.9 phi'(0) <= phi'(s) <= (1 - 2c) |phi'(0)|`. Short trials grow the
/// step, long ones shrink it, bisecting once both ends are known.
fn armijo(
    problem: &Problem,
    cur: &Iterate,
    d: &GridFn,
    slope: f64,
    s0: f64,
    opts: &OptimizeOptions,
) -> Result<LineSearch> {
    let j0 = cur.cost();
    let floor = cost_floor(j0);
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    let mut s = s0;
    for _ in 0..=opts.max_backtracks {
        let trial = cur.u.axpy(s, d);
        let mut too_short = false;
        match Iterate::at(problem, trial) {
            Ok(next) => {
                let j = next.cost();
                if j.is_finite() {
                    if j - j0 <= opts.armijo_c * s * slope {
                        return Ok(LineSearch::Accepted(next, s));
                    }
                    if j - j0 <= floor {
                        let end_slope = next.g.grad_v.dot_v(d);
                        if end_slope < WOLFE_CURVATURE * slope {
                            too_short = true;
                        } else if end_slope <= (1.0 - 2.0 * opts.armijo_c) * slope.abs() {
                            return Ok(LineSearch::Stalled(next));
                        }
                    }
                }
            }
            Err(e) if recoverable(&e) => {}
            Err(e) => return Err(e),
        }
        if too_short {
            lo = s;
            s = if hi.is_finite() { 0.5 * (lo + hi) } else { s / opts.backtrack };
        } else {
            hi = s;
            s = if lo > 0.0 { 0.5 * (lo + hi) } else { s * opts.backtrack };
        }
    }
    Ok(LineSearch::Failed)
}

struct History {
    pairs: VecDeque<(GridFn, GridFn, f64)>,
    memory: usize,
}

impl History {
    fn push(&mut self, s: GridFn, y: GridFn) {
        let sy = s.dot_v(&y);
        if sy > 1e-14 * s.norm_v() * y.norm_v() {
            if self.pairs.len() == self.memory {
                self.pairs.pop_front();
            }
            self.pairs.push_back((s, y, 1.0 / sy));
        }
    }

    /// Two-loop recursion in the V inner product; returns `-H g`.
    fn direction(&self, g: &GridFn, sigma2: f64) -> GridFn {
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * s.dot_v(&q);
            q.add_scaled(-a, y);
            alphas.push(a);
        }
        let gamma = match self.pairs.back() {
            Some((s, y, _)) => s.dot_v(y) / y.dot_v(y),
            None => sigma2,
        };
        let mut r = q.scale(gamma);
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot_v(&r);
            r.add_scaled(a - b, s);
        }
        r.scale(-1.0)
    }
}

pub fn minimize(
    problem: &Problem,
    start: &GridFn,
    method: Method,
    opts: &OptimizeOptions,
) -> Result<OptimizeResult> {
    let mut cur = Iterate::at(problem, start.clone())?;
    if !cur.cost().is_finite() {
        return Err(Error::NonFiniteCost { iteration: 0 });
    }
    let sigma2 = problem.sigma() * problem.sigma();
    let g0 = cur.g.grad_v.norm_v();
    let tol = opts.tol.max(opts.rel_tol * g0);
    let mut path_costs = vec![cur.cost()];
    let mut iterations = 0;
    let mut stalled_steps = 0;
    let mut step = sigma2;
    let mut hist = History {
        pairs: VecDeque::new(),
        memory: opts.lbfgs_memory.max(1),
    };

    while cur.g.grad_v.norm_v() > tol && iterations < opts.max_iters {
        let next = match method {
            Method::FixedPoint => {
                let map = problem.map_from_p0(&cur.g.p0);
                let u = cur.u.scale(1.0 - opts.damping).axpy(opts.damping, &map);
                Iterate::at(problem, u)?
            }
            Method::SobolevGd | Method::Lbfgs => {
                let g = &cur.g.grad_v;
                let (mut d, s0) = match method {
                    Method::Lbfgs => (hist.direction(g, sigma2), 1.0),
                    _ => (g.scale(-1.0), (2.0 * step).min(1e3 * sigma2)),
                };
                let mut slope = g.dot_v(&d);
                if !(slope < 0.0) {
                    hist.pairs.clear();
                    d = g.scale(-sigma2);
                    slope = g.dot_v(&d);
                }
                match armijo(problem, &cur, &d, slope, s0, opts)? {
                    LineSearch::Accepted(it, s) => {
                        step = s;
                        it
                    }
                    LineSearch::Stalled(it) => {
                        stalled_steps += 1;
                        it
                    }
                    LineSearch::Failed => {
                        return Err(Error::LineSearchFailed {
                            iteration: iterations,
                            attempts: opts.max_backtracks + 1,
                        })
                    }
                }
            }
        };
        if !next.cost().is_finite() {
            return Err(Error::NonFiniteCost {
                iteration: iterations + 1,
            });
        }
        if method == Method::Lbfgs {
            hist.push(&next.u - &cur.u, &next.g.grad_v - &cur.g.grad_v);
        }
        cur = next;
        iterations += 1;
        path_costs.push(cur.cost());
        trace!(
            "{method:?} {iterations}: J = {:.17e}, |grad| = {:e}",
            cur.cost(),
            cur.g.grad_v.norm_v()
        );
    }
    let grad_norm_v = cur.g.grad_v.norm_v();
    let converged = grad_norm_v <= tol;
    debug!(
        "{method:?}: {iterations} iterations, J = {:e}, |grad| = {grad_norm_v:e}",
        cur.cost()
    );
    Ok(OptimizeResult {
        cost: cur.cost(),
        minimizer: cur.u,
        grad_norm_v,
        iterations,
        converged,
        path_costs,
        method,
        tolerance: tol,
        stalled_steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Prior,
    ScaledModes,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MultistartOptions {
    pub n_starts: usize,
    pub sampler: Sampler,
    pub seed: u64,
    pub method: Method,
    pub optimize: OptimizeOptions,
    pub delta_merge: f64,
    /// Modes used for the smallest-eigenvalue diagnostic; 0 skips it.
    pub hessian_modes: usize,
    /// Amplitude of the largest scaled-mode start.
    pub mode_scale: f64,
    /// Starts with larger V-norm are radially shrunk onto this ball.
    pub start_radius: Option<f64>,
}

impl Default for MultistartOptions {
    fn default() -> Self {
        MultistartOptions {
            n_starts: 10,
            sampler: Sampler::Prior,
            seed: 0,
            method: Method::Lbfgs,
            optimize: OptimizeOptions::default(),
            delta_merge: 1e-4,
            hessian_modes: 4,
            mode_scale: 1.0,
            start_radius: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub point: GridFn,
    pub cost: f64,
    pub grad_norm: f64,
    pub hessian_min_eig: Option<f64>,
    pub hits: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub start: usize,
    pub start_norm_v: f64,
    pub converged: bool,
    pub iterations: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub error: Option<String>,
    pub path_costs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticalPointCatalog {
    pub points: Vec<CatalogEntry>,
    pub distinct_count: usize,
    pub delta_merge: f64,
    pub runs: Vec<RunRecord>,
}

fn prefer(a: &CatalogEntry, b: &CatalogEntry) -> bool {
    (a.grad_norm, a.cost).partial_cmp(&(b.grad_norm, b.cost)) == Some(std::cmp::Ordering::Less)
}

impl CriticalPointCatalog {
    pub fn new(delta_merge: f64) -> Self {
        CriticalPointCatalog {
            points: Vec::new(),
            distinct_count: 0,
            delta_merge,
            runs: Vec::new(),
        }
    }

    /// Adds `e` unless it lies within `delta_merge` of a stored point, in which
    /// case the better-converged of the two represents the cluster.
    pub fn insert(&mut self, e: CatalogEntry) {
        let hit = self
            .points
            .iter()
            .position(|p| (&p.point - &e.point).norm_v() < self.delta_merge);
        match hit {
            Some(i) => {
                let hits = self.points[i].hits + e.hits;
                if prefer(&e, &self.points[i]) {
                    self.points[i] = e;
                }
                self.points[i].hits = hits;
            }
            None => self.points.push(e),
        }
        self.canonicalize();
    }

    /// Union of two catalogs. Points are kept in a canonical order so that
    /// `a.merge(b)` and `b.merge(a)` describe the same set.
    pub fn merge(&self, other: &CriticalPointCatalog) -> CriticalPointCatalog {
        let mut out = CriticalPointCatalog::new(self.delta_merge.max(other.delta_merge));
        let mut all: Vec<CatalogEntry> = self.points.iter().chain(&other.points).cloned().collect();
        all.sort_by(|a, b| (a.grad_norm, a.cost).partial_cmp(&(b.grad_norm, b.cost)).unwrap());
        for e in all {
            let hit = out
                .points
                .iter()
                .position(|p| (&p.point - &e.point).norm_v() < out.delta_merge);
            match hit {
                Some(i) => out.points[i].hits = out.points[i].hits.max(e.hits),
                None => out.points.push(e),
            }
        }
        out.runs = self.runs.iter().chain(&other.runs).cloned().collect();
        out.canonicalize();
        out
    }

    fn canonicalize(&mut self) {
        self.points.sort_by(|a, b| {
            a.cost
                .total_cmp(&b.cost)
                .then_with(|| a.point.values().partial_cmp(b.point.values()).unwrap())
        });
        self.distinct_count = self.points.len();
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(|r| !r.converged)
    }

    /// `start,iteration,cost` for every run.
    pub fn write_traces_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "start,iteration,cost")?;
        for r in &self.runs {
            for (k, c) in r.path_costs.iter().enumerate() {
                writeln!(w, "{},{k},{c:e}", r.start)?;
            }
        }
        Ok(())
    }
}

fn shrink_to(u: GridFn, radius: Option<f64>) -> GridFn {
    match radius {
        Some(r) => {
            let n = u.norm_v();
            if n > r {
                u.scale(r / n)
            } else {
                u
            }
        }
        None => u,
    }
}

/// The `k`-th deterministic start: `+-scale * sin(n pi x)` cycling over `n`
/// and sign, with amplitude shrinking on later cycles.
fn scaled_mode_start(m: usize, k: usize, scale: f64) -> GridFn {
    let n_modes = (m / 2).clamp(1, 8);
    let n = (k / 2) % n_modes + 1;
    let cycle = k / (2 * n_modes);
    let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    GridFn::sine_mode(m, n).scale(sign * scale / (1 + cycle) as f64)
}

pub fn start_points(problem: &Problem, opts: &MultistartOptions) -> Result<Vec<GridFn>> {
    let m = problem.grid_size();
    let starts = match opts.sampler {
        Sampler::Prior => {
            let kl = KLExpansion::new(problem.prior.u0.clone(), problem.sigma(), None)?;
            (0..opts.n_starts)
                .map(|k| {
                    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                    rng.set_stream(k as u64);
                    kl.sample_prior(&mut rng)
                })
                .collect::<Vec<_>>()
        }
        Sampler::ScaledModes => (0..opts.n_starts)
            .map(|k| scaled_mode_start(m, k, opts.mode_scale))
            .collect(),
    };
    Ok(starts
        .into_iter()
        .map(|u| shrink_to(u, opts.start_radius))
        .collect())
}

pub fn multistart(problem: &Problem, opts: &MultistartOptions) -> Result<CriticalPointCatalog> {
    if opts.n_starts == 0 {
        return Err(Error::Config("multistart needs at least one start".into()));
    }
    let starts = start_points(problem, opts)?;
    let outcomes: Vec<(RunRecord, Option<CatalogEntry>)> = starts
        .par_iter()
        .enumerate()
        .map(|(k, u)| {
            let rec = |res: Option<&OptimizeResult>, err: Option<String>| RunRecord {
                start: k,
                start_norm_v: u.norm_v(),
                converged: res.is_some_and(|r| r.converged),
                iterations: res.map_or(0, |r| r.iterations),
                cost: res.map_or(f64::NAN, |r| r.cost),
                grad_norm: res.map_or(f64::NAN, |r| r.grad_norm_v),
                error: err,
                path_costs: res.map_or_else(Vec::new, |r| r.path_costs.clone()),
            };
            match minimize(problem, u, opts.method, &opts.optimize) {
                Ok(r) if r.converged => {
                    let eig = if opts.hessian_modes > 0 {
                        assemble_hessian(problem, &r.minimizer, opts.hessian_modes)
                            .map(|h| h.min_eigenvalue())
                            .ok()
                    } else {
                        None
                    };
                    let entry = CatalogEntry {
                        point: r.minimizer.clone(),
                        cost: r.cost,
                        grad_norm: r.grad_norm_v,
                        hessian_min_eig: eig,
                        hits: 1,
                    };
                    (rec(Some(&r), None), Some(entry))
                }
                Ok(r) => (rec(Some(&r), Some("iteration limit reached".into())), None),
                Err(e) => {
                    warn!("start {k} failed: {e}");
                    (rec(None, Some(e.to_string())), None)
                }
            }
        })
        .collect();
    let mut cat = CriticalPointCatalog::new(opts.delta_merge);
    for (rec, entry) in outcomes {
        cat.runs.push(rec);
        if let Some(e) = entry {
            cat.insert(e);
        }
    }
    Ok(cat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assimilation::{ObservationSet, PriorSpec};
    use crate::model::{make_model, ModelKind};
    use crate::pde::TimeMesh;

    fn prior_only(m: usize) -> Problem {
        let model = make_model(ModelKind::Burgers).unwrap();
        let u0 = GridFn::sine_mode(m, 1).scale(0.5);
        let prior = PriorSpec::new(u0, 0.7).unwrap();
        let mesh = TimeMesh::new(&[], 0.05, 1e-3).unwrap();
        Problem::new(model, ObservationSet::empty(m), prior, mesh).unwrap()
    }

    fn linear_twin(m: usize) -> Problem {
        let model = make_model(ModelKind::Linear {
            advection: 0.5,
            reaction: 1.0,
        })
        .unwrap();
        let times = [0.02, 0.05];
        let mesh = TimeMesh::new(&times, 0.05, 1e-3).unwrap();
        let truth = GridFn::sine_mode(m, 1);
        let y = crate::pde::solve_forward(&model, &truth, &mesh).unwrap();
        let rows = vec![GridFn::sine_mode(m, 1), GridFn::sine_mode(m, 2)];
        let tmp = ObservationSet::with_scalar_covariance(
            times.to_vec(),
            rows,
            0.1,
            vec![vec![0.0; 2]; 2],
        )
        .unwrap();
        let data = mesh.obs_indices().iter().map(|&k| tmp.observe(&y.states[k])).collect();
        let obs = tmp.with_data(data).unwrap();
        let prior = PriorSpec::new(GridFn::zeros(m), 1.0).unwrap();
        Problem::new(model, obs, prior, mesh).unwrap()
    }

    #[test]
    fn pure_prior_reaches_mean() {
        let p = prior_only(31);
        let start = GridFn::from_fn(31, |x| x * (1.0 - x) * 3.0);
        for method in [Method::SobolevGd, Method::Lbfgs, Method::FixedPoint] {
            let r = minimize(&p, &start, method, &OptimizeOptions::default()).unwrap();
            assert!(r.converged, "{method:?}");
            assert!(r.cost < 1e-20);
            assert!((&r.minimizer - &p.prior.u0).norm_v() < 1e-8);
            if method == Method::FixedPoint {
                assert_eq!(r.iterations, 1);
            }
        }
    }

    #[test]
    fn descent_paths_are_monotone() {
        let p = linear_twin(31);
        let start = GridFn::sine_mode(31, 3).scale(2.0);
        let opts = OptimizeOptions {
            max_iters: 20_000,
            ..Default::default()
        };
        for method in [Method::SobolevGd, Method::Lbfgs] {
            let r = minimize(&p, &start, method, &opts).unwrap();
            assert!(r.converged, "{method:?} {}", r.grad_norm_v);
            assert!(r.path_costs.windows(2).all(|w| w[1] <= w[0] + cost_floor(w[0])));
            let fp = p.fixed_point_map(&r.minimizer).unwrap();
            assert!((&fp - &r.minimizer).norm_v() <= p.sigma().powi(2) * r.tolerance * 1.0001);
        }
    }

    #[test]
    fn linear_multistart_finds_one_point() {
        let p = linear_twin(31);
        let opts = MultistartOptions {
            n_starts: 10,
            seed: 7,
            hessian_modes: 3,
            ..Default::default()
        };
        let cat = multistart(&p, &opts).unwrap();
        assert_eq!(cat.distinct_count, 1);
        assert_eq!(cat.points[0].hits, 10);
        assert!(cat.points[0].hessian_min_eig.unwrap() > 0.0);
        let again = multistart(&p, &opts).unwrap();
        assert_eq!(
            serde_json::to_string(&cat).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    fn entry(v: f64, n: usize) -> CatalogEntry {
        CatalogEntry {
            point: GridFn::sine_mode(15, n).scale(v),
            cost: v,
            grad_norm: 1e-9,
            hessian_min_eig: None,
            hits: 1,
        }
    }

    #[test]
    fn merge_is_symmetric_and_idempotent() {
        let mut a = CriticalPointCatalog::new(1e-4);
        a.insert(entry(1.0, 1));
        a.insert(entry(2.0, 2));
        let mut b = CriticalPointCatalog::new(1e-4);
        b.insert(entry(2.0, 2));
        b.insert(entry(3.0, 3));
        let ab = a.merge(&b);
        let ba = b.merge(&a);
        assert_eq!(ab.distinct_count, 3);
        let pts = |c: &CriticalPointCatalog| c.points.iter().map(|e| e.point.clone()).collect::<Vec<_>>();
        assert_eq!(pts(&ab), pts(&ba));
        assert_eq!(pts(&ab.merge(&ab)), pts(&ab));
    }
}
