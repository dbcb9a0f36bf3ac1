//! Forward, tangent-linear, second-variation and adjoint solvers.
//!
//! One forward step maps `y^n` to `y^{n+1}` through
//!
//! ```text
//! (I - dt/2 Lap) y^{n+1} = (I + dt/2 Lap) y^n + dt N(y^n),
//! N(y)_j = -(f(y_{j+1}) - f(y_{j-1})) / 2dx + r(y_j)
//! ```
//!
//! The tangent step is the exact derivative of that map, the second-variation
//! step its exact second derivative, and the adjoint step the exact transpose
//! of the tangent step. Gradients computed from the adjoint therefore agree
//! with the discrete cost to rounding error.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::assimilation::ObservationSet;
use crate::error::{Error, Result};
use crate::grid::{GridFn, Tridiagonal};
use crate::model::ModelSpec;

/// Time nodes from 0 to `t_end`, with every observation time landing on a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeMesh {
    nodes: Vec<f64>,
    dt_max: f64,
    obs_indices: Vec<usize>,
}

impl TimeMesh {
    /// Subdivides each interval between consecutive observation times (and the
    /// tail up to `t_end`) uniformly into the fewest steps not exceeding `dt_max`.
    pub fn new(obs_times: &[f64], t_end: f64, dt_max: f64) -> Result<Self> {
        if !(dt_max > 0.0 && dt_max.is_finite()) {
            return Err(Error::InvalidMesh(format!("dt_max = {dt_max}")));
        }
        if obs_times.windows(2).any(|w| w[1] <= w[0]) || obs_times.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::InvalidMesh(
                "observation times must be positive and strictly increasing".into(),
            ));
        }
        let last_obs = obs_times.last().copied().unwrap_or(0.0);
        if !(t_end > 0.0 && t_end.is_finite()) || t_end < last_obs {
            return Err(Error::InvalidMesh(format!(
                "t_end = {t_end} must be positive and >= last observation time {last_obs}"
            )));
        }
        let mut breaks: Vec<f64> = obs_times.to_vec();
        if t_end > last_obs {
            breaks.push(t_end);
        }
        let mut nodes = vec![0.0];
        let mut obs_indices = Vec::with_capacity(obs_times.len());
        let mut a = 0.0;
        for (k, &b) in breaks.iter().enumerate() {
            let len = b - a;
            let n = ((len / dt_max) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
            let h = len / n as f64;
            for s in 1..n {
                nodes.push(a + s as f64 * h);
            }
            nodes.push(b);
            if k < obs_times.len() {
                obs_indices.push(nodes.len() - 1);
            }
            a = b;
        }
        Ok(TimeMesh {
            nodes,
            dt_max,
            obs_indices,
        })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn n_steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn dt(&self, step: usize) -> f64 {
        self.nodes[step + 1] - self.nodes[step]
    }

    pub fn dt_max(&self) -> f64 {
        self.dt_max
    }

    pub fn t_end(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// Node index of each observation time, in order.
    pub fn obs_indices(&self) -> &[usize] {
        &self.obs_indices
    }

    /// Exact node lookup.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        self.nodes.binary_search_by(|x| x.total_cmp(&t)).ok()
    }
}

/// Largest step allowed by the advective CFL estimate `dt <= dx / (max|f'| + 1)`,
/// with `max|f'|` sampled on `[-bound, bound]`.
pub fn cfl_dt(m: &ModelSpec, dx: f64, bound: f64) -> f64 {
    let samples = 257;
    let fmax = (0..samples)
        .map(|k| {
            let y = -bound + 2.0 * bound * k as f64 / (samples - 1) as f64;
            (m.df)(y).abs()
        })
        .fold(0.0, f64::max);
    dx / (fmax + 1.0)
}

/// Default step: `t_end / 1000`, capped by [`cfl_dt`].
pub fn default_dt_max(m: &ModelSpec, t_end: f64, dx: f64, bound: f64) -> f64 {
    (t_end / 1000.0).min(cfl_dt(m, dx, bound))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<GridFn>,
    pub mesh: TimeMesh,
}

impl Trajectory {
    pub fn initial(&self) -> &GridFn {
        &self.states[0]
    }

    pub fn last(&self) -> &GridFn {
        self.states.last().unwrap()
    }

    pub fn at_node(&self, n: usize) -> &GridFn {
        &self.states[n]
    }

    pub fn interior_len(&self) -> usize {
        self.states[0].interior_len()
    }

    /// Writes one row per retained node: `t, u_0, ..., u_{M+1}`.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>, thin: usize) -> Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        let n = self.states[0].values().len();
        let mut header = String::from("t");
        for j in 0..n {
            header.push_str(&format!(",u_{j}"));
        }
        writeln!(w, "{header}")?;
        let thin = thin.max(1);
        let last = self.states.len() - 1;
        for (k, (t, s)) in self.mesh.nodes().iter().zip(&self.states).enumerate() {
            if k % thin != 0 && k != last {
                continue;
            }
            let mut line = format!("{t:.17e}");
            for v in s.values() {
                line.push_str(&format!(",{v:.17e}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Adjoint states with both one-sided values at every node.
///
/// `right[n]` is `p(t_n^+)` and `left[n]` is `p(t_n^-)`; they differ only at
/// observation nodes, where `right - left` is the prescribed jump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdjointTrajectory {
    pub left: Vec<GridFn>,
    pub right: Vec<GridFn>,
    /// `(I - dt_n/2 Lap)^{-1} p(t_{n+1}^-)` for each step `n`; the adjoint
    /// quantity that pairs with the explicit terms of step `n`.
    pub implicit: Vec<GridFn>,
    pub mesh: TimeMesh,
}

impl AdjointTrajectory {
    /// `p(0)`.
    pub fn initial(&self) -> &GridFn {
        &self.left[0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Sup-norm above which the forward solve reports blow-up.
    pub blowup_ceiling: f64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            blowup_ceiling: 1e12,
        }
    }
}

struct StepOp {
    dt: f64,
    implicit: Tridiagonal,
    b_diag: f64,
    b_off: f64,
}

/// Per-mesh operators: one implicit factorization per distinct step size.
struct Stepper {
    inv_2dx: f64,
    ops: Vec<StepOp>,
    op_of_step: Vec<usize>,
}

impl Stepper {
    fn new(mesh: &TimeMesh, m: usize) -> Self {
        let dx = 1.0 / (m + 1) as f64;
        let mu = 1.0 / (dx * dx);
        let mut ops: Vec<StepOp> = Vec::new();
        let mut seen: HashMap<u64, usize> = HashMap::new();
        let mut op_of_step = Vec::with_capacity(mesh.n_steps());
        for n in 0..mesh.n_steps() {
            let dt = mesh.dt(n);
            let idx = *seen.entry(dt.to_bits()).or_insert_with(|| {
                let half = 0.5 * dt * mu;
                ops.push(StepOp {
                    dt,
                    implicit: Tridiagonal::constant(m, -half, 1.0 + 2.0 * half, -half),
                    b_diag: 1.0 - 2.0 * half,
                    b_off: half,
                });
                ops.len() - 1
            });
            op_of_step.push(idx);
        }
        Stepper {
            inv_2dx: 0.5 / dx,
            ops,
            op_of_step,
        }
    }

    fn op(&self, step: usize) -> &StepOp {
        &self.ops[self.op_of_step[step]]
    }

    /// Interior values of `(I + dt/2 Lap) x`.
    fn explicit_diffusion(op: &StepOp, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        for j in 1..n - 1 {
            out[j - 1] = op.b_diag * x[j] + op.b_off * (x[j - 1] + x[j + 1]);
        }
    }

    fn forward_step(&self, m: &ModelSpec, step: usize, y: &GridFn) -> GridFn {
        let op = self.op(step);
        let v = y.values();
        let n = v.len();
        let fy: Vec<f64> = v.iter().map(|&s| (m.f)(s)).collect();
        let mut rhs = vec![0.0; n - 2];
        Self::explicit_diffusion(op, v, &mut rhs);
        for j in 1..n - 1 {
            let adv = -(fy[j + 1] - fy[j - 1]) * self.inv_2dx;
            rhs[j - 1] += op.dt * (adv + (m.r)(v[j]));
        }
        let mut out = GridFn::zeros(n - 2);
        op.implicit.solve_into(&rhs, out.interior_mut());
        out
    }

    /// Tangent step; `source` adds `dt * source` to the right-hand side.
    fn linear_step(
        &self,
        step: usize,
        a: &[f64],
        b: &[f64],
        x: &GridFn,
        source: Option<&[f64]>,
    ) -> GridFn {
        let op = self.op(step);
        let v = x.values();
        let n = v.len();
        let mut rhs = vec![0.0; n - 2];
        Self::explicit_diffusion(op, v, &mut rhs);
        for j in 1..n - 1 {
            let adv = -(a[j + 1] * v[j + 1] - a[j - 1] * v[j - 1]) * self.inv_2dx;
            let mut s = adv + b[j] * v[j];
            if let Some(src) = source {
                s += src[j];
            }
            rhs[j - 1] += op.dt * s;
        }
        let mut out = GridFn::zeros(n - 2);
        op.implicit.solve_into(&rhs, out.interior_mut());
        out
    }

    /// Transpose of [`Stepper::linear_step`]: returns `(p^n, w)` where
    /// `w = (I - dt/2 Lap)^{-1} p^{n+1}`.
    fn adjoint_step(&self, step: usize, a: &[f64], b: &[f64], p_next: &GridFn) -> (GridFn, GridFn) {
        let op = self.op(step);
        let mm = p_next.interior_len();
        let mut w = GridFn::zeros(mm);
        op.implicit.solve_into(p_next.interior(), w.interior_mut());
        let wv = w.values();
        let n = wv.len();
        let mut out = GridFn::zeros(mm);
        {
            let o = out.interior_mut();
            for j in 1..n - 1 {
                let diff = op.b_diag * wv[j] + op.b_off * (wv[j - 1] + wv[j + 1]);
                let adv = a[j] * (wv[j + 1] - wv[j - 1]) * self.inv_2dx;
                o[j - 1] = diff + op.dt * (adv + b[j] * wv[j]);
            }
        }
        (out, w)
    }
}

fn coeffs(g: &crate::model::ScalarMap, y: &GridFn) -> Vec<f64> {
    y.values().iter().map(|&s| g(s)).collect()
}

fn check_state(s: &GridFn, t: f64, ceiling: f64) -> Result<()> {
    if !s.is_finite() {
        return Err(Error::NonFinite { time: t });
    }
    let sup = s.sup_norm();
    if sup > ceiling {
        return Err(Error::BlowUp {
            time: t,
            sup_norm: sup,
            ceiling,
        });
    }
    Ok(())
}

pub fn solve_forward(m: &ModelSpec, u: &GridFn, mesh: &TimeMesh) -> Result<Trajectory> {
    solve_forward_with(m, u, mesh, &ForwardOptions::default())
}

pub fn solve_forward_with(
    m: &ModelSpec,
    u: &GridFn,
    mesh: &TimeMesh,
    opts: &ForwardOptions,
) -> Result<Trajectory> {
    check_state(u, 0.0, opts.blowup_ceiling)?;
    let stepper = Stepper::new(mesh, u.interior_len());
    let mut states = Vec::with_capacity(mesh.nodes().len());
    states.push(u.clone());
    for n in 0..mesh.n_steps() {
        let next = stepper.forward_step(m, n, &states[n]);
        check_state(&next, mesh.nodes()[n + 1], opts.blowup_ceiling)?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        mesh: mesh.clone(),
    })
}

fn check_consistent(y: &Trajectory, x: &GridFn) -> Result<()> {
    if y.states.len() != y.mesh.nodes().len() {
        return Err(Error::MeshMismatch(
            "trajectory length differs from mesh".into(),
        ));
    }
    if !y.states[0].same_grid(x) {
        return Err(Error::MeshMismatch(format!(
            "grid of {} interior nodes vs {}",
            y.interior_len(),
            x.interior_len()
        )));
    }
    Ok(())
}

/// Tangent-linear trajectory `eta = Dy(u) v` about the forward trajectory `y`.
pub fn solve_tangent(m: &ModelSpec, y: &Trajectory, v: &GridFn) -> Result<Trajectory> {
    check_consistent(y, v)?;
    let mesh = &y.mesh;
    let stepper = Stepper::new(mesh, v.interior_len());
    let mut states = Vec::with_capacity(mesh.nodes().len());
    states.push(v.clone());
    for n in 0..mesh.n_steps() {
        let a = coeffs(&m.df, &y.states[n]);
        let b = coeffs(&m.dr, &y.states[n]);
        let next = stepper.linear_step(n, &a, &b, &states[n], None);
        states.push(next);
    }
    Ok(Trajectory {
        states,
        mesh: mesh.clone(),
    })
}

/// `N''(y)(eta, xi)_j = -(f''(y)eta xi)_{j+1} - (f''(y) eta xi)_{j-1}) / 2dx + r''(y_j) eta_j xi_j`.
pub(crate) fn second_derivative_source(
    m: &ModelSpec,
    y: &GridFn,
    eta: &GridFn,
    xi: &GridFn,
) -> Vec<f64> {
    let yv = y.values();
    let e = eta.values();
    let x = xi.values();
    let n = yv.len();
    let inv_2dx = 0.5 / y.dx();
    let w: Vec<f64> = (0..n).map(|j| (m.d2f)(yv[j]) * e[j] * x[j]).collect();
    let mut out = vec![0.0; n];
    for j in 1..n - 1 {
        out[j] = -(w[j + 1] - w[j - 1]) * inv_2dx + (m.d2r)(yv[j]) * e[j] * x[j];
    }
    out
}

/// Second variation `omega = D^2 y(u)(v, v)` given the tangent trajectory `eta`.
pub fn solve_second_variation(
    m: &ModelSpec,
    y: &Trajectory,
    eta: &Trajectory,
) -> Result<Trajectory> {
    check_consistent(y, &eta.states[0])?;
    if eta.mesh != y.mesh {
        return Err(Error::MeshMismatch(
            "tangent and forward trajectories use different meshes".into(),
        ));
    }
    let mesh = &y.mesh;
    let mm = y.interior_len();
    let stepper = Stepper::new(mesh, mm);
    let mut states = Vec::with_capacity(mesh.nodes().len());
    states.push(GridFn::zeros(mm));
    for n in 0..mesh.n_steps() {
        let a = coeffs(&m.df, &y.states[n]);
        let b = coeffs(&m.dr, &y.states[n]);
        let src = second_derivative_source(m, &y.states[n], &eta.states[n], &eta.states[n]);
        let next = stepper.linear_step(n, &a, &b, &states[n], Some(&src));
        states.push(next);
    }
    Ok(Trajectory {
        states,
        mesh: mesh.clone(),
    })
}

/// Backward sweep with arbitrary jumps `p(t_k^+) - p(t_k^-) = g` at nodes `k`.
pub fn solve_adjoint_with_jumps(
    m: &ModelSpec,
    y: &Trajectory,
    jumps: &[(usize, GridFn)],
) -> Result<AdjointTrajectory> {
    let mesh = &y.mesh;
    let mm = y.interior_len();
    let n_nodes = mesh.nodes().len();
    let mut jump_at: Vec<Option<&GridFn>> = vec![None; n_nodes];
    for (k, g) in jumps {
        if *k >= n_nodes || *k == 0 {
            return Err(Error::MeshMismatch(format!("jump at invalid node {k}")));
        }
        if !g.same_grid(&y.states[0]) {
            return Err(Error::MeshMismatch("jump lives on a different grid".into()));
        }
        jump_at[*k] = Some(g);
    }
    let stepper = Stepper::new(mesh, mm);
    let mut left = vec![GridFn::zeros(mm); n_nodes];
    let mut right = vec![GridFn::zeros(mm); n_nodes];
    let mut implicit = vec![GridFn::zeros(mm); mesh.n_steps()];
    let last = n_nodes - 1;
    left[last] = match jump_at[last] {
        Some(g) => g.scale(-1.0),
        None => GridFn::zeros(mm),
    };
    for n in (0..mesh.n_steps()).rev() {
        let a = coeffs(&m.df, &y.states[n]);
        let b = coeffs(&m.dr, &y.states[n]);
        let (p, w) = stepper.adjoint_step(n, &a, &b, &left[n + 1]);
        implicit[n] = w;
        left[n] = match jump_at[n] {
            Some(g) => p.axpy(-1.0, g),
            None => p.clone(),
        };
        right[n] = p;
    }
    Ok(AdjointTrajectory {
        left,
        right,
        implicit,
        mesh: mesh.clone(),
    })
}

/// Adjoint trajectory with jumps `H* R^{-1}(H y(t_i) - z_i)` and `p(t_N^+) = 0`.
pub fn solve_adjoint(
    m: &ModelSpec,
    y: &Trajectory,
    obs: &ObservationSet,
) -> Result<AdjointTrajectory> {
    let jumps = observation_jumps(y, obs)?;
    solve_adjoint_with_jumps(m, y, &jumps)
}

pub(crate) fn observation_jumps(
    y: &Trajectory,
    obs: &ObservationSet,
) -> Result<Vec<(usize, GridFn)>> {
    obs.times()
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let k = y
                .mesh
                .node_index(t)
                .ok_or(Error::ObservationOffMesh { time: t })?;
            Ok((k, obs.jump(&y.states[k], i)))
        })
        .collect()
}
