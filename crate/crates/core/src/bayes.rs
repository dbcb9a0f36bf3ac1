//! Gaussian prior sampling by Karhunen-Loeve expansion and a pCN sampler for
//! the posterior.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assimilation::{ObservationSet, Problem};
use crate::error::{Error, Result};
use crate::grid::GridFn;
use crate::model::ModelSpec;
use crate::pde::{solve_forward, TimeMesh};

/// Truncated KL expansion of `N(u0, -sigma^2 Lap^{-1})` with eigenpairs
/// `((sigma / n pi)^2, sqrt(2) sin(n pi x))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KLExpansion {
    pub mean: GridFn,
    pub sigma: f64,
    pub n_modes: usize,
    pub eigenvalues: Vec<f64>,
    pub modes: Vec<GridFn>,
}

impl KLExpansion {
    /// `n_modes` must lie in `1..=M`; `None` picks `max(M/2, 1)`.
    pub fn new(mean: GridFn, sigma: f64, n_modes: Option<usize>) -> Result<Self> {
        let m = mean.interior_len();
        let n_modes = n_modes.unwrap_or((m / 2).max(1));
        if n_modes == 0 || n_modes > m {
            return Err(Error::InvalidPrior(format!(
                "KL truncation {n_modes} outside 1..={m}"
            )));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidPrior(format!("sigma must be >= 0, got {sigma}")));
        }
        let eigenvalues = (1..=n_modes)
            .map(|n| (sigma / (n as f64 * std::f64::consts::PI)).powi(2))
            .collect();
        let modes = (1..=n_modes)
            .map(|n| GridFn::sine_mode(m, n).scale(std::f64::consts::SQRT_2))
            .collect();
        Ok(KLExpansion {
            mean,
            sigma,
            n_modes,
            eigenvalues,
            modes,
        })
    }

    /// Draws `u - u0`.
    pub fn sample_perturbation<R: Rng + ?Sized>(&self, rng: &mut R) -> GridFn {
        let mut out = GridFn::zeros(self.mean.interior_len());
        for (g, phi) in self.eigenvalues.iter().zip(&self.modes) {
            let xi: f64 = rng.sample(StandardNormal);
            out.add_scaled(g.sqrt() * xi, phi);
        }
        out
    }

    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> GridFn {
        if self.sigma == 0.0 {
            return self.mean.clone();
        }
        &self.mean + &self.sample_perturbation(rng)
    }

    /// `<u - u0, phi_n>` for each retained mode.
    pub fn coefficients(&self, u: &GridFn) -> Vec<f64> {
        let d = u - &self.mean;
        self.modes.iter().map(|phi| d.dot(phi)).collect()
    }
}

pub fn sample_prior<R: Rng + ?Sized>(kl: &KLExpansion, rng: &mut R) -> GridFn {
    kl.sample_prior(rng)
}

/// `-sum_i |R^{-1/2}(H y(t_i) - z_i)|^2`.
pub fn log_density_ratio(
    u: &GridFn,
    obs: &ObservationSet,
    m: &ModelSpec,
    mesh: &TimeMesh,
) -> Result<f64> {
    let y = solve_forward(m, u, mesh)?;
    let mut s = 0.0;
    for (i, &t) in obs.times().iter().enumerate() {
        let k = mesh.node_index(t).ok_or(Error::ObservationOffMesh { time: t })?;
        s += obs.weighted_sq(&obs.residual(&y.states[k], i));
    }
    Ok(-s)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PcnOptions {
    pub beta: f64,
    pub n_samples: usize,
    /// Potential is `misfit_scale * sum_i |R^{-1/2}(H y(t_i) - z_i)|^2`.
    pub misfit_scale: f64,
}

impl Default for PcnOptions {
    fn default() -> Self {
        PcnOptions {
            beta: 0.2,
            n_samples: 1000,
            misfit_scale: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Chain {
    pub samples: Vec<GridFn>,
    pub log_potentials: Vec<f64>,
    pub accepted: Vec<bool>,
    pub acceptance_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSummary {
    pub n_samples: usize,
    pub acceptance_rate: f64,
    pub mean: Vec<f64>,
    pub pointwise_variance: Vec<f64>,
    pub mean_potential: f64,
}

impl Chain {
    pub fn mean(&self) -> GridFn {
        let n = self.samples.len().max(1) as f64;
        let m = self.samples.first().map_or(0, |s| s.interior_len());
        self.samples
            .iter()
            .fold(GridFn::zeros(m), |acc, s| acc.axpy(1.0 / n, s))
    }

    pub fn summary(&self) -> ChainSummary {
        let mean = self.mean();
        let n = self.samples.len();
        let mut var = vec![0.0; mean.values().len()];
        for s in &self.samples {
            for (v, (a, b)) in var.iter_mut().zip(s.values().iter().zip(mean.values())) {
                *v += (a - b) * (a - b);
            }
        }
        let denom = n.saturating_sub(1).max(1) as f64;
        var.iter_mut().for_each(|v| *v /= denom);
        ChainSummary {
            n_samples: n,
            acceptance_rate: self.acceptance_rate,
            mean: mean.values().to_vec(),
            pointwise_variance: var,
            mean_potential: self.log_potentials.iter().sum::<f64>() / n.max(1) as f64,
        }
    }

    /// One row per kept sample: `index,potential,accepted,u_0..u_{M+1}`.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>, thin: usize) -> Result<()> {
        let thin = thin.max(1);
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        let width = self.samples.first().map_or(0, |s| s.values().len());
        write!(w, "index,potential,accepted")?;
        for j in 0..width {
            write!(w, ",u_{j}")?;
        }
        writeln!(w)?;
        for (k, s) in self.samples.iter().enumerate().step_by(thin) {
            write!(w, "{k},{:e},{}", self.log_potentials[k], self.accepted[k] as u8)?;
            for v in s.values() {
                write!(w, ",{v:e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn potential(problem: &Problem, u: &GridFn, scale: f64) -> f64 {
    match problem.forward(u) {
        Ok(y) => scale * problem.misfit_sum(&y),
        Err(_) => f64::INFINITY,
    }
}

/// Preconditioned Crank-Nicolson chain started at the prior mean. Proposals
/// whose forward solve fails are rejected.
pub fn pcn_sample<R: Rng + ?Sized>(
    kl: &KLExpansion,
    problem: &Problem,
    opts: &PcnOptions,
    rng: &mut R,
) -> Result<Chain> {
    let beta = opts.beta;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("pCN step must lie in [0, 1], got {beta}")));
    }
    if !kl.mean.same_grid(&problem.prior.u0) {
        return Err(Error::MeshMismatch("KL expansion and problem grids differ".into()));
    }
    let shrink = (1.0 - beta * beta).sqrt();
    let mut u = kl.mean.clone();
    let mut phi = potential(problem, &u, opts.misfit_scale);
    if !phi.is_finite() {
        return Err(Error::NonFiniteCost { iteration: 0 });
    }
    let mut samples = Vec::with_capacity(opts.n_samples);
    let mut log_potentials = Vec::with_capacity(opts.n_samples);
    let mut accepted = Vec::with_capacity(opts.n_samples);
    for _ in 0..opts.n_samples {
        let ok = if beta == 0.0 {
            true
        } else {
            let xi = kl.sample_perturbation(rng);
            let prop = kl.mean.axpy(shrink, &(&u - &kl.mean)).axpy(beta, &xi);
            let phi_new = potential(problem, &prop, opts.misfit_scale);
            let log_a = phi - phi_new;
            let take = phi_new.is_finite() && (log_a >= 0.0 || rng.random::<f64>().ln() < log_a);
            if take {
                u = prop;
                phi = phi_new;
            }
            take
        };
        samples.push(u.clone());
        log_potentials.push(phi);
        accepted.push(ok);
    }
    let acceptance_rate = if accepted.is_empty() {
        1.0
    } else {
        accepted.iter().filter(|&&a| a).count() as f64 / accepted.len() as f64
    };
    Ok(Chain {
        samples,
        log_potentials,
        accepted,
        acceptance_rate,
    })
}
