//! Runs configured experiments and writes their artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::bayes::{pcn_sample, KLExpansion, PcnOptions};
use crate::certificates::{
    certificate_sweep, construct_saddle, convexity_certificate, threshold_horizon,
    threshold_sigma, write_sweep_csv,
};
use crate::config::{Command, ExperimentConfig};
use crate::error::Result;
use crate::grid::GridFn;
use crate::optimize::{minimize, multistart, MultistartOptions};
use crate::verify::run_verify;

/// Files written by a run and whether the run met its own success criterion.
#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub command: Command,
    pub config_hash: String,
    pub success: bool,
    pub files: Vec<PathBuf>,
}

struct Writer<'a> {
    dir: &'a Path,
    hash: String,
    command: Command,
    seed: u64,
    files: Vec<PathBuf>,
    schema: Vec<Value>,
}

impl Writer<'_> {
    fn json<T: Serialize>(&mut self, name: &str, payload: &T) -> Result<()> {
        let path = self.dir.join(name);
        let doc = json!({
            "config_hash": self.hash,
            "command": self.command.name(),
            "seed": self.seed,
            "result": payload,
        });
        let mut w = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut w, &doc)?;
        writeln!(w)?;
        w.flush()?;
        self.files.push(path);
        Ok(())
    }

    fn csv(
        &mut self,
        name: &str,
        columns: &[(&str, &str)],
        body: impl FnOnce(&mut BufWriter<File>, &str) -> Result<()>,
    ) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        body(&mut w, &format!("config_hash={}", self.hash))?;
        w.flush()?;
        self.files.push(path);
        self.schema.push(json!({
            "file": name,
            "comment_line": "# config_hash=<hash>",
            "columns": columns
                .iter()
                .map(|(c, d)| json!({"name": c, "description": d}))
                .collect::<Vec<_>>(),
        }));
        Ok(())
    }

    fn finish(mut self, success: bool) -> Result<RunOutcome> {
        if !self.schema.is_empty() {
            let schema = std::mem::take(&mut self.schema);
            self.json("schema.json", &schema)?;
        }
        Ok(RunOutcome {
            command: self.command,
            config_hash: self.hash,
            success,
            files: self.files,
        })
    }
}

const GRID_COLUMNS: (&str, &str) = ("u_0..u_{M+1}", "nodal values at x_j = j/(M+1)");

/// Runs `command` for `cfg`, writing artifacts into `out`.
pub fn run(cfg: &ExperimentConfig, command: Command, out: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out)?;
    let mut w = Writer {
        dir: out,
        hash: cfg.hash(),
        command,
        seed: cfg.seed,
        files: Vec::new(),
        schema: Vec::new(),
    };
    info!("running {} (config {})", command.name(), w.hash);
    let success = match command {
        Command::Forward => forward(cfg, &mut w)?,
        Command::Assimilate => assimilate(cfg, &mut w)?,
        Command::ScanUniqueness => scan(cfg, &mut w)?,
        Command::ConstructSaddle => saddle(cfg, &mut w)?,
        Command::SamplePosterior => sample(cfg, &mut w)?,
        Command::Verify => {
            let report = run_verify(cfg)?;
            w.json("verify_report.json", &report)?;
            report.passed
        }
    };
    w.finish(success)
}

fn forward(cfg: &ExperimentConfig, w: &mut Writer) -> Result<bool> {
    let problem = cfg.build_problem()?;
    let u = cfg.forward.initial.build(cfg.grid.m)?;
    let traj = problem.forward(&u)?;
    w.csv(
        "trajectory.csv",
        &[("t", "time of the mesh node"), GRID_COLUMNS],
        |f, c| traj.write_csv(f, Some(c), cfg.forward.thin),
    )?;
    let cost = problem.cost(&u)?;
    w.json(
        "forward.json",
        &json!({
            "cost": cost,
            "n_steps": problem.mesh.n_steps(),
            "final_sup_norm": traj.last().sup_norm(),
        }),
    )?;
    Ok(true)
}

fn multistart_options(cfg: &ExperimentConfig) -> MultistartOptions {
    let a = &cfg.assimilate;
    MultistartOptions {
        n_starts: a.n_starts,
        sampler: a.sampler,
        seed: cfg.seed,
        method: a.method,
        optimize: a.optimize_options(),
        delta_merge: a.delta_merge,
        hessian_modes: a.hessian_modes.min(cfg.grid.m / 2),
        mode_scale: a.mode_scale,
        start_radius: None,
    }
}

fn assimilate(cfg: &ExperimentConfig, w: &mut Writer) -> Result<bool> {
    let problem = cfg.build_problem()?;
    let opts = cfg.assimilate.optimize_options();
    let result = minimize(&problem, &problem.prior.u0, cfg.assimilate.method, &opts)?;
    let cost = problem.cost(&result.minimizer)?;
    let truth_error = cfg.truth()?.map(|t| (&result.minimizer - &t).norm());
    w.json(
        "result.json",
        &json!({
            "optimize": result,
            "cost_report": cost,
            "truth_l2_error": truth_error,
        }),
    )?;
    let cat = multistart(&problem, &multistart_options(cfg))?;
    w.json("catalog.json", &cat)?;
    w.csv(
        "traces.csv",
        &[
            ("start", "index of the start point"),
            ("iteration", "iteration number"),
            ("cost", "J at the iterate"),
        ],
        |f, c| cat.write_traces_csv(f, Some(c)),
    )?;
    Ok(result.converged)
}

fn scan(cfg: &ExperimentConfig, w: &mut Writer) -> Result<bool> {
    let problem = cfg.build_problem()?;
    let s = &cfg.scan;
    let rows = certificate_sweep(&problem, &s.sigmas, &s.horizons)?;
    w.csv(
        "sweep.csv",
        &[
            ("sigma", "prior scale"),
            ("t_n", "final observation time"),
            ("lhs", "bound on the nonconvex Hessian term"),
            ("rhs", "prior curvature sigma^-2"),
            ("passes", "lhs < rhs"),
        ],
        |f, c| write_sweep_csv(&rows, f, Some(c)),
    )?;
    let base = convexity_certificate(&problem, None)?;
    let t_hat = threshold_horizon(&problem, s.horizon_range[0], s.horizon_range[1])?;
    let sigma_hat = threshold_sigma(&problem, s.sigma_range[0], s.sigma_range[1])?;
    w.json(
        "certificate.json",
        &json!({
            "certificate": base,
            "horizon_threshold": t_hat,
            "sigma_threshold": sigma_hat,
        }),
    )?;
    Ok(true)
}

fn saddle(cfg: &ExperimentConfig, w: &mut Writer) -> Result<bool> {
    let model = cfg.build_model()?;
    let inst = construct_saddle(&model, &cfg.saddle_options())?;
    let problem = inst.problem(&model)?;
    let zero = GridFn::zeros(cfg.grid.m);
    let g = problem.gradient(&zero)?;
    let grad_norm = g.grad_v.norm_v();
    let u0_norm = problem.prior.u0.norm_v();
    let ok = inst.hessian.morse_index >= cfg.saddle.q && grad_norm <= 1e-8 * u0_norm.max(1.0);
    w.json(
        "saddle.json",
        &json!({
            "instance": inst,
            "grad_norm_at_zero": grad_norm,
            "prior_mean_norm": u0_norm,
        }),
    )?;
    w.json("hessian.json", &inst.hessian)?;
    if cfg.saddle.multistart {
        let cat = multistart(&problem, &multistart_options(cfg))?;
        w.json("saddle_catalog.json", &cat)?;
    }
    Ok(ok)
}

fn sample(cfg: &ExperimentConfig, w: &mut Writer) -> Result<bool> {
    let problem = cfg.build_problem()?;
    let s = &cfg.sample;
    let kl = KLExpansion::new(problem.prior.u0.clone(), problem.sigma(), s.n_modes)?;
    let opts = PcnOptions {
        beta: s.beta,
        n_samples: s.n_samples,
        misfit_scale: s.misfit_scale,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let chain = pcn_sample(&kl, &problem, &opts, &mut rng)?;
    w.csv(
        "chain.csv",
        &[
            ("index", "sample number"),
            ("potential", "misfit potential of the sample"),
            ("accepted", "1 if the proposal at this step was accepted"),
            GRID_COLUMNS,
        ],
        |f, c| chain.write_csv(f, Some(c), s.thin),
    )?;
    let summary = chain.summary();
    let truth = cfg.truth()?;
    let mean = chain.mean();
    let truth_errors = truth.map(|t| {
        json!({
            "posterior_mean": (&mean - &t).norm(),
            "prior_mean": (&problem.prior.u0 - &t).norm(),
        })
    });
    w.json(
        "chain_summary.json",
        &json!({ "summary": summary, "truth_l2_error": truth_errors }),
    )?;
    Ok(chain.acceptance_rate > 0.0 || s.n_samples == 0)
}
