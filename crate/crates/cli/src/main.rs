use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fourdvar::config::{Command, ExperimentConfig};
use fourdvar::experiment;
use log::error;

#[derive(Parser)]
#[command(name = "fourdvar", version, about = "Variational data assimilation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Option<Sub>,

    /// Experiment config (TOML). The built-in heat twin is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, env = "FOURDVAR_OUT_DIR")]
    out: Option<PathBuf>,

    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for sweeps and multistart.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Integrate the forward model and write the trajectory.
    Forward,
    /// Minimize the cost and catalogue critical points from many starts.
    Assimilate,
    /// Sweep the convexity certificate over prior scales and horizons.
    ScanUniqueness,
    /// Build an instance whose zero state is a high-index saddle.
    ConstructSaddle,
    /// Run the preconditioned Crank-Nicolson sampler.
    SamplePosterior,
    /// Run the numerical self-checks.
    Verify,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Forward => Command::Forward,
            Sub::Assimilate => Command::Assimilate,
            Sub::ScanUniqueness => Command::ScanUniqueness,
            Sub::ConstructSaddle => Command::ConstructSaddle,
            Sub::SamplePosterior => Command::SamplePosterior,
            Sub::Verify => Command::Verify,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let mut cfg = match &cli.config {
        Some(path) => match ExperimentConfig::from_path(path) {
            Ok(c) => c,
            Err(e) => {
                error!("{e}");
                return ExitCode::from(2);
            }
        },
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let Some(command) = cli.command.map(Command::from).or(cfg.command) else {
        error!("no subcommand given and the config names none");
        return ExitCode::from(2);
    };
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    match experiment::run(&cfg, command, &out) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if outcome.success {
                ExitCode::SUCCESS
            } else {
                error!("{} did not meet its success criterion", command.name());
                ExitCode::from(1)
            }
        }
        Err(e) if e.is_config() => {
            error!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(1)
        }
    }
}
