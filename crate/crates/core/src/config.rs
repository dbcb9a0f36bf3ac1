//! TOML experiment configuration.

use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assimilation::{ObservationSet, PriorSpec, Problem};
use crate::certificates::SaddleOptions;
use crate::error::{Error, Result};
use crate::grid::GridFn;
use crate::model::{check_global_existence, ModelConfig, ModelSpec};
use crate::optimize::{Method, OptimizeOptions, Sampler};
use crate::pde::{default_dt_max, solve_forward, TimeMesh};

/// A function on the grid, described independently of the resolution.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FunctionSpec {
    #[default]
    Zero,
    /// `sum_n c_n sin(n pi x)`.
    Sines { coefficients: Vec<f64> },
    /// Interior values; the length must match the grid.
    Values { values: Vec<f64> },
}

impl FunctionSpec {
    pub fn build(&self, m: usize) -> Result<GridFn> {
        match self {
            FunctionSpec::Zero => Ok(GridFn::zeros(m)),
            FunctionSpec::Sines { coefficients } => Ok(coefficients
                .iter()
                .enumerate()
                .fold(GridFn::zeros(m), |acc, (n, c)| acc.axpy(*c, &GridFn::sine_mode(m, n + 1)))),
            FunctionSpec::Values { values } => {
                if values.len() != m {
                    return Err(Error::Config(format!(
                        "function has {} values, grid has {m} interior nodes",
                        values.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("function values must be finite".into()));
                }
                Ok(GridFn::from_interior(values))
            }
        }
    }
}

/// Rows of the observation operator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowsSpec {
    /// `h_j = sin(j pi x)`, `j = 1..=count`.
    Sines { count: usize },
    /// Averages over `count` equal subintervals of `[0, 1]`.
    LocalAverages { count: usize },
    Functions { rows: Vec<FunctionSpec> },
}

impl RowsSpec {
    pub fn build(&self, m: usize) -> Result<Vec<GridFn>> {
        match self {
            RowsSpec::Sines { count } => Ok((1..=*count).map(|n| GridFn::sine_mode(m, n)).collect()),
            RowsSpec::LocalAverages { count } => {
                let k = *count as f64;
                Ok((0..*count)
                    .map(|j| {
                        let (a, b) = (j as f64 / k, (j + 1) as f64 / k);
                        GridFn::from_fn(m, |x| if x >= a && x < b { k } else { 0.0 })
                    })
                    .collect())
            }
            RowsSpec::Functions { rows } => rows.iter().map(|r| r.build(m)).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum CovarianceSpec {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    Literal {
        values: Vec<Vec<f64>>,
    },
    /// Synthetic data from a known initial state plus Gaussian noise.
    Twin {
        truth: FunctionSpec,
        #[serde(default)]
        noise_std: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObservationsConfig {
    pub times: Vec<f64>,
    pub rows: RowsSpec,
    pub covariance: CovarianceSpec,
    pub data: DataSpec,
    /// Defaults to the largest data norm.
    #[serde(default)]
    pub data_bound: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridConfig {
    pub m: usize,
    #[serde(default)]
    pub dt_max: Option<f64>,
    /// Final time when it should exceed the last observation.
    #[serde(default)]
    pub t_end: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PriorConfig {
    pub sigma: f64,
    #[serde(default)]
    pub mean: FunctionSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ForwardConfig {
    pub initial: FunctionSpec,
    /// Keep every `thin`-th time node in the CSV.
    pub thin: usize,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        ForwardConfig {
            initial: FunctionSpec::Sines {
                coefficients: vec![1.0],
            },
            thin: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AssimilateConfig {
    pub method: Method,
    pub n_starts: usize,
    pub sampler: Sampler,
    pub tol: f64,
    pub rel_tol: f64,
    pub max_iters: usize,
    pub delta_merge: f64,
    pub hessian_modes: usize,
    pub mode_scale: f64,
    pub damping: f64,
}

impl Default for AssimilateConfig {
    fn default() -> Self {
        let o = OptimizeOptions::default();
        AssimilateConfig {
            method: Method::Lbfgs,
            n_starts: 10,
            sampler: Sampler::Prior,
            tol: o.tol,
            rel_tol: o.rel_tol,
            max_iters: o.max_iters,
            delta_merge: 1e-4,
            hessian_modes: 4,
            mode_scale: 1.0,
            damping: o.damping,
        }
    }
}

impl AssimilateConfig {
    pub fn optimize_options(&self) -> OptimizeOptions {
        OptimizeOptions {
            tol: self.tol,
            rel_tol: self.rel_tol,
            max_iters: self.max_iters,
            damping: self.damping,
            ..OptimizeOptions::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ScanConfig {
    pub sigmas: Vec<f64>,
    pub horizons: Vec<f64>,
    /// Brackets for the threshold bisections.
    pub horizon_range: [f64; 2],
    pub sigma_range: [f64; 2],
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            sigmas: vec![0.01, 0.03, 0.1, 0.3, 1.0, 3.0],
            horizons: vec![0.01, 0.03, 0.1, 0.3, 1.0],
            horizon_range: [1e-6, 10.0],
            sigma_range: [1e-6, 1e3],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SaddleConfig {
    pub q: usize,
    pub times: Vec<f64>,
    pub sigma: f64,
    /// Data magnitude; the threshold formula is used when absent.
    pub magnitude: Option<f64>,
    pub hessian_modes: usize,
    pub multistart: bool,
}

impl Default for SaddleConfig {
    fn default() -> Self {
        SaddleConfig {
            q: 3,
            times: vec![0.05, 0.1],
            sigma: 1.0,
            magnitude: None,
            hessian_modes: 0,
            multistart: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SampleConfig {
    pub beta: f64,
    pub n_samples: usize,
    pub misfit_scale: f64,
    /// KL truncation; defaults to half the grid.
    pub n_modes: Option<usize>,
    pub thin: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            beta: 0.2,
            n_samples: 2000,
            misfit_scale: 0.5,
            n_modes: None,
            thin: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct VerifyConfig {
    /// Random directions per randomized check.
    pub samples: usize,
    pub prior_draws: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            samples: 5,
            prior_draws: 2000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Forward,
    Assimilate,
    ScanUniqueness,
    ConstructSaddle,
    SamplePosterior,
    Verify,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Forward => "forward",
            Command::Assimilate => "assimilate",
            Command::ScanUniqueness => "scan-uniqueness",
            Command::ConstructSaddle => "construct-saddle",
            Command::SamplePosterior => "sample-posterior",
            Command::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub command: Option<Command>,
    pub model: ModelConfig,
    /// Skips the growth-condition screen and trusts this flag instead.
    #[serde(default)]
    pub well_posed: Option<bool>,
    pub grid: GridConfig,
    pub observations: ObservationsConfig,
    pub prior: PriorConfig,
    #[serde(default)]
    pub forward: ForwardConfig,
    #[serde(default)]
    pub assimilate: AssimilateConfig,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub saddle: SaddleConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// The built-in heat-equation twin experiment.
pub const DEFAULT_CONFIG: &str = r#"
seed = 1

[model]
kind = "heat"

[grid]
m = 63
dt_max = 1e-4

[observations]
times = [0.02, 0.05]
rows = { kind = "sines", count = 3 }
covariance = 0.01
data = { source = "twin", truth = { kind = "sines", coefficients = [1.0, 0.5] }, noise_std = 0.0 }

[prior]
sigma = 1.0
"#;

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::from_toml(DEFAULT_CONFIG).expect("built-in config parses")
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.m < 3 {
            return Err(Error::Config("grid.m must be at least 3".into()));
        }
        if !(self.prior.sigma > 0.0) {
            return Err(Error::Config("prior.sigma must be positive".into()));
        }
        if let Some(dt) = self.grid.dt_max {
            if !(dt > 0.0) {
                return Err(Error::Config("grid.dt_max must be positive".into()));
            }
        }
        if self.observations.times.is_empty() && self.grid.t_end.is_none() {
            return Err(Error::Config(
                "either observation times or grid.t_end are required".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, truncated to 16 hex digits.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn build_model(&self) -> Result<ModelSpec> {
        let m = self.model.build()?;
        Ok(match self.well_posed {
            Some(flag) => ModelSpec {
                globally_well_posed: flag,
                ..m
            },
            None => {
                let check = check_global_existence(&m, 1.0);
                if !check.well_posed {
                    warn!("model {} fails the growth screen; blow-up is possible", m.name);
                }
                m
            }
        })
    }

    pub fn t_end(&self) -> f64 {
        let last = self.observations.times.last().copied().unwrap_or(0.0);
        self.grid.t_end.unwrap_or(last).max(last)
    }

    pub fn build_mesh(&self, model: &ModelSpec, amplitude: f64) -> Result<TimeMesh> {
        let t_end = self.t_end();
        let dx = 1.0 / (self.grid.m + 1) as f64;
        let dt = self
            .grid
            .dt_max
            .unwrap_or_else(|| default_dt_max(model, t_end, dx, amplitude.max(1.0)));
        TimeMesh::new(&self.observations.times, t_end, dt)
    }

    fn covariance(&self, q: usize) -> Vec<Vec<f64>> {
        match &self.observations.covariance {
            CovarianceSpec::Scalar(s) => (0..q)
                .map(|i| (0..q).map(|j| if i == j { *s } else { 0.0 }).collect())
                .collect(),
            CovarianceSpec::Matrix(r) => r.clone(),
        }
    }

    /// Model, observations (with twin data generated if requested), prior and mesh.
    pub fn build_problem(&self) -> Result<Problem> {
        let model = self.build_model()?;
        let m = self.grid.m;
        let rows = self.observations.rows.build(m)?;
        let q = rows.len();
        let n = self.observations.times.len();
        let u0 = self.prior.mean.build(m)?;
        let (data, amplitude) = match &self.observations.data {
            DataSpec::Literal { values } => (values.clone(), u0.sup_norm()),
            DataSpec::Twin { truth, noise_std } => {
                let truth = truth.build(m)?;
                let mesh = self.build_mesh(&model, truth.sup_norm())?;
                let y = solve_forward(&model, &truth, &mesh)?;
                let tmp = ObservationSet::new(
                    self.observations.times.clone(),
                    rows.clone(),
                    self.covariance(q),
                    vec![vec![0.0; q]; n],
                    None,
                )?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let noise = Normal::new(0.0, noise_std.max(0.0))
                    .map_err(|e| Error::Config(format!("noise_std: {e}")))?;
                let data = mesh
                    .obs_indices()
                    .iter()
                    .map(|&k| {
                        tmp.observe(&y.states[k])
                            .into_iter()
                            .map(|z| if *noise_std > 0.0 { z + noise.sample(&mut rng) } else { z })
                            .collect()
                    })
                    .collect();
                (data, truth.sup_norm().max(u0.sup_norm()))
            }
        };
        let obs = ObservationSet::new(
            self.observations.times.clone(),
            rows,
            self.covariance(q),
            data,
            self.observations.data_bound,
        )?;
        let prior = PriorSpec::new(u0, self.prior.sigma)?;
        let mesh = self.build_mesh(&model, amplitude)?;
        Problem::new(model, obs, prior, mesh)
    }

    /// Twin truth, if the data are synthetic.
    pub fn truth(&self) -> Result<Option<GridFn>> {
        match &self.observations.data {
            DataSpec::Twin { truth, .. } => Ok(Some(truth.build(self.grid.m)?)),
            DataSpec::Literal { .. } => Ok(None),
        }
    }

    pub fn saddle_options(&self) -> SaddleOptions {
        SaddleOptions {
            q: self.saddle.q,
            times: self.saddle.times.clone(),
            sigma: self.saddle.sigma,
            grid: self.grid.m,
            dt_max: self.grid.dt_max.unwrap_or(1e-4),
            magnitude: self.saddle.magnitude,
            hessian_modes: self.saddle.hessian_modes,
            ..SaddleOptions::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_builds() {
        let cfg = ExperimentConfig::default();
        let p = cfg.build_problem().unwrap();
        assert_eq!(p.grid_size(), 63);
        assert_eq!(p.obs.q(), 3);
        let truth = cfg.truth().unwrap().unwrap();
        assert!(p.cost(&truth).unwrap().misfit < 1e-28);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn parse_errors_are_config_errors() {
        assert!(ExperimentConfig::from_toml("seed = ").unwrap_err().is_config());
        let bad = DEFAULT_CONFIG.replace("sigma = 1.0", "sigma = -1.0");
        assert!(ExperimentConfig::from_toml(&bad).unwrap_err().is_config());
        let unknown = format!("{DEFAULT_CONFIG}\n[bogus]\nx = 1\n");
        assert!(ExperimentConfig::from_toml(&unknown).unwrap_err().is_config());
    }

    #[test]
    fn rows_and_functions() {
        let rows = RowsSpec::LocalAverages { count: 4 }.build(63).unwrap();
        for r in &rows {
            assert!((r.dot(&GridFn::from_fn(63, |_| 1.0)) - 1.0).abs() < 0.1);
        }
        assert!(FunctionSpec::Values { values: vec![0.0; 5] }.build(6).is_err());
        let matrix: CovarianceSpec = toml::from_str::<toml::Table>("c = [[1.0, 0.0], [0.0, 2.0]]")
            .unwrap()["c"]
            .clone()
            .try_into()
            .unwrap();
        assert_eq!(matrix, CovarianceSpec::Matrix(vec![vec![1.0, 0.0], vec![0.0, 2.0]]));
    }
}
