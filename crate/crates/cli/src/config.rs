//! TOML run configuration. Unknown keys are rejected so that typos surface
//! as errors naming the offending field.

use std::path::Path;

use kbzakai::model::{validate_model, SamplingPlan};
use kbzakai::riccati::NoiseScheme;
use kbzakai::scenarios::ModelConfig;
use kbzakai::sde::step_count;
use kbzakai::ModelSpec;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub simulation: SimulationBlock,
    #[serde(default)]
    pub validation: ValidationBlock,
    #[serde(default)]
    pub filter: FilterBlock,
    #[serde(default)]
    pub zakai: Option<ZakaiBlock>,
    #[serde(default)]
    pub oracle: Option<OracleBlock>,
    #[serde(default)]
    pub testbed: Option<TestbedBlock>,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationBlock {
    pub dt: f64,
    pub horizon: f64,
    #[serde(default = "one")]
    pub n_paths: usize,
    pub seed: u64,
    /// Law of `x₀`; `y₀ = 0`.
    pub x0_mean: Vec<f64>,
    pub x0_cov: Vec<Vec<f64>>,
    #[serde(default = "default_blowup")]
    pub blowup_bound: f64,
}

fn one() -> usize {
    1
}

fn default_blowup() -> f64 {
    kbzakai::sde::DEFAULT_BLOWUP_BOUND
}

/// `(t, y)` sampling box on which the model assumptions are checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationBlock {
    pub y_half_width: f64,
    pub t_points: usize,
    pub y_points: usize,
}

impl Default for ValidationBlock {
    fn default() -> Self {
        ValidationBlock { y_half_width: 5.0, t_points: 3, y_points: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct FilterBlock {
    /// Gaussian `e^{−Q₀}`; defaults to the law of `x₀`.
    pub prior_mean: Option<Vec<f64>>,
    pub prior_cov: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub scheme: NoiseScheme,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Equation {
    #[default]
    Direct,
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZakaiBlock {
    pub h: f64,
    /// Box covering `x̄ ± n_std·√Σ` over the run.
    #[serde(default = "default_n_std")]
    pub n_std: f64,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    #[serde(default = "yes")]
    pub milstein: bool,
    #[serde(default)]
    pub equation: Equation,
}

fn default_n_std() -> f64 {
    8.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleBlock {
    pub particles: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    pub times: Vec<f64>,
    #[serde(default = "default_grid_tol")]
    pub grid_mean_tol: f64,
}

fn default_threshold() -> f64 {
    kbzakai::oracle::DEFAULT_RESAMPLE_THRESHOLD
}

fn default_bootstrap() -> usize {
    kbzakai::oracle::DEFAULT_BOOTSTRAP_REPLICATES
}

fn default_grid_tol() -> f64 {
    1e-2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestbedFamily {
    Heat,
    NoisyAffine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestbedBlock {
    pub family: TestbedFamily,
    #[serde(default = "default_p")]
    pub p: Vec<f64>,
    #[serde(default = "default_tb_h")]
    pub h: f64,
    #[serde(default = "default_tb_half_width")]
    pub half_width: f64,
    #[serde(default = "default_tb_horizon")]
    pub horizon: f64,
    #[serde(default = "default_coarse")]
    pub coarse_steps: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_tb_paths")]
    pub n_paths: usize,
}

fn default_p() -> Vec<f64> {
    vec![2.0, 4.0]
}
fn default_tb_h() -> f64 {
    0.05
}
fn default_tb_half_width() -> f64 {
    4.0
}
fn default_tb_horizon() -> f64 {
    0.5
}
fn default_coarse() -> usize {
    16
}
fn default_levels() -> usize {
    5
}
fn default_tb_paths() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Csv,
    Json,
    SvgPlotData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_dir")]
    pub dir: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_dir() -> String {
    "out".into()
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv]
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { dir: default_dir(), formats: default_formats() }
    }
}

/// Command-line overrides applied before validation and hashing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub paths: Option<usize>,
}

/// Configuration with everything the commands need already built.
pub struct Validated {
    pub config: RunConfig,
    pub spec: ModelSpec,
    pub steps: usize,
    pub x0_mean: DVector<f64>,
    pub x0_cov: DMatrix<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn matrix(rows: &[Vec<f64>], d: usize, field: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(CliError::Validation(format!("{field} must be a {d}x{d} matrix")));
    }
    let m = DMatrix::from_row_iterator(d, d, rows.iter().flatten().copied());
    if m.clone().cholesky().is_none() || (&m - m.transpose()).amax() > 1e-12 {
        return Err(CliError::Validation(format!("{field} must be symmetric positive definite")));
    }
    Ok(m)
}

fn vector(v: &[f64], d: usize, field: &str) -> Result<DVector<f64>, CliError> {
    if v.len() != d {
        return Err(CliError::Validation(format!("{field} has length {}, expected d = {d}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

/// Checks that `t` is a grid time `k·dt ≤ T`.
fn on_grid(t: f64, dt: f64, horizon: f64, field: &str) -> Result<usize, CliError> {
    let k = (t / dt).round();
    if t < 0.0 || t > horizon * (1.0 + 1e-12) || (k * dt - t).abs() > 1e-9 * horizon.max(1.0) {
        return Err(CliError::Validation(format!(
            "{field} = {t} is not on the simulation grid (multiples of simulation.dt = {dt} up to simulation.horizon = {horizon})"
        )));
    }
    Ok(k as usize)
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.simulation.seed = s;
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
        if let Some(n) = o.paths {
            self.simulation.n_paths = n;
        }
    }

    pub fn validate(self) -> Result<Validated, CliError> {
        let sim = &self.simulation;
        let steps = step_count(sim.dt, sim.horizon).map_err(|_| {
            CliError::Validation(format!(
                "simulation.dt = {} does not divide simulation.horizon = {}",
                sim.dt, sim.horizon
            ))
        })?;
        if sim.n_paths == 0 {
            return Err(CliError::Validation("simulation.n_paths must be at least 1".into()));
        }
        let spec = self.model.build(sim.horizon).map_err(|e| CliError::Validation(format!("model: {e}")))?;
        let v = &self.validation;
        let plan = SamplingPlan::uniform_box(spec.m, v.y_half_width, v.t_points, v.y_points);
        let report = validate_model(&spec, &plan).map_err(|e| CliError::Validation(format!("model: {e}")))?;
        report.ensure_accepted().map_err(|e| CliError::Validation(e.to_string()))?;
        let d = spec.d;
        let x0_mean = vector(&sim.x0_mean, d, "simulation.x0_mean")?;
        let x0_cov = matrix(&sim.x0_cov, d, "simulation.x0_cov")?;
        let prior_mean = match &self.filter.prior_mean {
            Some(v) => vector(v, d, "filter.prior_mean")?,
            None => x0_mean.clone(),
        };
        let prior_cov = match &self.filter.prior_cov {
            Some(m) => matrix(m, d, "filter.prior_cov")?,
            None => x0_cov.clone(),
        };
        if let Some(z) = &self.zakai {
            if d > 2 {
                return Err(CliError::Validation(format!("zakai: grids support d <= 2, model has d = {d}")));
            }
            if !(z.h > 0.0) || !(z.n_std > 0.0) {
                return Err(CliError::Validation("zakai.h and zakai.n_std must be positive".into()));
            }
            for (i, t) in z.snapshot_times.iter().enumerate() {
                on_grid(*t, sim.dt, sim.horizon, &format!("zakai.snapshot_times[{i}]"))?;
            }
        }
        if let Some(o) = &self.oracle {
            if o.particles == 0 {
                return Err(CliError::Validation("oracle.particles must be positive".into()));
            }
            if !(0.0..=1.0).contains(&o.threshold) {
                return Err(CliError::Validation(format!("oracle.threshold = {} outside [0, 1]", o.threshold)));
            }
            for (i, t) in o.times.iter().enumerate() {
                on_grid(*t, sim.dt, sim.horizon, &format!("oracle.times[{i}]"))?;
            }
            if let Some(z) = &self.zakai {
                for t in &o.times {
                    if !z.snapshot_times.iter().any(|s| (s - t).abs() <= 1e-9 * sim.horizon.max(1.0)) {
                        return Err(CliError::Validation(format!(
                            "oracle.times entry {t} is not among zakai.snapshot_times"
                        )));
                    }
                }
            }
        }
        if let Some(tb) = &self.testbed {
            if tb.p.iter().any(|p| !(*p >= 2.0)) {
                return Err(CliError::Validation("testbed.p entries must be >= 2".into()));
            }
            if tb.levels < 2 || tb.coarse_steps == 0 || tb.n_paths == 0 {
                return Err(CliError::Validation(
                    "testbed needs levels >= 2, coarse_steps >= 1 and n_paths >= 1".into(),
                ));
            }
            if !(tb.h > 0.0 && tb.horizon > 0.0) {
                return Err(CliError::Validation("testbed.h and testbed.horizon must be positive".into()));
            }
            // The test function is a bump of radius 1.5 centred at 0.3.
            if !(tb.half_width >= 1.8 + 2.0 * tb.h) {
                return Err(CliError::Validation(format!(
                    "testbed.half_width = {} must be at least 1.8 + 2·testbed.h to hold the test function",
                    tb.half_width
                )));
            }
        }
        Ok(Validated { config: self, spec, steps, x0_mean, x0_cov, prior_mean, prior_cov })
    }
}
