//! Named model families used by the acceptance suite, the tests and the
//! command-line runner.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{MatrixFn, MatrixFnSpec, ModelSpec};

/// Serializable model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum ModelConfig {
    /// `dx = −x dt + dw¹`, `dy = x dt + dw²`.
    ClassicScalar,
    /// Scalar signal and observation with signal noise loading on the observation noise.
    CorrelatedScalar,
    /// Like `correlated_scalar` but the observation carries no signal (`𝖡 ≡ 0`).
    Unobservable,
    ScalarConstant {
        theta: [f64; 2],
        obs_theta: [f64; 2],
        bdot: f64,
        obs_bdot: f64,
        #[serde(default)]
        b0: f64,
        #[serde(default)]
        obs_b0: f64,
    },
    /// Bounded, observation-dependent coefficients drawn from `seed`.
    RandomBounded { seed: u64, d: usize, m: usize },
    General {
        d: usize,
        m: usize,
        dw: usize,
        theta: MatrixFnSpec,
        obs_theta: MatrixFnSpec,
        bdot: MatrixFnSpec,
        obs_bdot: MatrixFnSpec,
        b0: MatrixFnSpec,
        obs_b0: MatrixFnSpec,
    },
}

impl ModelConfig {
    pub fn build(&self, horizon: f64) -> Result<ModelSpec> {
        match self {
            ModelConfig::ClassicScalar => Ok(ModelSpec::classic_scalar(horizon)),
            ModelConfig::CorrelatedScalar => Ok(correlated_scalar(horizon)),
            ModelConfig::Unobservable => Ok(unobservable_scalar(horizon)),
            ModelConfig::ScalarConstant { theta, obs_theta, bdot, obs_bdot, b0, obs_b0 } => {
                Ok(ModelSpec::scalar_constant(*theta, *obs_theta, *bdot, *obs_bdot, *b0, *obs_b0, horizon))
            }
            ModelConfig::RandomBounded { seed, d, m } => random_bounded(*seed, *d, *m, horizon),
            ModelConfig::General { d, m, dw, theta, obs_theta, bdot, obs_bdot, b0, obs_b0 } => ModelSpec::new(
                *d,
                *m,
                *dw,
                theta.build()?,
                obs_theta.build()?,
                bdot.build()?,
                obs_bdot.build()?,
                b0.build()?,
                obs_b0.build()?,
                horizon,
            ),
        }
    }
}

/// `θ = (0.8, 0.6)`, `Θ = (0, 1)`: `σ = 0.6`, `â = 0.32`.
pub fn correlated_scalar(horizon: f64) -> ModelSpec {
    ModelSpec::scalar_constant([0.8, 0.6], [0.0, 1.0], -1.0, 1.0, 0.3, -0.2, horizon)
}

pub fn unobservable_scalar(horizon: f64) -> ModelSpec {
    ModelSpec::scalar_constant([0.8, 0.6], [0.0, 1.0], -1.0, 0.0, 0.3, 0.0, horizon)
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0))
}

fn sigmoid(rng: &mut ChaCha8Rng, base: DMatrix<f64>, amplitude: f64, m: usize) -> MatrixFn {
    let (r, c) = base.shape();
    MatrixFn::Sigmoid {
        amplitude: uniform_matrix(rng, r, c, amplitude),
        weights: DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)),
        time_rate: rng.random_range(-1.0..1.0),
        base,
    }
}

/// Coefficients `base + amplitude·tanh(w·y + r t)` with entries drawn
/// uniformly from `seed`. The observation noise is `[small | I + diag | small]`
/// and `dw = d + m + 1`, so `ΘΘᵀ` stays well conditioned and `a − α` nondegenerate.
pub fn random_bounded(seed: u64, d: usize, m: usize, horizon: f64) -> Result<ModelSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dw = d + m + 1;
    let mut theta = uniform_matrix(&mut rng, d, dw, 1.0);
    for i in 0..d {
        theta[(i, i)] += 1.5;
    }
    let mut obs = uniform_matrix(&mut rng, m, dw, 0.3);
    for k in 0..m {
        obs[(k, d + k)] = 1.0 + rng.random_range(0.0..0.5);
    }
    let mut bdot = uniform_matrix(&mut rng, d, d, 0.8);
    for i in 0..d {
        bdot[(i, i)] -= 1.0;
    }
    let obs_bdot = uniform_matrix(&mut rng, d, m, 1.0);
    let b0 = uniform_matrix(&mut rng, d, 1, 0.5);
    let obs_b0 = uniform_matrix(&mut rng, m, 1, 0.5);
    let theta = sigmoid(&mut rng, theta, 0.2, m);
    let obs_theta = sigmoid(&mut rng, obs, 0.1, m);
    let bdot = sigmoid(&mut rng, bdot, 0.3, m);
    let obs_bdot = sigmoid(&mut rng, obs_bdot, 0.3, m);
    let b0 = sigmoid(&mut rng, b0, 0.3, m);
    let obs_b0 = sigmoid(&mut rng, obs_b0, 0.3, m);
    ModelSpec::new(d, m, dw, theta, obs_theta, bdot, obs_bdot, b0, obs_b0, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derived_at, validate_model, SamplingPlan};

    #[test]
    fn correlated_scalar_fields() {
        let f = derived_at(&correlated_scalar(1.0), 0.0, &DVector::zeros(1)).unwrap();
        assert!((f.sigma[(0, 0)] - 0.6).abs() < 1e-14);
        assert!((f.ahat[(0, 0)] - 0.32).abs() < 1e-14);
    }

    #[test]
    fn random_configs_validate() {
        for seed in 0..20 {
            for (d, m) in [(1, 1), (2, 1), (2, 2)] {
                let spec = random_bounded(seed, d, m, 1.0).unwrap();
                let plan = SamplingPlan::uniform_box(m, 5.0, 3, 5);
                let r = validate_model(&spec, &plan).unwrap();
                assert!(r.accepted(), "seed {seed}: {:?}", r.violations);
            }
        }
    }

    #[test]
    fn config_roundtrip() {
        let c = ModelConfig::RandomBounded { seed: 3, d: 2, m: 1 };
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
