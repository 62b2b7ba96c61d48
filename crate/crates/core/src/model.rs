//! Partially observed diffusion model and the coefficient fields derived from it.
//!
//! The signal `x` (dimension `d`) and observation `y` (dimension `m`) follow
//!
//! ```text
//! dx = (bdotᵀ x + b0(t,y)) dt + theta(t,y) dw
//! dy = (obs_bdotᵀ x + obs_b0(t,y)) dt + obs_theta(t,y) dw
//! ```
//!
//! driven by a `dw`-dimensional Wiener process. All coefficients depend on
//! `(t, y)` only.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eigen_range, symmetrize};

/// Largest admissible condition number of `ΘΘᵀ`.
pub const MAX_OBS_CONDITION: f64 = 1e12;

type Callback = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// A bounded matrix-valued function of `(t, y)`.
#[derive(Clone)]
pub enum MatrixFn {
    Constant(DMatrix<f64>),
    /// `clip(base + Σ_k y_k slopes[k] + t time_slope, ±bound)` elementwise.
    AffineClipped {
        base: DMatrix<f64>,
        slopes: Vec<DMatrix<f64>>,
        time_slope: DMatrix<f64>,
        bound: f64,
    },
    /// `base + amplitude * tanh(weights·y + time_rate t)`.
    Sigmoid {
        base: DMatrix<f64>,
        amplitude: DMatrix<f64>,
        weights: DVector<f64>,
        time_rate: f64,
    },
    Callback { rows: usize, cols: usize, f: Callback },
}

impl fmt::Debug for MatrixFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixFn::Constant(m) => write!(f, "Constant({m:?})"),
            MatrixFn::AffineClipped { base, bound, .. } => {
                write!(f, "AffineClipped {{ base: {base:?}, bound: {bound} }}")
            }
            MatrixFn::Sigmoid { base, amplitude, .. } => {
                write!(f, "Sigmoid {{ base: {base:?}, amplitude: {amplitude:?} }}")
            }
            MatrixFn::Callback { rows, cols, .. } => write!(f, "Callback({rows}x{cols})"),
        }
    }
}

impl MatrixFn {
    pub fn constant(rows: usize, cols: usize, row_major: &[f64]) -> Self {
        MatrixFn::Constant(DMatrix::from_row_slice(rows, cols, row_major))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatrixFn::Constant(DMatrix::zeros(rows, cols))
    }

    pub fn callback(
        rows: usize,
        cols: usize,
        f: impl Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        MatrixFn::Callback { rows, cols, f: Arc::new(f) }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            MatrixFn::Constant(m) => m.shape(),
            MatrixFn::AffineClipped { base, .. } | MatrixFn::Sigmoid { base, .. } => base.shape(),
            MatrixFn::Callback { rows, cols, .. } => (*rows, *cols),
        }
    }

    pub fn eval(&self, t: f64, y: &DVector<f64>) -> DMatrix<f64> {
        match self {
            MatrixFn::Constant(m) => m.clone(),
            MatrixFn::AffineClipped { base, slopes, time_slope, bound } => {
                let mut out = base + time_slope * t;
                for (k, s) in slopes.iter().enumerate() {
                    out += s * y[k];
                }
                out.map(|v| v.clamp(-bound, *bound))
            }
            MatrixFn::Sigmoid { base, amplitude, weights, time_rate } => {
                let arg = weights.dot(y) + time_rate * t;
                base + amplitude * arg.tanh()
            }
            MatrixFn::Callback { f, .. } => f(t, y),
        }
    }

    pub fn eval_vec(&self, t: f64, y: &DVector<f64>) -> DVector<f64> {
        let m = self.eval(t, y);
        DVector::from_column_slice(m.as_slice())
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, MatrixFn::Constant(_))
    }
}

/// Serializable description of a [`MatrixFn`] (matrices row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MatrixFnSpec {
    Constant {
        value: Vec<Vec<f64>>,
    },
    AffineClipped {
        base: Vec<Vec<f64>>,
        slopes: Vec<Vec<Vec<f64>>>,
        #[serde(default)]
        time_slope: Option<Vec<Vec<f64>>>,
        bound: f64,
    },
    Sigmoid {
        base: Vec<Vec<f64>>,
        amplitude: Vec<Vec<f64>>,
        weights: Vec<f64>,
        #[serde(default)]
        time_rate: f64,
    },
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

impl MatrixFnSpec {
    pub fn build(&self) -> Result<MatrixFn> {
        Ok(match self {
            MatrixFnSpec::Constant { value } => MatrixFn::Constant(to_matrix(value)?),
            MatrixFnSpec::AffineClipped { base, slopes, time_slope, bound } => {
                let base = to_matrix(base)?;
                let slopes = slopes.iter().map(|s| to_matrix(s)).collect::<Result<Vec<_>>>()?;
                let time_slope = match time_slope {
                    Some(ts) => to_matrix(ts)?,
                    None => DMatrix::zeros(base.nrows(), base.ncols()),
                };
                if slopes.iter().chain([&time_slope]).any(|s| s.shape() != base.shape()) {
                    return Err(Error::Dimension("affine slope shape differs from base".into()));
                }
                MatrixFn::AffineClipped { base, slopes, time_slope, bound: *bound }
            }
            MatrixFnSpec::Sigmoid { base, amplitude, weights, time_rate } => {
                let base = to_matrix(base)?;
                let amplitude = to_matrix(amplitude)?;
                if amplitude.shape() != base.shape() {
                    return Err(Error::Dimension("sigmoid amplitude shape differs from base".into()));
                }
                MatrixFn::Sigmoid {
                    base,
                    amplitude,
                    weights: DVector::from_column_slice(weights),
                    time_rate: *time_rate,
                }
            }
        })
    }
}

/// Signal/observation system with affine-in-`x` drifts.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    /// Signal dimension `d`.
    pub d: usize,
    /// Observation dimension `d1 - d`.
    pub m: usize,
    /// Wiener dimension.
    pub dw: usize,
    pub theta: MatrixFn,
    pub obs_theta: MatrixFn,
    /// `D_i b^j`, d×d.
    pub bdot: MatrixFn,
    /// `D_i B^j`, d×m.
    pub obs_bdot: MatrixFn,
    /// `b(t,0,y)`, d×1.
    pub b0: MatrixFn,
    /// `B(t,0,y)`, m×1.
    pub obs_b0: MatrixFn,
    pub horizon: f64,
    /// Derived fields when every coefficient is constant.
    constant_fields: Option<Box<DerivedFields>>,
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: usize,
        m: usize,
        dw: usize,
        theta: MatrixFn,
        obs_theta: MatrixFn,
        bdot: MatrixFn,
        obs_bdot: MatrixFn,
        b0: MatrixFn,
        obs_b0: MatrixFn,
        horizon: f64,
    ) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::InvalidArgument("signal and observation dimensions must be positive".into()));
        }
        if dw < d + m {
            return Err(Error::InvalidArgument(format!(
                "Wiener dimension {dw} must be at least d1 = {}",
                d + m
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        let expect = [
            ("theta", &theta, (d, dw)),
            ("obs_theta", &obs_theta, (m, dw)),
            ("bdot", &bdot, (d, d)),
            ("obs_bdot", &obs_bdot, (d, m)),
            ("b0", &b0, (d, 1)),
            ("obs_b0", &obs_b0, (m, 1)),
        ];
        for (name, f, shape) in expect {
            if f.shape() != shape {
                return Err(Error::Dimension(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    f.shape()
                )));
            }
        }
        let mut spec = ModelSpec { d, m, dw, theta, obs_theta, bdot, obs_bdot, b0, obs_b0, horizon, constant_fields: None };
        if spec.is_constant() {
            spec.constant_fields = derived_at(&spec, 0.0, &DVector::zeros(m)).ok().map(Box::new);
        }
        Ok(spec)
    }

    /// `dx = -x dt + dw¹`, `dy = x dt + dw²`.
    pub fn classic_scalar(horizon: f64) -> Self {
        Self::scalar_constant([1.0, 0.0], [0.0, 1.0], -1.0, 1.0, 0.0, 0.0, horizon)
    }

    /// Scalar signal and observation with constant coefficients and `dw = 2`.
    pub fn scalar_constant(
        theta: [f64; 2],
        obs_theta: [f64; 2],
        bdot: f64,
        obs_bdot: f64,
        b0: f64,
        obs_b0: f64,
        horizon: f64,
    ) -> Self {
        ModelSpec::new(
            1,
            1,
            2,
            MatrixFn::constant(1, 2, &theta),
            MatrixFn::constant(1, 2, &obs_theta),
            MatrixFn::constant(1, 1, &[bdot]),
            MatrixFn::constant(1, 1, &[obs_bdot]),
            MatrixFn::constant(1, 1, &[b0]),
            MatrixFn::constant(1, 1, &[obs_b0]),
            horizon,
        )
        .expect("scalar shapes are consistent")
    }

    pub fn d1(&self) -> usize {
        self.d + self.m
    }

    pub fn is_constant(&self) -> bool {
        self.named().iter().all(|(_, f)| f.is_constant())
    }

    fn named(&self) -> [(&'static str, &MatrixFn); 6] {
        [
            ("theta", &self.theta),
            ("obs_theta", &self.obs_theta),
            ("bdot", &self.bdot),
            ("obs_bdot", &self.obs_bdot),
            ("b0", &self.b0),
            ("obs_b0", &self.obs_b0),
        ]
    }
}

/// Coefficient fields at one `(t, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedFields {
    /// `½θθᵀ`
    pub a: DMatrix<f64>,
    /// `½σσᵀ`
    pub alpha: DMatrix<f64>,
    /// `a − α`
    pub ahat: DMatrix<f64>,
    /// `θΘᵀΨ`, d×m
    pub sigma: DMatrix<f64>,
    /// `(ΘΘᵀ)^{-1/2}`
    pub psi: DMatrix<f64>,
    /// `Ψ⁻¹`
    pub phi: DMatrix<f64>,
    /// `ḂΨ`, d×m
    pub sf_bdot: DMatrix<f64>,
    /// `½ θ̌θ̌ᵀ` for the stacked noise `θ̌ = (θ; Θ)`.
    pub acheck: DMatrix<f64>,
    pub bdot: DMatrix<f64>,
    pub b0: DVector<f64>,
    /// `Ψ B(t,0,y)`
    pub sf_b0: DVector<f64>,
}

impl DerivedFields {
    /// Signal drift `b(x) = ḃᵀx + b0`.
    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.bdot.tr_mul(x) + &self.b0
    }

    /// Normalized observation drift `𝖡(x) = 𝖡̇ᵀx + Ψ B0`.
    pub fn sf_drift(&self, x: &DVector<f64>) -> DVector<f64> {
        self.sf_bdot.tr_mul(x) + &self.sf_b0
    }

    pub fn d(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.psi.nrows()
    }
}

pub fn derived_at(spec: &ModelSpec, t: f64, y: &DVector<f64>) -> Result<DerivedFields> {
    if y.len() != spec.m {
        return Err(Error::Dimension(format!("y has length {}, expected {}", y.len(), spec.m)));
    }
    if let Some(f) = &spec.constant_fields {
        return Ok((**f).clone());
    }
    let theta = spec.theta.eval(t, y);
    let obs_theta = spec.obs_theta.eval(t, y);
    let gram = symmetrize(&(&obs_theta * obs_theta.transpose()));
    let eig = SymmetricEigen::new(gram);
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(lo > 0.0) || condition > MAX_OBS_CONDITION {
        return Err(Error::SingularObservationNoise { t, y: y.as_slice().to_vec(), condition });
    }
    let q = &eig.eigenvectors;
    let psi = symmetrize(&(q * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * q.transpose()));
    let phi = symmetrize(&(q * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * q.transpose()));

    let a = symmetrize(&(&theta * theta.transpose() * 0.5));
    let sigma = &theta * obs_theta.transpose() * &psi;
    let alpha = symmetrize(&(&sigma * sigma.transpose() * 0.5));
    let ahat = symmetrize(&(&a - &alpha));
    let stacked = {
        let mut s = DMatrix::zeros(spec.d1(), spec.dw);
        s.rows_mut(0, spec.d).copy_from(&theta);
        s.rows_mut(spec.d, spec.m).copy_from(&obs_theta);
        s
    };
    let acheck = symmetrize(&(&stacked * stacked.transpose() * 0.5));
    let sf_bdot = spec.obs_bdot.eval(t, y) * &psi;
    let b0 = spec.b0.eval_vec(t, y);
    let sf_b0 = &psi * spec.obs_b0.eval_vec(t, y);
    Ok(DerivedFields {
        a,
        alpha,
        ahat,
        sigma,
        psi,
        phi,
        sf_bdot,
        acheck,
        bdot: spec.bdot.eval(t, y),
        b0,
        sf_b0,
    })
}

/// Drift values `(b, B, 𝖡)` at `z = (x, y)`.
pub fn drift_at(spec: &ModelSpec, t: f64, z: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    if z.len() != spec.d1() {
        return Err(Error::Dimension(format!("z has length {}, expected {}", z.len(), spec.d1())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite state".into()));
    }
    let x = z.rows(0, spec.d).into_owned();
    let y = z.rows(spec.d, spec.m).into_owned();
    let f = derived_at(spec, t, &y)?;
    let b = f.drift(&x);
    let big_b = spec.obs_bdot.eval(t, &y).tr_mul(&x) + spec.obs_b0.eval_vec(t, &y);
    let sf_b = &f.psi * &big_b;
    Ok((b, big_b, sf_b))
}

/// Uniform `(t, y)` grid on which the model assumptions are checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub t_points: usize,
    pub y_lower: Vec<f64>,
    pub y_upper: Vec<f64>,
    pub y_points: usize,
}

impl SamplingPlan {
    pub fn uniform_box(m: usize, half_width: f64, t_points: usize, y_points: usize) -> Self {
        SamplingPlan {
            t_points,
            y_lower: vec![-half_width; m],
            y_upper: vec![half_width; m],
            y_points,
        }
    }

    fn samples(&self, horizon: f64) -> Vec<(f64, DVector<f64>)> {
        let lin = |lo: f64, hi: f64, n: usize, i: usize| {
            if n <= 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        let m = self.y_lower.len();
        let ny = self.y_points.max(1);
        let total_y = ny.pow(m as u32);
        let mut out = Vec::with_capacity(self.t_points * total_y);
        for it in 0..self.t_points {
            let t = lin(0.0, horizon, self.t_points, it);
            for flat in 0..total_y {
                let mut rem = flat;
                let y = DVector::from_fn(m, |k, _| {
                    let idx = rem % ny;
                    rem /= ny;
                    lin(self.y_lower[k], self.y_upper[k], ny, idx)
                });
                out.push((t, y));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    /// Smallest eigenvalue of `ǎ` over the samples.
    pub delta_min: f64,
    /// Smallest eigenvalue of `â` over the samples.
    pub ahat_min: f64,
    pub psi_norm_max: f64,
    /// Finite-difference Lipschitz constants in `y`, per coefficient.
    pub lipschitz_estimates: BTreeMap<String, f64>,
    pub samples: usize,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn accepted(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn ensure_accepted(&self) -> Result<()> {
        match self.violations.first() {
            None => Ok(()),
            Some(v) => Err(Error::AssumptionViolated(v.clone())),
        }
    }
}

pub fn validate_model(spec: &ModelSpec, plan: &SamplingPlan) -> Result<ValidationReport> {
    if plan.t_points == 0 || plan.y_points == 0 {
        return Err(Error::InvalidArgument("sampling plan is empty".into()));
    }
    if plan.y_lower.len() != spec.m || plan.y_upper.len() != spec.m {
        return Err(Error::Dimension("sampling box dimension differs from observation dimension".into()));
    }
    let samples = plan.samples(spec.horizon);
    let mut report = ValidationReport {
        delta_min: f64::INFINITY,
        ahat_min: f64::INFINITY,
        psi_norm_max: 0.0,
        lipschitz_estimates: BTreeMap::new(),
        samples: samples.len(),
        violations: Vec::new(),
    };
    const FD_STEP: f64 = 1e-6;
    for (t, y) in &samples {
        for (name, f) in spec.named() {
            let v = f.eval(*t, y);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { name: name.into(), t: *t, y: y.as_slice().to_vec() });
            }
            let mut lip: f64 = 0.0;
            for k in 0..spec.m {
                let mut yp = y.clone();
                yp[k] += FD_STEP;
                lip = lip.max((f.eval(*t, &yp) - &v).norm() / FD_STEP);
            }
            let entry = report.lipschitz_estimates.entry(name.to_string()).or_insert(0.0);
            *entry = entry.max(lip);
        }
        match derived_at(spec, *t, y) {
            Ok(f) => {
                let (lo_check, _) = eigen_range(&f.acheck);
                let (lo_hat, _) = eigen_range(&f.ahat);
                let (_, psi_hi) = eigen_range(&f.psi);
                report.delta_min = report.delta_min.min(lo_check);
                report.ahat_min = report.ahat_min.min(lo_hat);
                report.psi_norm_max = report.psi_norm_max.max(psi_hi);
                if lo_check <= 0.0 && report.violations.len() < 8 {
                    report.violations.push(format!(
                        "nondegeneracy assumption violated: stacked diffusion matrix has eigenvalue {lo_check:e} at (t,y)=({t}, {:?})",
                        y.as_slice()
                    ));
                }
                if lo_hat <= 0.0 && report.violations.len() < 8 {
                    report.violations.push(format!(
                        "nondegeneracy assumption violated: a - alpha has eigenvalue {lo_hat:e} at (t,y)=({t}, {:?})",
                        y.as_slice()
                    ));
                }
            }
            Err(Error::SingularObservationNoise { condition, .. }) => {
                report.delta_min = report.delta_min.min(0.0);
                if report.violations.len() < 8 {
                    report.violations.push(format!(
                        "nondegeneracy assumption violated: obs_theta·obs_thetaᵀ singular (condition {condition:e}) at (t,y)=({t}, {:?})",
                        y.as_slice()
                    ));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(theta: [f64; 2], obs: [f64; 2]) -> ModelSpec {
        ModelSpec::scalar_constant(theta, obs, 0.0, 0.0, 0.0, 0.0, 1.0)
    }

    fn y0() -> DVector<f64> {
        DVector::zeros(1)
    }

    #[test]
    fn uncorrelated_unit_noises() {
        let f = derived_at(&scalar([1.0, 0.0], [0.0, 1.0]), 0.0, &y0()).unwrap();
        assert_relative_eq!(f.a[(0, 0)], 0.5);
        assert_relative_eq!(f.sigma[(0, 0)], 0.0);
        assert_relative_eq!(f.alpha[(0, 0)], 0.0);
        assert_relative_eq!(f.ahat[(0, 0)], 0.5);
        assert_relative_eq!(f.psi[(0, 0)], 1.0);
    }

    #[test]
    fn correlated_noise_hand_values() {
        // ΘΘᵀ = 4, Ψ = 1/2, a = ½·2, σ = θΘᵀΨ = 2·½, α = ½, â = ½
        let f = derived_at(&scalar([1.0, 1.0], [0.0, 2.0]), 0.0, &y0()).unwrap();
        assert_relative_eq!(f.psi[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(f.phi[(0, 0)], 2.0, epsilon = 1e-14);
        assert_relative_eq!(f.a[(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(f.sigma[(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(f.alpha[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(f.ahat[(0, 0)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn validation_diagonal_case() {
        let spec = scalar([1.0, 0.0], [0.0, 1.0]);
        let r = validate_model(&spec, &SamplingPlan::uniform_box(1, 1.0, 3, 3)).unwrap();
        assert!(r.accepted());
        assert_relative_eq!(r.delta_min, 0.5, epsilon = 1e-14);
        assert_relative_eq!(r.psi_norm_max, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn validation_rejects_singular_observation_noise() {
        let spec = scalar([1.0, 0.0], [0.0, 0.0]);
        let r = validate_model(&spec, &SamplingPlan::uniform_box(1, 1.0, 2, 2)).unwrap();
        assert!(!r.accepted());
        assert!(r.ensure_accepted().is_err());
        assert!(matches!(derived_at(&spec, 0.0, &y0()), Err(Error::SingularObservationNoise { .. })));
    }

    #[test]
    fn validation_accepts_correlated_case() {
        let spec = scalar([1.0, 1.0], [0.0, 2.0]);
        let r = validate_model(&spec, &SamplingPlan::uniform_box(1, 1.0, 2, 2)).unwrap();
        assert!(r.accepted());
        assert_relative_eq!(r.ahat_min, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_signal_noise_is_flagged() {
        let spec = scalar([0.0, 0.0], [0.0, 1.0]);
        let f = derived_at(&spec, 0.0, &y0()).unwrap();
        assert_eq!(f.a[(0, 0)], 0.0);
        assert_eq!(f.ahat[(0, 0)], 0.0);
        let r = validate_model(&spec, &SamplingPlan::uniform_box(1, 1.0, 2, 2)).unwrap();
        assert!(!r.accepted());
    }

    #[test]
    fn non_finite_coefficient_rejects_model() {
        let mut spec = scalar([1.0, 0.0], [0.0, 1.0]);
        spec.b0 = MatrixFn::callback(1, 1, |_, y| DMatrix::from_element(1, 1, 1.0 / y[0]));
        let plan = SamplingPlan::uniform_box(1, 1.0, 1, 3);
        assert!(matches!(validate_model(&spec, &plan), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn drift_examples() {
        let spec = ModelSpec::scalar_constant([1.0, 0.0], [0.0, 1.0], 0.5, 1.0, 0.2, 0.0, 1.0);
        let (b, _, _) = drift_at(&spec, 0.0, &DVector::from_vec(vec![2.0, 0.0])).unwrap();
        assert_relative_eq!(b[0], 1.2, epsilon = 1e-15);
        let (b, big_b, _) = drift_at(&spec, 0.0, &DVector::from_vec(vec![0.0, 0.3])).unwrap();
        assert_relative_eq!(b[0], 0.2);
        assert_relative_eq!(big_b[0], 0.0);
        // Ψ = 0.5 via Θ = (0, 2)
        let spec = ModelSpec::scalar_constant([1.0, 0.0], [0.0, 2.0], 0.0, 1.0, 0.0, 0.0, 1.0);
        let (_, _, sf) = drift_at(&spec, 0.0, &DVector::from_vec(vec![3.0, 0.0])).unwrap();
        assert_relative_eq!(sf[0], 1.5, epsilon = 1e-14);
    }

    #[test]
    fn families_evaluate() {
        let spec = MatrixFnSpec::AffineClipped {
            base: vec![vec![1.0]],
            slopes: vec![vec![vec![2.0]]],
            time_slope: None,
            bound: 2.5,
        };
        let f = spec.build().unwrap();
        assert_relative_eq!(f.eval(0.0, &DVector::from_vec(vec![0.25]))[(0, 0)], 1.5);
        assert_relative_eq!(f.eval(0.0, &DVector::from_vec(vec![5.0]))[(0, 0)], 2.5);
        let s = MatrixFnSpec::Sigmoid {
            base: vec![vec![1.0]],
            amplitude: vec![vec![0.5]],
            weights: vec![1.0],
            time_rate: 0.0,
        }
        .build()
        .unwrap();
        assert_relative_eq!(s.eval(0.0, &DVector::from_vec(vec![0.0]))[(0, 0)], 1.0);
        assert!(s.eval(0.0, &DVector::from_vec(vec![50.0]))[(0, 0)] <= 1.5);
    }

    #[test]
    fn shape_errors() {
        let r = ModelSpec::new(
            1,
            1,
            1,
            MatrixFn::zeros(1, 1),
            MatrixFn::zeros(1, 1),
            MatrixFn::zeros(1, 1),
            MatrixFn::zeros(1, 1),
            MatrixFn::zeros(1, 1),
            MatrixFn::zeros(1, 1),
            1.0,
        );
        assert!(r.is_err());
    }
}
