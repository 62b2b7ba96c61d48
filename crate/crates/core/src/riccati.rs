//! Observation-driven Riccati system for the quadratic exponent
//! `Q_t(x) = ½xᵀW_t x + V_tᵀx + U_t` and the Gaussian filter it yields.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eigen_range, max_asymmetry, spd_inverse, spd_solve, sym_fn, symmetrize};
use crate::model::{derived_at, DerivedFields, ModelSpec};
use crate::sde::PathBundle;

/// Symmetric positive definite quadratic `½xᵀWx + Vᵀx + U`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadraticForm {
    pub w: DMatrix<f64>,
    pub v: DVector<f64>,
    pub u: f64,
}

impl QuadraticForm {
    pub fn new(w: DMatrix<f64>, v: DVector<f64>, u: f64) -> Result<Self> {
        if w.nrows() != w.ncols() || w.nrows() != v.len() {
            return Err(Error::Dimension("W must be square and match V".into()));
        }
        if max_asymmetry(&w) > 1e-12 {
            return Err(Error::InvalidArgument("W must be symmetric".into()));
        }
        Ok(QuadraticForm { w, v, u })
    }

    /// `½ε|x|²`.
    pub fn isotropic(d: usize, eps: f64) -> Self {
        QuadraticForm { w: DMatrix::identity(d, d) * eps, v: DVector::zeros(d), u: 0.0 }
    }

    /// The form with `e^{-Q}` equal to the normalized `N(mean, cov)` density.
    pub fn gaussian_density(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        let w = spd_inverse(cov).ok_or_else(|| Error::InvalidArgument("covariance not SPD".into()))?;
        let v = -(&w * mean);
        let det = cov.determinant();
        let u = 0.5 * mean.dot(&(&w * mean)) + 0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln() + 0.5 * det.ln();
        Ok(QuadraticForm { w, v, u })
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.w * x)) + self.v.dot(x) + self.u
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w * x + &self.v
    }

    /// Smallest and largest curvature `xᵀWx/|x|²`.
    pub fn curvature_range(&self) -> (f64, f64) {
        eigen_range(&self.w)
    }

    pub fn is_positive_definite(&self) -> bool {
        self.w.clone().cholesky().is_some()
    }
}

/// `(Q(x), DQ(x), e^{-Q(x)})`.
pub fn eval_q(q: &QuadraticForm, x: &DVector<f64>) -> (f64, DVector<f64>, f64) {
    let value = q.value(x);
    (value, q.gradient(x), (-value).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiccatiState {
    pub w: DMatrix<f64>,
    pub v: DVector<f64>,
    pub u: f64,
    pub t: f64,
}

impl RiccatiState {
    pub fn from_form(q: &QuadraticForm, t: f64) -> Self {
        RiccatiState { w: q.w.clone(), v: q.v.clone(), u: q.u, t }
    }

    pub fn form(&self) -> QuadraticForm {
        QuadraticForm { w: self.w.clone(), v: self.v.clone(), u: self.u }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterEstimate {
    pub xbar: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl FilterEstimate {
    /// `x̄ = −W⁻¹V`, `Σ = W⁻¹`.
    pub fn from_state(s: &RiccatiState) -> Result<Self> {
        let sigma = spd_inverse(&s.w).ok_or(Error::NotPositiveDefinite { t: s.t })?;
        let xbar = -spd_solve(&s.w, &s.v).ok_or(Error::NotPositiveDefinite { t: s.t })?;
        Ok(FilterEstimate { xbar, sigma })
    }
}

/// Right-hand side of the W equation:
/// `(𝖡̇σᵀ − ḃ)W + W(σ𝖡̇ᵀ − ḃᵀ) − 2WâW + 𝖡̇𝖡̇ᵀ`.
pub fn riccati_rhs(f: &DerivedFields, w: &DMatrix<f64>) -> DMatrix<f64> {
    let k = &f.sf_bdot * f.sigma.transpose() - &f.bdot;
    &k * w + w * k.transpose() - w * &f.ahat * w * 2.0 + &f.sf_bdot * f.sf_bdot.transpose()
}

/// Drift of the V equation.
fn v_drift(f: &DerivedFields, w: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let k = &f.sf_bdot * f.sigma.transpose() - &f.bdot;
    let forcing = &f.sigma * &f.sf_b0 - &f.b0;
    &k * v - w * (&f.ahat * v) * 2.0 + w * &forcing + &f.sf_bdot * &f.sf_b0
}

/// Drift of the U equation.
fn u_drift(f: &DerivedFields, w: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let forcing = &f.sigma * &f.sf_b0 - &f.b0;
    f.a.component_mul(w).sum() + v.dot(&forcing) - v.dot(&(&f.ahat * v)) + 0.5 * f.sf_b0.norm_squared() + f.bdot.trace()
}

/// Discretization of the `dỹ`-driven equations for `V` and `U`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScheme {
    #[default]
    EulerMaruyama,
    /// Adds `½[σᵀ(Wσ + 𝖡̇)]_{kl}(Δỹ^kΔỹ^l − δ^{kl}Δt)` to `U`, the term through
    /// which the `V`-dependence of the `U` noise coefficient enters at order one.
    /// The `V` noise coefficient does not depend on `V`, so `V` is unchanged.
    Milstein,
}

/// One step with coefficients frozen at the left endpoint: classical RK4 for
/// `W`, Euler–Maruyama for `V` and `U`.
pub fn step_riccati(state: &RiccatiState, f: &DerivedFields, dytilde: &DVector<f64>, dt: f64) -> Result<RiccatiState> {
    step_riccati_with(state, f, dytilde, dt, NoiseScheme::EulerMaruyama)
}

pub fn step_riccati_with(
    state: &RiccatiState,
    f: &DerivedFields,
    dytilde: &DVector<f64>,
    dt: f64,
    scheme: NoiseScheme,
) -> Result<RiccatiState> {
    if dt < 0.0 {
        return Err(Error::InvalidArgument(format!("negative step {dt}")));
    }
    let w = &state.w;
    let k1 = riccati_rhs(f, w);
    let k2 = riccati_rhs(f, &(w + &k1 * (0.5 * dt)));
    let k3 = riccati_rhs(f, &(w + &k2 * (0.5 * dt)));
    let k4 = riccati_rhs(f, &(w + &k3 * dt));
    let w_next = symmetrize(&(w + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)));

    let v = &state.v;
    let v_noise = -(w * &f.sigma + &f.sf_bdot);
    let v_next = v + &v_noise * dytilde + v_drift(f, w, v) * dt;

    let u_noise = -(f.sigma.tr_mul(v) + &f.sf_b0);
    let mut u_next = state.u + u_noise.dot(dytilde) + u_drift(f, w, v) * dt;
    if scheme == NoiseScheme::Milstein {
        let c = f.sigma.transpose() * (w * &f.sigma + &f.sf_bdot);
        for k in 0..dytilde.len() {
            for l in 0..dytilde.len() {
                let iterated = dytilde[k] * dytilde[l] - if k == l { dt } else { 0.0 };
                u_next += 0.5 * c[(k, l)] * iterated;
            }
        }
    }

    let t = state.t + dt;
    if !w_next.iter().all(|x| x.is_finite()) || w_next.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite { t });
    }
    Ok(RiccatiState { w: w_next, v: v_next, u: u_next, t })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterRun {
    pub states: Vec<RiccatiState>,
    pub estimates: Vec<FilterEstimate>,
}

impl FilterRun {
    /// Empirical `(λ_min, λ_max, ε₁)` of `W` over the run, with
    /// `ε₁ = min(λ_min, 1/λ_max)`.
    pub fn psd_band(&self) -> (f64, f64, f64) {
        psd_band(&self.states)
    }

    pub fn max_asymmetry(&self) -> f64 {
        self.states.iter().map(|s| max_asymmetry(&s.w)).fold(0.0, f64::max)
    }
}

pub fn psd_band(states: &[RiccatiState]) -> (f64, f64, f64) {
    let (lo, hi) = states.iter().map(|s| eigen_range(&s.w)).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (l, h)| (a.min(l), b.max(h)));
    (lo, hi, lo.min(1.0 / hi))
}

/// Runs the Riccati system along `path`; step `k` uses only data up to `t_k`.
pub fn run_filter(spec: &ModelSpec, path: &PathBundle, q0: &QuadraticForm) -> Result<FilterRun> {
    run_filter_with(spec, path, q0, NoiseScheme::EulerMaruyama)
}

pub fn run_filter_with(spec: &ModelSpec, path: &PathBundle, q0: &QuadraticForm, scheme: NoiseScheme) -> Result<FilterRun> {
    if q0.dim() != spec.d {
        return Err(Error::Dimension("initial quadratic form dimension".into()));
    }
    if !q0.is_positive_definite() {
        return Err(Error::NotPositiveDefinite { t: 0.0 });
    }
    let mut states = Vec::with_capacity(path.times.len());
    states.push(RiccatiState::from_form(q0, path.times[0]));
    for k in 0..path.n_steps() {
        let f = derived_at(spec, path.times[k], &path.y(k))?;
        let next = step_riccati_with(&states[k], &f, &path.dytilde[k], path.dt(k), scheme)?;
        // keep the time stamps identical to the path grid
        states.push(RiccatiState { t: path.times[k + 1], ..next });
    }
    let estimates = states.iter().map(FilterEstimate::from_state).collect::<Result<Vec<_>>>()?;
    Ok(FilterRun { states, estimates })
}

fn check_grid(path: &PathBundle, states: &[RiccatiState]) -> Result<()> {
    if states.len() != path.times.len() || states.iter().zip(&path.times).any(|(s, t)| s.t != *t) {
        return Err(Error::GridMismatch("states are not on the path grid".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QResidual {
    /// Cumulative `Q_t(x) − Q_0(x) − ∫ dQ` with the right side discretized
    /// at left endpoints.
    pub q: Vec<f64>,
    /// Same for `η = e^{-Q}` against `Λ*η dỹ + L*η dt`.
    pub eta: Vec<f64>,
    pub max_q: f64,
    pub max_eta: f64,
}

/// Residual of the stochastic differential of `Q_t(x)` and of `e^{-Q_t(x)}`.
pub fn q_sde_residual(spec: &ModelSpec, path: &PathBundle, states: &[RiccatiState], x: &DVector<f64>) -> Result<QResidual> {
    check_grid(path, states)?;
    let n = path.n_steps();
    let mut q_res = vec![0.0];
    let mut eta_res = vec![0.0];
    let (mut acc_q, mut acc_eta) = (0.0, 0.0);
    for k in 0..n {
        let f = derived_at(spec, path.times[k], &path.y(k))?;
        let form = states[k].form();
        let next = states[k + 1].form();
        let dt = path.dt(k);
        let dy = &path.dytilde[k];
        let grad = form.gradient(x);
        let b = f.drift(x);
        let sf_b = f.sf_drift(x);
        let noise_coeff = f.sigma.tr_mul(&grad) + &sf_b;
        let drift = f.a.component_mul(&form.w).sum() + f.bdot.trace() + (&f.sigma * &sf_b - &b).dot(&grad)
            - grad.dot(&(&f.ahat * &grad))
            + 0.5 * sf_b.norm_squared();
        let dq = next.value(x) - form.value(x);
        acc_q += dq - (-noise_coeff.dot(dy) + drift * dt);
        q_res.push(acc_q);

        let eta = (-form.value(x)).exp();
        let d_eta = (-next.value(x)).exp() - eta;
        let lambda_star = &noise_coeff * eta;
        let l_star = eta * (grad.dot(&(&f.a * &grad)) - f.a.component_mul(&form.w).sum() - f.bdot.trace() + b.dot(&grad));
        acc_eta += d_eta - (lambda_star.dot(dy) + l_star * dt);
        eta_res.push(acc_eta);
    }
    let max_abs = |v: &[f64]| v.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    Ok(QResidual { max_q: max_abs(&q_res), max_eta: max_abs(&eta_res), q: q_res, eta: eta_res })
}

/// `A_t = ∫[a^{ij}W^{ij} + tr ḃ − ½‖W^{1/2}σ + W^{-1/2}𝖡̇‖²]ds` with `‖u‖² = tr uuᵀ`.
pub fn a_process(spec: &ModelSpec, path: &PathBundle, states: &[RiccatiState]) -> Result<Vec<f64>> {
    check_grid(path, states)?;
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for k in 0..path.n_steps() {
        let f = derived_at(spec, path.times[k], &path.y(k))?;
        let w = &states[k].w;
        let (lo, _) = eigen_range(w);
        if !(lo > 0.0) {
            return Err(Error::NotPositiveDefinite { t: path.times[k] });
        }
        let sqrt_w = sym_fn(w, f64::sqrt);
        let inv_sqrt_w = sym_fn(w, |l| 1.0 / l.sqrt());
        let mixed = &sqrt_w * &f.sigma + &inv_sqrt_w * &f.sf_bdot;
        let integrand = f.a.component_mul(w).sum() + f.bdot.trace() - 0.5 * (&mixed * mixed.transpose()).trace();
        acc += integrand * path.dt(k);
        out.push(acc);
    }
    Ok(out)
}

/// `Q_t(x)` minus its completed-square decomposition
/// `½|W^{1/2}x + W^{-1/2}V|² + ∫(VᵀW⁻¹𝖡̇ − 𝖡(0)ᵀ)dỹ + ½∫|𝖡̇ᵀW⁻¹V − 𝖡(0)|²ds + A_t + c₀`,
/// where `c₀ = U_0 − ½V_0ᵀW_0⁻¹V_0` is the initial offset.
pub fn completed_square_gap(spec: &ModelSpec, path: &PathBundle, states: &[RiccatiState], x: &DVector<f64>) -> Result<Vec<f64>> {
    let a = a_process(spec, path, states)?;
    let square = |s: &RiccatiState| -> Result<(f64, DVector<f64>)> {
        let winv_v = spd_solve(&s.w, &s.v).ok_or(Error::NotPositiveDefinite { t: s.t })?;
        // ½|W^{1/2}x + W^{-1/2}V|² = ½xᵀWx + Vᵀx + ½VᵀW⁻¹V
        Ok((0.5 * x.dot(&(&s.w * x)) + s.v.dot(x) + 0.5 * s.v.dot(&winv_v), winv_v))
    };
    let (sq0, winv_v0) = square(&states[0])?;
    let c0 = states[0].u - 0.5 * states[0].v.dot(&winv_v0);
    let mut gaps = vec![states[0].form().value(x) - (sq0 + c0)];
    let mut integrals = 0.0;
    for k in 0..path.n_steps() {
        let f = derived_at(spec, path.times[k], &path.y(k))?;
        let (_, winv_v) = square(&states[k])?;
        let eta = f.sf_bdot.tr_mul(&winv_v) - &f.sf_b0;
        integrals += eta.dot(&path.dytilde[k]) + 0.5 * eta.norm_squared() * path.dt(k);
        let (sq, _) = square(&states[k + 1])?;
        gaps.push(states[k + 1].form().value(x) - (sq + integrals + a[k + 1] + c0));
    }
    Ok(gaps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_fields(sigma: f64, bdot: f64, sf_bdot: f64, ahat: f64) -> DerivedFields {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        DerivedFields {
            a: s(ahat + 0.5 * sigma * sigma),
            alpha: s(0.5 * sigma * sigma),
            ahat: s(ahat),
            sigma: s(sigma),
            psi: s(1.0),
            phi: s(1.0),
            sf_bdot: s(sf_bdot),
            acheck: DMatrix::identity(2, 2) * 0.5,
            bdot: s(bdot),
            b0: DVector::zeros(1),
            sf_b0: DVector::zeros(1),
        }
    }

    fn integrate_w(f: &DerivedFields, w0: f64, dt: f64, horizon: f64) -> f64 {
        let mut s = RiccatiState { w: DMatrix::from_element(1, 1, w0), v: DVector::zeros(1), u: 0.0, t: 0.0 };
        let dy = DVector::zeros(1);
        for _ in 0..(horizon / dt).round() as usize {
            s = step_riccati(&s, f, &dy, dt).unwrap();
        }
        s.w[(0, 0)]
    }

    #[test]
    fn zero_step_is_identity() {
        let f = scalar_fields(0.3, -1.0, 1.0, 0.5);
        let s = RiccatiState { w: DMatrix::from_element(1, 1, 1.3), v: DVector::from_element(1, 0.2), u: 0.1, t: 0.0 };
        let next = step_riccati(&s, &f, &DVector::zeros(1), 0.0).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn pure_decay_matches_closed_form() {
        // W' = −W², W(1) = 1/(1+1)
        let f = scalar_fields(0.0, 0.0, 0.0, 0.5);
        assert!((integrate_w(&f, 1.0, 1e-4, 1.0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn stable_algebraic_root() {
        // W' = 2W − W² + 1 → 1 + √2
        let f = scalar_fields(0.0, -1.0, 1.0, 0.5);
        assert!((integrate_w(&f, 1.0, 1e-3, 20.0) - (1.0 + 2f64.sqrt())).abs() < 1e-6);
    }

    #[test]
    fn linear_solve_estimate() {
        let s = RiccatiState { w: DMatrix::from_element(1, 1, 2.0), v: DVector::from_element(1, -2.0), u: 0.0, t: 0.0 };
        let e = FilterEstimate::from_state(&s).unwrap();
        assert_relative_eq!(e.xbar[0], 1.0);
        assert_relative_eq!(e.sigma[(0, 0)], 0.5);
    }

    #[test]
    fn eval_q_examples() {
        let q = QuadraticForm::new(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, 1.0), 3.0).unwrap();
        let (v, g, eta) = eval_q(&q, &DVector::from_element(1, 2.0));
        assert_relative_eq!(v, 9.0);
        assert_relative_eq!(g[0], 5.0);
        assert_relative_eq!(eta, (-9.0f64).exp());
        let (v0, g0, _) = eval_q(&q, &DVector::zeros(1));
        assert_relative_eq!(v0, 3.0);
        assert_relative_eq!(g0[0], 1.0);
    }

    #[test]
    fn gradient_matches_central_difference() {
        let q = QuadraticForm::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            DVector::from_vec(vec![0.5, -1.0]),
            0.2,
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.7, -0.4]);
        let g = q.gradient(&x);
        let mut errs = Vec::new();
        for h in [1e-2, 5e-3] {
            let mut e: f64 = 0.0;
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                e = e.max(((q.value(&xp) - q.value(&xm)) / (2.0 * h) - g[i]).abs());
            }
            errs.push(e);
        }
        // exact for quadratics up to roundoff
        assert!(errs.iter().all(|e| *e < 1e-9));
    }

    #[test]
    fn gaussian_density_form_normalizes() {
        let q = QuadraticForm::gaussian_density(&DVector::from_element(1, 0.0), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_relative_eq!(q.u, 0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn non_pd_initial_form_rejected() {
        let spec = ModelSpec::classic_scalar(1.0);
        let path = crate::sde::simulate_path(&spec, &DVector::zeros(2), &crate::sde::SimulationOptions::new(0.1, 1.0), 1, 0).unwrap();
        let q0 = QuadraticForm::isotropic(1, -1.0);
        assert!(matches!(run_filter(&spec, &path, &q0), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn norm_term_vanishes_example() {
        // a = â = ½, W ≡ 1, ḃ = 0, σ = 0, 𝖡̇ = 1: integrand ½ − ½ = 0.
        let f = scalar_fields(0.0, 0.0, 1.0, 0.5);
        let w = DMatrix::from_element(1, 1, 1.0);
        let mixed = sym_fn(&w, f64::sqrt) * &f.sigma + sym_fn(&w, |l| 1.0 / l.sqrt()) * &f.sf_bdot;
        let integrand = f.a.component_mul(&w).sum() + f.bdot.trace() - 0.5 * (&mixed * mixed.transpose()).trace();
        assert_relative_eq!(integrand, 0.0, epsilon = 1e-15);
    }
}
