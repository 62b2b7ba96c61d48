//! Euler–Maruyama simulation of the signal/observation system, the
//! normalized observation `ỹ = ∫Ψ dy` and innovation `w̃ = ∫ΨΘ dw`, and the
//! exponential martingales built on them.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::spd_solve;
use crate::model::{derived_at, ModelSpec};
use crate::riccati::RiccatiState;

pub const DEFAULT_BLOWUP_BOUND: f64 = 1e6;

/// Per-path seed: SplitMix64 finalizer applied to `master + (index + 1)·φ64`.
/// Each path then draws from `ChaCha8Rng::seed_from_u64(path_seed(..))`.
pub fn path_seed(master: u64, index: usize) -> u64 {
    let mut z = master.wrapping_add((index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Number of steps of size `dt` covering `horizon`; errors unless `dt` divides it.
pub fn step_count(dt: f64, horizon: f64) -> Result<usize> {
    if !(dt > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("dt={dt} and T={horizon} must be positive")));
    }
    let n = (horizon / dt).round();
    if n < 1.0 || (n * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "dt={dt} does not divide T={horizon}"
        )));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub times: Vec<f64>,
    /// Wiener increments, one per step.
    pub dw: Vec<DVector<f64>>,
    /// States `(x, y)` at every grid time.
    pub z: Vec<DVector<f64>>,
    pub ytilde: Vec<DVector<f64>>,
    pub wtilde: Vec<DVector<f64>>,
    pub dytilde: Vec<DVector<f64>>,
    pub dwtilde: Vec<DVector<f64>>,
    /// `𝖡̃ = Ψ(t,y_t) B(t,x_t,y_t)` at left endpoints.
    pub sf_b_tilde: Vec<DVector<f64>>,
    pub d: usize,
    pub seed: u64,
    pub index: usize,
}

impl PathBundle {
    pub fn n_steps(&self) -> usize {
        self.dw.len()
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    pub fn x(&self, k: usize) -> DVector<f64> {
        self.z[k].rows(0, self.d).into_owned()
    }

    pub fn y(&self, k: usize) -> DVector<f64> {
        let m = self.z[k].len() - self.d;
        self.z[k].rows(self.d, m).into_owned()
    }

    /// The path restricted to `[0, t_k]`.
    pub fn truncate(&self, k: usize) -> PathBundle {
        PathBundle {
            times: self.times[..=k].to_vec(),
            dw: self.dw[..k].to_vec(),
            z: self.z[..=k].to_vec(),
            ytilde: self.ytilde[..=k].to_vec(),
            wtilde: self.wtilde[..=k].to_vec(),
            dytilde: self.dytilde[..k].to_vec(),
            dwtilde: self.dwtilde[..k].to_vec(),
            sf_b_tilde: self.sf_b_tilde[..k].to_vec(),
            d: self.d,
            seed: self.seed,
            index: self.index,
        }
    }

    /// The same realization observed every `factor` steps: states are
    /// sampled, increments summed, `𝖡̃` taken at the new left endpoints.
    pub fn subsample(&self, factor: usize) -> Result<PathBundle> {
        let n = self.n_steps();
        if factor == 0 || !n.is_multiple_of(factor) {
            return Err(Error::InvalidArgument(format!("{n} steps cannot be grouped by {factor}")));
        }
        let pick = |v: &[DVector<f64>]| v.iter().step_by(factor).cloned().collect::<Vec<_>>();
        Ok(PathBundle {
            times: self.times.iter().step_by(factor).copied().collect(),
            dw: coarsen_increments(&self.dw, factor)?,
            z: pick(&self.z),
            ytilde: pick(&self.ytilde),
            wtilde: pick(&self.wtilde),
            dytilde: coarsen_increments(&self.dytilde, factor)?,
            dwtilde: coarsen_increments(&self.dwtilde, factor)?,
            sf_b_tilde: pick(&self.sf_b_tilde),
            d: self.d,
            seed: self.seed,
            index: self.index,
        })
    }

    /// Largest `|Δỹ − Δw̃ − 𝖡̃Δt|` over the path.
    pub fn innovation_identity_gap(&self) -> f64 {
        (0..self.n_steps())
            .map(|k| (&self.dytilde[k] - &self.dwtilde[k] - &self.sf_b_tilde[k] * self.dt(k)).amax())
            .fold(0.0, f64::max)
    }

    pub fn same_grid(&self, times: &[f64]) -> bool {
        self.times.len() == times.len() && self.times.iter().zip(times).all(|(a, b)| a == b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationOptions {
    pub dt: f64,
    pub horizon: f64,
    pub blowup_bound: f64,
}

impl SimulationOptions {
    pub fn new(dt: f64, horizon: f64) -> Self {
        SimulationOptions { dt, horizon, blowup_bound: DEFAULT_BLOWUP_BOUND }
    }
}

/// Draws `n` Wiener increments of variance `dt` from `rng`.
pub fn brownian_increments(rng: &mut ChaCha8Rng, n: usize, dim: usize, dt: f64) -> Vec<DVector<f64>> {
    let sd = dt.sqrt();
    (0..n)
        .map(|_| DVector::from_fn(dim, |_, _| { let z: f64 = StandardNormal.sample(rng); sd * z }))
        .collect()
}

/// Sums consecutive groups of `factor` increments.
pub fn coarsen_increments(dw: &[DVector<f64>], factor: usize) -> Result<Vec<DVector<f64>>> {
    if factor == 0 || !dw.len().is_multiple_of(factor) {
        return Err(Error::InvalidArgument(format!(
            "{} increments cannot be grouped by {factor}",
            dw.len()
        )));
    }
    Ok(dw
        .chunks(factor)
        .map(|c| c.iter().skip(1).fold(c[0].clone(), |acc, v| acc + v))
        .collect())
}

/// Integrates the system with the given Wiener increments on a uniform grid.
pub fn simulate_with_increments(
    spec: &ModelSpec,
    z0: &DVector<f64>,
    dt: f64,
    dw: Vec<DVector<f64>>,
    blowup_bound: f64,
    seed: u64,
    index: usize,
) -> Result<PathBundle> {
    if z0.len() != spec.d1() {
        return Err(Error::Dimension(format!("z0 has length {}, expected {}", z0.len(), spec.d1())));
    }
    let (d, m) = (spec.d, spec.m);
    let n = dw.len();
    let mut times = Vec::with_capacity(n + 1);
    let mut z = Vec::with_capacity(n + 1);
    let mut ytilde = Vec::with_capacity(n + 1);
    let mut wtilde = Vec::with_capacity(n + 1);
    let mut dytilde = Vec::with_capacity(n);
    let mut dwtilde = Vec::with_capacity(n);
    let mut sf_b_tilde = Vec::with_capacity(n);
    times.push(0.0);
    z.push(z0.clone());
    ytilde.push(DVector::zeros(m));
    wtilde.push(DVector::zeros(m));
    for (k, inc) in dw.iter().enumerate() {
        if inc.len() != spec.dw {
            return Err(Error::Dimension("Wiener increment dimension".into()));
        }
        let t = k as f64 * dt;
        let zk = &z[k];
        let x = zk.rows(0, d).into_owned();
        let y = zk.rows(d, m).into_owned();
        let f = derived_at(spec, t, &y)?;
        let b = f.drift(&x);
        let big_b = spec.obs_bdot.eval(t, &y).tr_mul(&x) + spec.obs_b0.eval_vec(t, &y);
        let theta = spec.theta.eval(t, &y);
        let obs_theta = spec.obs_theta.eval(t, &y);
        let obs_noise = &obs_theta * inc;
        let dx = &b * dt + &theta * inc;
        let dy = &big_b * dt + &obs_noise;
        let mut znext = zk.clone();
        for i in 0..d {
            znext[i] += dx[i];
        }
        for j in 0..m {
            znext[d + j] += dy[j];
        }
        let norm = znext.norm();
        if !(norm <= blowup_bound) {
            return Err(Error::BlowUp { path: index, step: k + 1, t: t + dt, norm });
        }
        let dyt = &f.psi * &dy;
        let dwt = &f.psi * &obs_noise;
        sf_b_tilde.push(&f.psi * &big_b);
        ytilde.push(&ytilde[k] + &dyt);
        wtilde.push(&wtilde[k] + &dwt);
        dytilde.push(dyt);
        dwtilde.push(dwt);
        times.push((k + 1) as f64 * dt);
        z.push(znext);
    }
    Ok(PathBundle { times, dw, z, ytilde, wtilde, dytilde, dwtilde, sf_b_tilde, d, seed, index })
}

/// Simulates one path with its own seed.
pub fn simulate_path(spec: &ModelSpec, z0: &DVector<f64>, opts: &SimulationOptions, seed: u64, index: usize) -> Result<PathBundle> {
    let n = step_count(opts.dt, opts.horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dw = brownian_increments(&mut rng, n, spec.dw, opts.dt);
    simulate_with_increments(spec, z0, opts.dt, dw, opts.blowup_bound, seed, index)
}

/// Simulates `n_paths` independent paths in parallel; path `i` uses
/// `path_seed(master_seed, i)`. Blown-up paths are reported individually.
pub fn simulate_paths(
    spec: &ModelSpec,
    z0: &DVector<f64>,
    opts: &SimulationOptions,
    master_seed: u64,
    n_paths: usize,
) -> Vec<Result<PathBundle>> {
    (0..n_paths)
        .into_par_iter()
        .map(|i| simulate_path(spec, z0, opts, path_seed(master_seed, i), i))
        .collect()
}

/// `log ρ_t(ξ, dw̃) = −Σ ξ_k·Δw̃_k − ½Σ|ξ_k|²Δt`, one value per grid time.
pub fn log_exponential_martingale(path: &PathBundle, xi: &[DVector<f64>]) -> Result<Vec<f64>> {
    if xi.len() != path.n_steps() {
        return Err(Error::GridMismatch(format!(
            "integrand has {} values for {} steps",
            xi.len(),
            path.n_steps()
        )));
    }
    let mut out = Vec::with_capacity(xi.len() + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for (k, x) in xi.iter().enumerate() {
        acc += -x.dot(&path.dwtilde[k]) - 0.5 * x.norm_squared() * path.dt(k);
        if !acc.is_finite() {
            return Err(Error::NonFiniteExponent { step: k });
        }
        out.push(acc);
    }
    Ok(out)
}

pub fn exponential_martingale(path: &PathBundle, xi: &[DVector<f64>]) -> Result<Vec<f64>> {
    Ok(log_exponential_martingale(path, xi)?.into_iter().map(f64::exp).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationCheck {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub max_rel_gap: f64,
}

/// Compares `ρ(𝖡̃, dw̃)·exp(−∫(VᵀW⁻¹𝖡̇ − 𝖡(0)ᵀ)dỹ − ½∫|𝖡̇ᵀW⁻¹V − 𝖡(0)|²ds)`
/// with `ρ(𝖡̃ − 𝖡(0) + 𝖡̇ᵀW⁻¹V, dw̃)` along one path.
pub fn martingale_factorization_check(spec: &ModelSpec, path: &PathBundle, states: &[RiccatiState]) -> Result<FactorizationCheck> {
    if states.len() != path.times.len() || states.iter().zip(&path.times).any(|(s, t)| s.t != *t) {
        return Err(Error::GridMismatch("Riccati states are not on the path grid".into()));
    }
    let n = path.n_steps();
    let mut shift = Vec::with_capacity(n);
    let mut combined = Vec::with_capacity(n);
    let mut correction = Vec::with_capacity(n + 1);
    correction.push(0.0);
    let mut acc = 0.0;
    for k in 0..n {
        let f = derived_at(spec, path.times[k], &path.y(k))?;
        let winv_v = spd_solve(&states[k].w, &states[k].v).ok_or(Error::NotPositiveDefinite { t: path.times[k] })?;
        let eta = f.sf_bdot.tr_mul(&winv_v) - &f.sf_b0;
        // −(VᵀW⁻¹𝖡̇ − 𝖡(0)ᵀ)Δỹ − ½|η|²Δt with η = 𝖡̇ᵀW⁻¹V − 𝖡(0)
        acc += -eta.dot(&path.dytilde[k]) - 0.5 * eta.norm_squared() * path.dt(k);
        correction.push(acc);
        combined.push(&path.sf_b_tilde[k] + &eta);
        shift.push(eta);
    }
    let rho = exponential_martingale(path, &path.sf_b_tilde)?;
    let lhs: Vec<f64> = rho.iter().zip(&correction).map(|(r, c)| r * c.exp()).collect();
    let rhs = exponential_martingale(path, &combined)?;
    let max_rel_gap = lhs
        .iter()
        .zip(&rhs)
        .map(|(l, r)| (l - r).abs() / r.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    Ok(FactorizationCheck { lhs, rhs, max_rel_gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn zero_noise_model() -> ModelSpec {
        // θ̌ = 0 would make ΘΘᵀ singular; freeze the signal only.
        ModelSpec::scalar_constant([0.0, 0.0], [0.0, 1.0], 0.0, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn frozen_signal_stays_put() {
        let spec = zero_noise_model();
        let z0 = DVector::from_vec(vec![0.7, 0.0]);
        let p = simulate_path(&spec, &z0, &SimulationOptions::new(0.01, 1.0), 3, 0).unwrap();
        assert!(p.z.iter().all(|z| z[0] == 0.7));
    }

    #[test]
    fn unit_transform_gives_increments_of_y() {
        let spec = ModelSpec::classic_scalar(1.0);
        let z0 = DVector::from_vec(vec![0.3, 0.5]);
        let p = simulate_path(&spec, &z0, &SimulationOptions::new(0.01, 1.0), 11, 0).unwrap();
        for k in 0..=p.n_steps() {
            assert_relative_eq!(p.ytilde[k][0], p.z[k][1] - 0.5, epsilon = 1e-12);
        }
        assert!(p.innovation_identity_gap() <= 1e-15);
    }

    #[test]
    fn dt_must_divide_horizon() {
        assert!(step_count(0.3, 1.0).is_err());
        assert_eq!(step_count(0.25, 1.0).unwrap(), 4);
        assert_eq!(step_count(1e-4, 20.0).unwrap(), 200_000);
    }

    #[test]
    fn blowup_is_reported() {
        let spec = ModelSpec::scalar_constant([1.0, 0.0], [0.0, 1.0], 50.0, 0.0, 0.0, 0.0, 10.0);
        let z0 = DVector::from_vec(vec![1.0, 0.0]);
        let r = simulate_path(&spec, &z0, &SimulationOptions::new(0.1, 10.0), 1, 4);
        assert!(matches!(r, Err(Error::BlowUp { path: 4, .. })));
    }

    #[test]
    fn constant_integrand_closed_form() {
        let spec = ModelSpec::classic_scalar(1.0);
        let p = simulate_path(&spec, &DVector::zeros(2), &SimulationOptions::new(0.01, 1.0), 5, 0).unwrap();
        let c = 0.8;
        let xi = vec![DVector::from_element(1, c); p.n_steps()];
        let rho = exponential_martingale(&p, &xi).unwrap();
        let direct = (-c * p.wtilde.last().unwrap()[0] - 0.5 * c * c * 1.0).exp();
        assert_relative_eq!(*rho.last().unwrap(), direct, max_relative = 1e-12);
        let zero = vec![DVector::zeros(1); p.n_steps()];
        assert!(exponential_martingale(&p, &zero).unwrap().iter().all(|r| *r == 1.0));
    }

    #[test]
    fn nonfinite_exponent_names_step() {
        let spec = ModelSpec::classic_scalar(1.0);
        let p = simulate_path(&spec, &DVector::zeros(2), &SimulationOptions::new(0.1, 1.0), 5, 0).unwrap();
        let mut xi = vec![DVector::zeros(1); p.n_steps()];
        xi[3][0] = f64::INFINITY;
        assert!(matches!(log_exponential_martingale(&p, &xi), Err(Error::NonFiniteExponent { step: 3 })));
    }

    #[test]
    fn coarsening_sums_groups() {
        let dw: Vec<_> = (0..6).map(|i| DVector::from_element(1, i as f64)).collect();
        let c = coarsen_increments(&dw, 3).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0][0], 3.0);
        assert_eq!(c[1][0], 12.0);
        assert!(coarsen_increments(&dw, 4).is_err());
    }

    #[test]
    fn path_seeds_are_distinct() {
        let seeds: std::collections::BTreeSet<_> = (0..1000).map(|i| path_seed(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
