//! Weighted-particle reference filter for uncorrelated noise, and the
//! three-way comparison table (closed form, grid, particles).
//!
//! Particles follow the signal dynamics with fresh noise; the weight of a
//! particle is `exp(Σ 𝖡·Δỹ − ½|𝖡|²Δt)` accumulated in the log domain.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::model::{derived_at, ModelSpec};
use crate::riccati::{FilterEstimate, FilterRun};
use crate::sde::{path_seed, PathBundle};
use crate::zakai::{closed_form_density, normalized_l1, DensityRun};

pub const DEFAULT_RESAMPLE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 200;
/// Particles per work unit. Fixed so that results do not depend on the thread count.
pub const CHUNK: usize = 4096;
/// `|σ|` above this is treated as correlated noise.
pub const SIGMA_TOL: f64 = 1e-12;

const STREAM_INIT: u64 = 0;
const STREAM_PROPAGATE: u64 = 1;
const STREAM_RESAMPLE: u64 = 2;
const STREAM_BOOTSTRAP: u64 = 3;

/// Independent stream per `(purpose, step, chunk)`.
fn chunk_rng(seed: u64, purpose: u64, step: usize, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(path_seed(seed, chunk));
    rng.set_stream(((step as u64) << 2) | purpose);
    rng
}

/// Weighted sample at one time. Positions are stored row-major, `N × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub d: usize,
    pub positions: Vec<f64>,
    pub logweights: Vec<f64>,
    pub t: f64,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.logweights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logweights.is_empty()
    }

    pub fn position(&self, k: usize) -> &[f64] {
        &self.positions[k * self.d..(k + 1) * self.d]
    }

    fn max_logweight(&self) -> f64 {
        self.logweights.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `exp(ℓ_k − max ℓ)`.
    pub fn relative_weights(&self) -> Vec<f64> {
        let top = self.max_logweight();
        self.logweights.iter().map(|l| (l - top).exp()).collect()
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let w = self.relative_weights();
        let total = pairwise_sum(&w);
        w.into_iter().map(|v| v / total).collect()
    }

    /// `(Σw)² / Σw²`.
    pub fn ess(&self) -> f64 {
        let w = self.relative_weights();
        let s = pairwise_sum(&w);
        let s2 = pairwise_sum(&w.iter().map(|v| v * v).collect::<Vec<_>>());
        s * s / s2
    }

    pub fn log_weight_spread(&self) -> f64 {
        let lo = self.logweights.iter().cloned().fold(f64::INFINITY, f64::min);
        self.max_logweight() - lo
    }

    /// `log Σ_k w_k / N`, the particle estimate of `log ∫π̄` when the initial weights are zero.
    pub fn log_mass(&self) -> f64 {
        let w = self.relative_weights();
        self.max_logweight() + (pairwise_sum(&w) / self.len() as f64).ln()
    }

    /// `Σ w_k f(x_k) / Σ w_k`.
    pub fn estimate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let w = self.relative_weights();
        let num: Vec<f64> = w.iter().enumerate().map(|(k, wk)| wk * f(self.position(k))).collect();
        pairwise_sum(&num) / pairwise_sum(&w)
    }

    pub fn mean(&self) -> DVector<f64> {
        let w = self.normalized_weights();
        DVector::from_fn(self.d, |i, _| {
            pairwise_sum(&w.iter().enumerate().map(|(k, wk)| wk * self.positions[k * self.d + i]).collect::<Vec<_>>())
        })
    }

    pub fn cov(&self) -> DMatrix<f64> {
        let w = self.normalized_weights();
        let mu = self.mean();
        let d = self.d;
        let mut c = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let terms: Vec<f64> = w
                    .iter()
                    .enumerate()
                    .map(|(k, wk)| wk * (self.positions[k * d + i] - mu[i]) * (self.positions[k * d + j] - mu[j]))
                    .collect();
                c[(i, j)] = pairwise_sum(&terms);
                c[(j, i)] = c[(i, j)];
            }
        }
        c
    }

    /// Standard error of the weighted mean: pairs `(w_k, x_k)` are redrawn
    /// uniformly with replacement and the ratio estimator recomputed.
    pub fn bootstrap_stderr(&self, replicates: usize, seed: u64) -> Result<DVector<f64>> {
        if replicates < 2 {
            return Err(Error::InvalidArgument("bootstrap needs at least 2 replicates".into()));
        }
        let n = self.len();
        let d = self.d;
        let w = self.relative_weights();
        let means: Vec<DVector<f64>> = (0..replicates)
            .into_par_iter()
            .map(|r| {
                let mut rng = chunk_rng(seed, STREAM_BOOTSTRAP, 0, r);
                let mut num = vec![0.0; d];
                let mut den = 0.0;
                for _ in 0..n {
                    let k = rng.random_range(0..n);
                    den += w[k];
                    for i in 0..d {
                        num[i] += w[k] * self.positions[k * d + i];
                    }
                }
                DVector::from_iterator(d, num.into_iter().map(|v| v / den))
            })
            .collect();
        let centre = means.iter().fold(DVector::zeros(d), |acc, m| acc + m) / replicates as f64;
        let var = means.iter().fold(DVector::zeros(d), |acc, m| {
            let e = m - &centre;
            acc + e.component_mul(&e)
        }) / (replicates - 1) as f64;
        Ok(var.map(f64::sqrt))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParticleInit {
    Gaussian { mean: DVector<f64>, cov: DMatrix<f64> },
    /// Exactly one particle per point.
    Points { points: Vec<DVector<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleOptions {
    pub n: usize,
    pub seed: u64,
    /// Resample when `N_eff < threshold·N`. Zero disables resampling.
    pub threshold: f64,
    pub init: ParticleInit,
    /// Grid steps at which the ensemble is kept. Step 0 and the last step are always kept.
    pub record_steps: Vec<usize>,
}

impl ParticleOptions {
    pub fn new(n: usize, seed: u64, init: ParticleInit) -> Self {
        ParticleOptions { n, seed, threshold: DEFAULT_RESAMPLE_THRESHOLD, init, record_steps: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleRun {
    pub times: Vec<f64>,
    pub ensembles: Vec<ParticleEnsemble>,
    /// Step index of each stored ensemble.
    pub record_steps: Vec<usize>,
    /// `N_eff` at every grid time, before resampling.
    pub ess: Vec<f64>,
    pub log_weight_spread: Vec<f64>,
    pub resample_steps: Vec<usize>,
    pub seed: u64,
}

impl ParticleRun {
    pub fn ensemble_at(&self, t: f64) -> Option<&ParticleEnsemble> {
        self.ensembles.iter().find(|e| same_time(e.t, t))
    }

    pub fn last(&self) -> &ParticleEnsemble {
        self.ensembles.last().expect("run stores at least one ensemble")
    }
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Log-weight increment `𝖡·Δỹ − ½|𝖡|²Δt` for one particle.
pub fn log_weight_increment(sf_b: &[f64], dytilde: &[f64], dt: f64) -> f64 {
    let mut dot = 0.0;
    let mut sq = 0.0;
    for (b, dy) in sf_b.iter().zip(dytilde) {
        dot += b * dy;
        sq += b * b;
    }
    dot - 0.5 * sq * dt
}

fn initial_positions(init: &ParticleInit, d: usize, n: usize, seed: u64) -> Result<Vec<f64>> {
    match init {
        ParticleInit::Points { points } => {
            if points.len() != n {
                return Err(Error::InvalidArgument(format!("{} initial points for {n} particles", points.len())));
            }
            let mut out = Vec::with_capacity(n * d);
            for p in points {
                if p.len() != d {
                    return Err(Error::Dimension(format!("initial point has length {}, expected {d}", p.len())));
                }
                out.extend(p.iter());
            }
            Ok(out)
        }
        ParticleInit::Gaussian { mean, cov } => {
            if mean.len() != d || cov.shape() != (d, d) {
                return Err(Error::Dimension("initial Gaussian does not match the signal dimension".into()));
            }
            let l = cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::InvalidArgument("initial covariance is not positive definite".into()))?
                .l();
            let mut out = vec![0.0; n * d];
            out.par_chunks_mut(CHUNK * d).enumerate().for_each(|(c, block)| {
                let mut rng = chunk_rng(seed, STREAM_INIT, 0, c);
                let mut z = vec![0.0; d];
                for p in block.chunks_mut(d) {
                    for zi in z.iter_mut() {
                        *zi = StandardNormal.sample(&mut rng);
                    }
                    for i in 0..d {
                        p[i] = mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>();
                    }
                }
            });
            Ok(out)
        }
    }
}

/// Multinomial resampling from sorted uniforms (normalized exponential
/// spacings). Afterwards every particle carries the mean weight, so the
/// total weight is unchanged.
fn resample(ens: &mut ParticleEnsemble, seed: u64, step: usize) {
    let n = ens.len();
    let d = ens.d;
    let w = ens.relative_weights();
    let total = pairwise_sum(&w);
    let log_mean = ens.max_logweight() + (total / n as f64).ln();
    let mut rng = chunk_rng(seed, STREAM_RESAMPLE, step, 0);
    let spacings: Vec<f64> = (0..=n).map(|_| Exp1.sample(&mut rng)).collect();
    let scale = total / spacings.iter().sum::<f64>();
    let mut positions = Vec::with_capacity(n * d);
    let mut k = 0;
    let mut cum = w[0];
    let mut u = 0.0;
    for e in spacings.iter().take(n) {
        u += e * scale;
        while u > cum && k + 1 < n {
            k += 1;
            cum += w[k];
        }
        positions.extend_from_slice(&ens.positions[k * d..(k + 1) * d]);
    }
    ens.positions = positions;
    ens.logweights = vec![log_mean; n];
}

/// Runs the weighted-particle filter along `path`. The model must have
/// `σ = θΘᵀΨ ≡ 0` on the path; coefficients are evaluated once per step
/// since they depend on `(t, y)` only.
pub fn particle_filter(spec: &ModelSpec, path: &PathBundle, opts: &ParticleOptions) -> Result<ParticleRun> {
    let (d, m) = (spec.d, spec.m);
    let n = opts.n;
    if n == 0 {
        return Err(Error::InvalidArgument("particle count must be positive".into()));
    }
    if !(0.0..=1.0).contains(&opts.threshold) {
        return Err(Error::InvalidArgument(format!("resample threshold {} outside [0, 1]", opts.threshold)));
    }
    let steps = path.n_steps();
    if let Some(s) = opts.record_steps.iter().find(|s| **s > steps) {
        return Err(Error::GridMismatch(format!("record step {s} beyond the {steps} path steps")));
    }
    let mut ens = ParticleEnsemble {
        d,
        positions: initial_positions(&opts.init, d, n, opts.seed)?,
        logweights: vec![0.0; n],
        t: path.times[0],
    };
    let keep = |k: usize| k == 0 || k == steps || opts.record_steps.contains(&k);
    let mut run = ParticleRun {
        times: path.times.clone(),
        ensembles: Vec::new(),
        record_steps: Vec::new(),
        ess: Vec::with_capacity(steps + 1),
        log_weight_spread: Vec::with_capacity(steps + 1),
        resample_steps: Vec::new(),
        seed: opts.seed,
    };
    run.ess.push(ens.ess());
    run.log_weight_spread.push(ens.log_weight_spread());
    run.ensembles.push(ens.clone());
    run.record_steps.push(0);

    for k in 0..steps {
        let t = path.times[k];
        let dt = path.dt(k);
        let y = path.y(k);
        let f = derived_at(spec, t, &y)?;
        let sigma_norm = f.sigma.norm();
        if sigma_norm > SIGMA_TOL {
            return Err(Error::CorrelatedNoise { t, norm: sigma_norm });
        }
        let theta = spec.theta.eval(t, &y);
        let dw = theta.ncols();
        let sqdt = dt.sqrt();
        let dy = path.dytilde[k].as_slice();
        let (bdot, b0, sf_bdot, sf_b0) = (&f.bdot, &f.b0, &f.sf_bdot, &f.sf_b0);

        ens.positions
            .par_chunks_mut(CHUNK * d)
            .zip(ens.logweights.par_chunks_mut(CHUNK))
            .enumerate()
            .for_each(|(c, (block, lw))| {
                let mut rng = chunk_rng(opts.seed, STREAM_PROPAGATE, k, c);
                let mut sb = vec![0.0; m];
                let mut xi = vec![0.0; dw];
                let mut drift = vec![0.0; d];
                for (x, l) in block.chunks_mut(d).zip(lw.iter_mut()) {
                    for j in 0..m {
                        sb[j] = sf_b0[j] + (0..d).map(|i| sf_bdot[(i, j)] * x[i]).sum::<f64>();
                    }
                    *l += log_weight_increment(&sb, dy, dt);
                    for i in 0..d {
                        drift[i] = b0[i] + (0..d).map(|r| bdot[(r, i)] * x[r]).sum::<f64>();
                    }
                    for v in xi.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                    for i in 0..d {
                        x[i] += drift[i] * dt + sqdt * (0..dw).map(|r| theta[(i, r)] * xi[r]).sum::<f64>();
                    }
                }
            });
        ens.t = path.times[k + 1];
        if ens.logweights.iter().any(|l| !l.is_finite()) || ens.positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteExponent { step: k });
        }
        let ess = ens.ess();
        run.ess.push(ess);
        run.log_weight_spread.push(ens.log_weight_spread());
        if keep(k + 1) {
            run.ensembles.push(ens.clone());
            run.record_steps.push(k + 1);
        }
        if ess < opts.threshold * n as f64 {
            resample(&mut ens, opts.seed, k + 1);
            run.resample_steps.push(k + 1);
        }
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClosedForm,
    Grid,
    Particle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ClosedForm => "closed_form",
            Method::Grid => "grid",
            Method::Particle => "particle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    /// Particle rows pass when every mean component is within this many bootstrap stderrs.
    pub particle_sigmas: f64,
    /// Absolute tolerance on grid mean components.
    pub grid_mean_tol: f64,
    pub bootstrap_replicates: usize,
    pub bootstrap_seed: u64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            particle_sigmas: 3.0,
            grid_mean_tol: 1e-2,
            bootstrap_replicates: DEFAULT_BOOTSTRAP_REPLICATES,
            bootstrap_seed: 0,
        }
    }
}

/// One method at one time. Gaps are `mean − closed-form mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub t: f64,
    pub method: Method,
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
    pub mean_gap: Vec<f64>,
    pub tolerance: Vec<f64>,
    pub within: bool,
    /// `max_i |mean_i − grid mean_i|` on the particle row when both exist.
    pub grid_particle_gap: Option<f64>,
    /// Normalized L¹ distance to the closed-form density (grid rows).
    pub l1_closed_form: Option<f64>,
    pub stderr: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub d: usize,
    pub rows: Vec<ComparisonRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

impl ComparisonTable {
    pub fn all_within(&self) -> bool {
        self.rows.iter().all(|r| r.within)
    }

    pub fn csv_header(d: usize) -> String {
        let mut cols = vec!["t".to_string(), "method".to_string()];
        cols.extend((1..=d).map(|i| format!("mean{i}")));
        for i in 1..=d {
            cols.extend((1..=d).map(|j| format!("cov{i}{j}")));
        }
        cols.extend((1..=d).map(|i| format!("gap{i}")));
        cols.extend((1..=d).map(|i| format!("tol{i}")));
        cols.extend(["within", "grid_particle_gap", "l1_closed_form"].map(String::from));
        cols.extend((1..=d).map(|i| format!("stderr{i}")));
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header(self.d);
        out.push('\n');
        for r in &self.rows {
            let mut cells = vec![format!("{:.12e}", r.t), r.method.name().to_string()];
            cells.extend(r.mean.iter().chain(&r.cov).chain(&r.mean_gap).chain(&r.tolerance).map(|v| format!("{v:.12e}")));
            cells.push(r.within.to_string());
            cells.push(fmt_opt(r.grid_particle_gap));
            cells.push(fmt_opt(r.l1_closed_form));
            match &r.stderr {
                Some(se) => cells.extend(se.iter().map(|v| format!("{v:.12e}"))),
                None => cells.extend(std::iter::repeat_n(String::new(), self.d)),
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Tabulates closed-form, grid and particle moments at `times`. Every run
/// must live on the path's grid and every requested time must be a stored
/// time of every supplied run.
pub fn compare_filters(
    spec: &ModelSpec,
    path: &PathBundle,
    filter: &FilterRun,
    grid: Option<&DensityRun>,
    particles: Option<&ParticleRun>,
    times: &[f64],
    opts: &CompareOptions,
) -> Result<ComparisonTable> {
    let d = spec.d;
    if filter.states.len() != path.times.len() || filter.states.iter().zip(&path.times).any(|(s, t)| !same_time(s.t, *t)) {
        return Err(Error::GridMismatch("filter run is not on the path grid".into()));
    }
    if let Some(g) = grid {
        if !path.same_grid(&g.times) {
            return Err(Error::GridMismatch("grid run is not on the path grid".into()));
        }
    }
    if let Some(p) = particles {
        if !path.same_grid(&p.times) {
            return Err(Error::GridMismatch("particle run is not on the path grid".into()));
        }
    }
    let mut rows = Vec::new();
    for &t in times {
        let step = path
            .times
            .iter()
            .position(|s| same_time(*s, t))
            .ok_or_else(|| Error::GridMismatch(format!("t={t} is not a path time")))?;
        let est = &filter.estimates[step];
        let cf_mean = est.xbar.clone();
        rows.push(ComparisonRow {
            t,
            method: Method::ClosedForm,
            mean: cf_mean.as_slice().to_vec(),
            cov: row_major(&est.sigma),
            mean_gap: vec![0.0; d],
            tolerance: vec![0.0; d],
            within: true,
            grid_particle_gap: None,
            l1_closed_form: None,
            stderr: None,
        });
        let mut grid_mean = None;
        if let Some(g) = grid {
            let snap = g
                .snapshot_at(step)
                .ok_or_else(|| Error::GridMismatch(format!("grid run has no snapshot at t={t}")))?;
            let mom = snap.moments()?;
            let gap = &mom.mean - &cf_mean;
            let l1 = normalized_l1(snap, &closed_form_density(&snap.geom, est)?)?;
            rows.push(ComparisonRow {
                t,
                method: Method::Grid,
                mean: mom.mean.as_slice().to_vec(),
                cov: row_major(&mom.cov),
                mean_gap: gap.as_slice().to_vec(),
                tolerance: vec![opts.grid_mean_tol; d],
                within: gap.iter().all(|g| g.abs() <= opts.grid_mean_tol),
                grid_particle_gap: None,
                l1_closed_form: Some(l1),
                stderr: None,
            });
            grid_mean = Some(mom.mean);
        }
        if let Some(p) = particles {
            let ens = p
                .ensemble_at(t)
                .ok_or_else(|| Error::GridMismatch(format!("particle run has no ensemble at t={t}")))?;
            let mean = ens.mean();
            let se = ens.bootstrap_stderr(opts.bootstrap_replicates, opts.bootstrap_seed.wrapping_add(step as u64))?;
            let gap = &mean - &cf_mean;
            let tol = &se * opts.particle_sigmas;
            rows.push(ComparisonRow {
                t,
                method: Method::Particle,
                mean: mean.as_slice().to_vec(),
                cov: row_major(&ens.cov()),
                mean_gap: gap.as_slice().to_vec(),
                tolerance: tol.as_slice().to_vec(),
                within: gap.iter().zip(tol.iter()).all(|(g, s)| g.abs() <= *s),
                grid_particle_gap: grid_mean.as_ref().map(|gm| (&mean - gm).amax()),
                l1_closed_form: None,
                stderr: Some(se.as_slice().to_vec()),
            });
        }
    }
    Ok(ComparisonTable { d, rows })
}

/// Closed-form estimate at `t` from a filter run on `path`.
pub fn closed_form_at<'a>(path: &PathBundle, filter: &'a FilterRun, t: f64) -> Result<&'a FilterEstimate> {
    path.times
        .iter()
        .position(|s| same_time(*s, t))
        .and_then(|k| filter.estimates.get(k))
        .ok_or_else(|| Error::GridMismatch(format!("t={t} is not a path time")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::{run_filter, QuadraticForm};
    use crate::scenarios::correlated_scalar;
    use crate::sde::{simulate_path, SimulationOptions};

    fn classic_path(seed: u64) -> (ModelSpec, PathBundle) {
        let spec = ModelSpec::classic_scalar(1.0);
        let path = simulate_path(&spec, &DVector::from_vec(vec![0.5, 0.0]), &SimulationOptions::new(1e-2, 1.0), seed, 0).unwrap();
        (spec, path)
    }

    fn unit_prior() -> ParticleInit {
        ParticleInit::Gaussian { mean: DVector::zeros(1), cov: DMatrix::identity(1, 1) }
    }

    #[test]
    fn uninformative_observation_keeps_equal_weights() {
        let spec = ModelSpec::scalar_constant([1.0, 0.0], [0.0, 1.0], -1.0, 0.0, 0.0, 0.0, 1.0);
        let path = simulate_path(&spec, &DVector::from_vec(vec![0.5, 0.0]), &SimulationOptions::new(1e-2, 1.0), 4, 0).unwrap();
        let run = particle_filter(&spec, &path, &ParticleOptions::new(2000, 9, unit_prior())).unwrap();
        let last = run.last();
        assert!(last.logweights.iter().all(|l| *l == 0.0));
        assert_eq!(last.ess(), 2000.0);
        assert!(run.resample_steps.is_empty());
        let plain = last.positions.iter().sum::<f64>() / 2000.0;
        assert!((last.mean()[0] - plain).abs() < 1e-12);
    }

    #[test]
    fn constant_function_estimates_one() {
        let (spec, path) = classic_path(1);
        let run = particle_filter(&spec, &path, &ParticleOptions::new(5000, 2, unit_prior())).unwrap();
        for e in &run.ensembles {
            assert!((e.estimate(|_| 1.0) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn correlated_noise_rejected() {
        let spec = correlated_scalar(1.0);
        let path = simulate_path(&spec, &DVector::from_vec(vec![0.0, 0.0]), &SimulationOptions::new(1e-2, 1.0), 1, 0).unwrap();
        let err = particle_filter(&spec, &path, &ParticleOptions::new(100, 1, unit_prior())).unwrap_err();
        assert!(matches!(err, Error::CorrelatedNoise { .. }));
    }

    #[test]
    fn weight_telescoping() {
        let (spec, path) = classic_path(3);
        let f = derived_at(&spec, 0.0, &DVector::zeros(1)).unwrap();
        let x = 0.7;
        let mut product = 1.0;
        let mut exponent = 0.0;
        for k in 0..path.n_steps() {
            let sb = [f.sf_bdot[(0, 0)] * x + f.sf_b0[0]];
            let inc = log_weight_increment(&sb, path.dytilde[k].as_slice(), path.dt(k));
            product *= inc.exp();
            exponent += inc;
        }
        assert!((product / exponent.exp() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn deterministic_given_seed() {
        let (spec, path) = classic_path(5);
        let mut o = ParticleOptions::new(10_000, 11, unit_prior());
        o.record_steps = vec![50];
        let a = particle_filter(&spec, &path, &o).unwrap();
        let b = particle_filter(&spec, &path, &o).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.record_steps, vec![0, 50, 100]);
    }

    #[test]
    fn thread_count_independent() {
        let (spec, path) = classic_path(6);
        let o = ParticleOptions::new(3 * CHUNK + 17, 4, unit_prior());
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| particle_filter(&spec, &path, &o)).unwrap();
        let b = three.install(|| particle_filter(&spec, &path, &o)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resampling_preserves_total_weight() {
        let mut ens = ParticleEnsemble {
            d: 1,
            positions: (0..1000).map(|k| k as f64 / 1000.0).collect(),
            logweights: (0..1000).map(|k| -((k as f64 - 300.0) / 50.0).powi(2)).collect(),
            t: 0.0,
        };
        let before = ens.log_mass();
        resample(&mut ens, 1, 1);
        assert!((ens.log_mass() - before).abs() < 1e-12);
        assert_eq!(ens.ess(), 1000.0);
        assert!((ens.mean()[0] - 0.3).abs() < 0.01);
    }

    #[test]
    fn resampling_unbiased_over_seeds() {
        let base = ParticleEnsemble {
            d: 1,
            positions: (0..2000).map(|k| (k as f64 / 2000.0 * 6.0) - 3.0).collect(),
            logweights: (0..2000).map(|k| -0.5 * ((k as f64 / 2000.0 * 6.0) - 2.0).powi(2)).collect(),
            t: 0.0,
        };
        let target = base.mean()[0];
        let diffs: Vec<f64> = (0..200)
            .map(|s| {
                let mut e = base.clone();
                resample(&mut e, s, 0);
                e.mean()[0] - target
            })
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
        assert!(mean.abs() <= 3.0 * sd / (diffs.len() as f64).sqrt(), "bias {mean:e}, sd {sd:e}");
    }

    #[test]
    fn spread_grows_at_most_linearly() {
        // Frozen particles in [−1, 1] with 𝖡(x) = x: |𝖡| ≤ 1, so the spread is
        // at most 2|ỹ_t| + t.
        let spec = ModelSpec::scalar_constant([1e-12, 0.0], [0.0, 1.0], 0.0, 1.0, 0.0, 0.0, 1.0);
        let path = simulate_path(&spec, &DVector::from_vec(vec![0.5, 0.0]), &SimulationOptions::new(1e-2, 1.0), 8, 0).unwrap();
        let points = (0..201).map(|k| DVector::from_vec(vec![k as f64 / 100.0 - 1.0])).collect();
        let mut o = ParticleOptions::new(201, 3, ParticleInit::Points { points });
        o.threshold = 0.0;
        let run = particle_filter(&spec, &path, &o).unwrap();
        for (k, v) in run.log_weight_spread.iter().enumerate() {
            let bound = 2.0 * path.ytilde[k][0].abs() + path.times[k];
            assert!(*v <= bound + 1e-9, "spread {v} > {bound} at step {k}");
        }
        assert!(run.log_weight_spread[path.n_steps()] > 0.0);
    }

    #[test]
    fn comparison_on_classic_model() {
        let (spec, path) = classic_path(2);
        let q0 = QuadraticForm::gaussian_density(&DVector::zeros(1), &DMatrix::identity(1, 1)).unwrap();
        let filter = run_filter(&spec, &path, &q0).unwrap();
        let mut o = ParticleOptions::new(20_000, 8, unit_prior());
        o.record_steps = vec![50];
        let particles = particle_filter(&spec, &path, &o).unwrap();
        let table = compare_filters(&spec, &path, &filter, None, Some(&particles), &[0.5, 1.0], &CompareOptions::default()).unwrap();
        assert_eq!(table.rows.len(), 4);
        let csv = table.to_csv();
        assert!(csv.starts_with("t,method,mean1,cov11,gap1,tol1,within,grid_particle_gap,l1_closed_form,stderr1\n"));
        assert_eq!(csv.lines().count(), 5);
        let err = compare_filters(&spec, &path, &filter, None, Some(&particles), &[0.3], &CompareOptions::default()).unwrap_err();
        assert!(matches!(err, Error::GridMismatch(_)));
        let back: ComparisonTable = serde_json::from_str(&table.to_json().unwrap()).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn frozen_dynamics_all_equal_prior() {
        let spec = ModelSpec::scalar_constant([1e-12, 0.0], [0.0, 1.0], 0.0, 0.0, 0.0, 0.0, 1.0);
        let path = simulate_path(&spec, &DVector::from_vec(vec![0.0, 0.0]), &SimulationOptions::new(0.1, 1.0), 1, 0).unwrap();
        let q0 = QuadraticForm::gaussian_density(&DVector::from_vec(vec![0.25]), &DMatrix::from_element(1, 1, 0.5)).unwrap();
        let filter = run_filter(&spec, &path, &q0).unwrap();
        let init = ParticleInit::Gaussian { mean: DVector::from_vec(vec![0.25]), cov: DMatrix::from_element(1, 1, 0.5) };
        let particles = particle_filter(&spec, &path, &ParticleOptions::new(40_000, 1, init)).unwrap();
        let table = compare_filters(&spec, &path, &filter, None, Some(&particles), &[1.0], &CompareOptions::default()).unwrap();
        let cf = &table.rows[0];
        assert!((cf.mean[0] - 0.25).abs() < 1e-9 && (cf.cov[0] - 0.5).abs() < 1e-9);
        assert!(table.all_within(), "{:?}", table.rows);
    }
}
