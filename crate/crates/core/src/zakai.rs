//! Finite-difference solvers for the unnormalized filtering density `π̄`
//! and for its reduced form `π̂ = e^{Q}π̄` on a truncated Dirichlet box.
//!
//! Each step solves the deterministic part implicitly and then applies the
//! observation-driven part explicitly, with an optional second-order
//! correction `½Λ^kΛ^l u (Δỹ^kΔỹ^l − δ^{kl}Δt)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::grid::{
    apply_first_order, assemble_operator, central_gradient, face_fluxes, flux_divergence, implicit_solve, DensityGrid,
    DensityKind, GridGeometry, Moments, OperatorCoefficients,
};
use crate::linalg::{spd_inverse, spd_solve};
use crate::model::{derived_at, DerivedFields, ModelSpec};
use crate::riccati::{FilterEstimate, FilterRun, QuadraticForm, RiccatiState};
use crate::sde::PathBundle;

/// Largest admissible fraction of a Gaussian initial law lying outside the box.
pub const INIT_TAIL_TOL: f64 = 1e-8;
/// Mass below which a density cannot be normalized.
pub const MIN_MASS: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    Gaussian { mean: DVector<f64>, cov: DMatrix<f64> },
    ExpNegQ(QuadraticForm),
    /// `e^{Q}·π₀`, the initial value of the reduced equation.
    Reduced { q: QuadraticForm, base: Box<InitSpec> },
    /// Nodal values, boundary included.
    Table(Vec<f64>),
}

fn node_vec(geom: &GridGeometry, p: usize) -> DVector<f64> {
    geom.point_vec(p)
}

fn tail_mass(geom: &GridGeometry, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let up = geom.upper();
    (0..geom.dim)
        .map(|i| {
            let sd = cov[(i, i)].sqrt();
            let s = sd * std::f64::consts::SQRT_2;
            0.5 * erfc((mean[i] - geom.lower[i]) / s) + 0.5 * erfc((up[i] - mean[i]) / s)
        })
        .sum()
}

fn check_tail(geom: &GridGeometry, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<()> {
    let tail = tail_mass(geom, mean, cov);
    if !(tail <= INIT_TAIL_TOL) {
        return Err(Error::InvalidArgument(format!(
            "initial density not representable on the grid: mass fraction {tail:.3e} outside the box exceeds {INIT_TAIL_TOL:e}"
        )));
    }
    Ok(())
}

fn check_dim(geom: &GridGeometry, d: usize, what: &str) -> Result<()> {
    if geom.dim != d {
        return Err(Error::Dimension(format!("{what} has dimension {d}, grid has {}", geom.dim)));
    }
    Ok(())
}

/// `Q` at every node.
pub fn form_on_grid(geom: &GridGeometry, q: &QuadraticForm) -> Vec<f64> {
    (0..geom.len()).map(|p| q.value(&node_vec(geom, p))).collect()
}

fn init_values(geom: &GridGeometry, init: &InitSpec) -> Result<Vec<f64>> {
    match init {
        InitSpec::Gaussian { mean, cov } => {
            check_dim(geom, mean.len(), "initial mean")?;
            check_tail(geom, mean, cov)?;
            let q = QuadraticForm::gaussian_density(mean, cov)?;
            Ok(form_on_grid(geom, &q).into_iter().map(|v| (-v).exp()).collect())
        }
        InitSpec::ExpNegQ(q) => {
            check_dim(geom, q.dim(), "initial form")?;
            if let Some(cov) = spd_inverse(&q.w) {
                let mean = -&cov * &q.v;
                check_tail(geom, &mean, &cov)?;
            }
            Ok(form_on_grid(geom, q).into_iter().map(|v| (-v).exp()).collect())
        }
        InitSpec::Reduced { q, base } => {
            check_dim(geom, q.dim(), "reduction form")?;
            let b = init_values(geom, base)?;
            Ok(form_on_grid(geom, q).into_iter().zip(b).map(|(v, u)| v.exp() * u).collect())
        }
        InitSpec::Table(v) => {
            if v.len() != geom.len() {
                return Err(Error::Dimension(format!("table has {} values for {} nodes", v.len(), geom.len())));
            }
            Ok(v.clone())
        }
    }
}

/// Samples the initial density at the nodes and zeroes the boundary.
pub fn init_density(geom: &GridGeometry, init: &InitSpec) -> Result<DensityGrid> {
    let values = init_values(geom, init)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("initial density overflows on the grid".into()));
    }
    let kind = if matches!(init, InitSpec::Reduced { .. }) { DensityKind::PiHat } else { DensityKind::PiBar };
    let g = DensityGrid::new(geom.clone(), values, kind)?;
    let mass = g.mass();
    if !(mass > 0.0) {
        return Err(Error::NonPositiveMass { mass });
    }
    Ok(g)
}

/// Normalized `N(mean, cov)` sampled on the grid.
pub fn gaussian_on_grid(geom: &GridGeometry, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<DensityGrid> {
    check_dim(geom, mean.len(), "mean")?;
    let q = QuadraticForm::gaussian_density(mean, cov)?;
    let values = form_on_grid(geom, &q).into_iter().map(|v| (-v).exp()).collect();
    DensityGrid::new(geom.clone(), values, DensityKind::PiNormalized)
}

/// The closed-form conditional density `N(x̄, Σ)` on the grid.
pub fn closed_form_density(geom: &GridGeometry, est: &FilterEstimate) -> Result<DensityGrid> {
    gaussian_on_grid(geom, &est.xbar, &est.sigma)
}

/// Box covering `x̄_t ± n_std·√Σ_t^{ii}` over the whole run, in every direction.
pub fn box_from_filter(run: &FilterRun, n_std: f64, h: f64) -> Result<GridGeometry> {
    let d = run.estimates[0].xbar.len();
    if d > 2 {
        return Err(Error::InvalidArgument(format!("grids support d ≤ 2, got {d}")));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for e in &run.estimates {
        for i in 0..d {
            let s = n_std * e.sigma[(i, i)].sqrt();
            lo[i] = lo[i].min(e.xbar[i] - s);
            hi[i] = hi[i].max(e.xbar[i] + s);
        }
    }
    let half = (0..d).map(|i| 0.5 * (hi[i] - lo[i])).fold(0.0, f64::max);
    let center: Vec<f64> = (0..d).map(|i| 0.5 * (hi[i] + lo[i])).collect();
    GridGeometry::centered(d, &center, half, h)
}

fn arr2(m: &DMatrix<f64>) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..m.nrows().min(2) {
        for j in 0..m.ncols().min(2) {
            out[i][j] = m[(i, j)];
        }
    }
    out
}

/// `matᵀx + vec` for a d-vector `x` (d ≤ 2).
fn affine_t(mat: &DMatrix<f64>, vec: &DVector<f64>, x: &[f64]) -> DVector<f64> {
    let mut out = vec.clone();
    for k in 0..out.len() {
        for (i, xi) in x.iter().enumerate() {
            out[k] += mat[(i, k)] * xi;
        }
    }
    out
}

fn pad2(v: &DVector<f64>) -> [f64; 2] {
    [v[0], if v.len() > 1 { v[1] } else { 0.0 }]
}

/// `D_j(a^{ij}D_iu − b^ju)` with `b(x) = ḃᵀx + b₀`.
struct ZakaiOperator<'a> {
    a: [[f64; 2]; 2],
    bdot: &'a DMatrix<f64>,
    b0: &'a DVector<f64>,
}

impl OperatorCoefficients for ZakaiOperator<'_> {
    fn diffusion(&self, _x: &[f64]) -> [[f64; 2]; 2] {
        self.a
    }
    fn flux_drift(&self, x: &[f64]) -> [f64; 2] {
        let b = pad2(&affine_t(self.bdot, self.b0, x));
        [-b[0], -b[1]]
    }
}

/// `L*u = D_j(a^{ij}D_iu − b^ju)` in flux form at interior nodes.
pub fn apply_lstar(u: &DensityGrid, a: &DMatrix<f64>, bdot: &DMatrix<f64>, b0: &DVector<f64>) -> Result<Vec<f64>> {
    check_dim(&u.geom, a.nrows(), "diffusion")?;
    let op = ZakaiOperator { a: arr2(a), bdot, b0 };
    Ok(flux_divergence(&u.geom, &face_fluxes(&u.geom, &op, &u.values, None)))
}

/// `−σ^{ik}D_iu + 𝖡^k(x)u` for each `k`, where `𝖡(x) = 𝖡̇ᵀx + 𝖡₀`.
/// Pass `None` for the multiplier to get the pure transport `−σ^{ik}D_iu`.
fn lambda_star_raw(
    geom: &GridGeometry,
    sigma: &DMatrix<f64>,
    multiplier: Option<(&DMatrix<f64>, &DVector<f64>)>,
    u: &[f64],
) -> Vec<Vec<f64>> {
    (0..sigma.ncols())
        .map(|k| {
            let s = [-sigma[(0, k)], if sigma.nrows() > 1 { -sigma[(1, k)] } else { 0.0 }];
            let coeff = |_: &[f64]| s;
            let mult = |x: &[f64]| match multiplier {
                Some((m, c)) => affine_t(m, c, x)[k],
                None => 0.0,
            };
            apply_first_order(geom, &coeff, &mult, u)
        })
        .collect()
}

pub fn apply_lambdastar(
    u: &DensityGrid,
    sigma: &DMatrix<f64>,
    sf_bdot: &DMatrix<f64>,
    sf_b0: &DVector<f64>,
) -> Result<Vec<Vec<f64>>> {
    check_dim(&u.geom, sigma.nrows(), "σ")?;
    Ok(lambda_star_raw(&u.geom, sigma, Some((sf_bdot, sf_b0)), &u.values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SchemeOptions {
    /// Adds `½Λ^kΛ^l u (Δỹ^kΔỹ^l − δ^{kl}Δt)`; exact for one observation
    /// channel, a commutative approximation otherwise.
    pub milstein: bool,
}

impl Default for SchemeOptions {
    fn default() -> Self {
        SchemeOptions { milstein: true }
    }
}

fn stochastic_update(
    geom: &GridGeometry,
    u: &[f64],
    ops: &dyn Fn(&[f64]) -> Vec<Vec<f64>>,
    dy: &DVector<f64>,
    dt: f64,
    milstein: bool,
) -> Vec<f64> {
    let first = ops(u);
    let mut out = u.to_vec();
    for (k, lk) in first.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(lk) {
            *o += v * dy[k];
        }
    }
    if milstein {
        for (l, ll) in first.iter().enumerate() {
            let second = ops(ll);
            for (k, lkl) in second.iter().enumerate() {
                let w = 0.5 * (dy[k] * dy[l] - if k == l { dt } else { 0.0 });
                for (o, v) in out.iter_mut().zip(lkl) {
                    *o += w * v;
                }
            }
        }
    }
    for (p, o) in out.iter_mut().enumerate() {
        if geom.is_boundary(p) {
            *o = 0.0;
        }
    }
    out
}

fn finite_or_fail(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::SolveFailed(format!("non-finite {what} after step")))
    }
}

/// One splitting step of the Zakai equation with coefficients frozen at the left endpoint.
pub fn zakai_step(u: &DensityGrid, f: &DerivedFields, dytilde: &DVector<f64>, dt: f64, opts: SchemeOptions) -> Result<DensityGrid> {
    check_dim(&u.geom, f.d(), "model")?;
    if dytilde.len() != f.m() {
        return Err(Error::Dimension("observation increment dimension".into()));
    }
    let geom = &u.geom;
    let op = ZakaiOperator { a: arr2(&f.a), bdot: &f.bdot, b0: &f.b0 };
    let a = assemble_operator(geom, &op);
    let half = implicit_solve(geom, &a, dt, &u.values)?;
    let ops = |v: &[f64]| lambda_star_raw(geom, &f.sigma, Some((&f.sf_bdot, &f.sf_b0)), v);
    let values = stochastic_update(geom, &half, &ops, dytilde, dt, opts.milstein);
    finite_or_fail(&values, "π̄")?;
    Ok(DensityGrid { geom: geom.clone(), values, kind: DensityKind::PiBar })
}

/// Coefficients of `dπ̂ = [a^{ij}D_{ij}π̂ + β^iD_iπ̂]dt − σ^{ik}D_iπ̂ dỹ^k`
/// with `β(x) = Mx + c`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReducedCoefficients {
    pub a: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub drift_mat: DMatrix<f64>,
    pub drift_vec: DVector<f64>,
}

impl ReducedCoefficients {
    /// `β = b̂ − b` with `b̂ = σ𝖡(x) − 2âDQ(x)`.
    pub fn from_fields(f: &DerivedFields, q: &QuadraticForm) -> Self {
        let drift_mat = &f.sigma * f.sf_bdot.transpose() - &f.ahat * &q.w * 2.0 - f.bdot.transpose();
        let drift_vec = &f.sigma * &f.sf_b0 - &f.ahat * &q.v * 2.0 - &f.b0;
        ReducedCoefficients { a: f.a.clone(), sigma: f.sigma.clone(), drift_mat, drift_vec }
    }

    /// Pure heat equation `∂u = a^{ij}D_{ij}u`.
    pub fn heat(a: DMatrix<f64>, m: usize) -> Self {
        let d = a.nrows();
        ReducedCoefficients { a, sigma: DMatrix::zeros(d, m), drift_mat: DMatrix::zeros(d, d), drift_vec: DVector::zeros(d) }
    }

    /// `D_iβ^i = tr M`.
    pub fn divergence(&self) -> f64 {
        self.drift_mat.trace()
    }
}

struct ReducedOperator<'a>(&'a ReducedCoefficients);

impl OperatorCoefficients for ReducedOperator<'_> {
    fn diffusion(&self, _x: &[f64]) -> [[f64; 2]; 2] {
        arr2(&self.0.a)
    }
    fn advection(&self, x: &[f64]) -> [f64; 2] {
        pad2(&affine_t(&self.0.drift_mat.transpose(), &self.0.drift_vec, x))
    }
}

pub fn reduced_step_with(
    u: &DensityGrid,
    c: &ReducedCoefficients,
    dytilde: &DVector<f64>,
    dt: f64,
    opts: SchemeOptions,
) -> Result<DensityGrid> {
    check_dim(&u.geom, c.a.nrows(), "coefficients")?;
    if dytilde.len() != c.sigma.ncols() {
        return Err(Error::Dimension("observation increment dimension".into()));
    }
    let geom = &u.geom;
    let a = assemble_operator(geom, &ReducedOperator(c));
    let half = implicit_solve(geom, &a, dt, &u.values)?;
    let ops = |v: &[f64]| lambda_star_raw(geom, &c.sigma, None, v);
    let values = stochastic_update(geom, &half, &ops, dytilde, dt, opts.milstein);
    finite_or_fail(&values, "π̂")?;
    Ok(DensityGrid { geom: geom.clone(), values, kind: DensityKind::PiHat })
}

/// One step of the reduced equation for `π̂`; `q` is `Q` at the left endpoint.
pub fn reduced_step(
    u: &DensityGrid,
    f: &DerivedFields,
    q: &QuadraticForm,
    dytilde: &DVector<f64>,
    dt: f64,
    opts: SchemeOptions,
) -> Result<DensityGrid> {
    reduced_step_with(u, &ReducedCoefficients::from_fields(f, q), dytilde, dt, opts)
}

/// `π̄ = e^{−Q}π̂` nodewise.
pub fn reconstruct(pihat: &DensityGrid, q: &QuadraticForm) -> Result<DensityGrid> {
    check_dim(&pihat.geom, q.dim(), "form")?;
    let values = form_on_grid(&pihat.geom, q).into_iter().zip(&pihat.values).map(|(v, u)| (-v).exp() * u).collect();
    DensityGrid::new(pihat.geom.clone(), values, DensityKind::PiBar)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Normalized {
    pub density: DensityGrid,
    pub mass: f64,
    /// `∫ max(−π̄, 0)` removed by clipping before normalization.
    pub clipped: f64,
}

/// Clips negative nodal values at zero and divides by the trapezoid mass.
pub fn normalize(pibar: &DensityGrid) -> Result<Normalized> {
    let neg: Vec<f64> = pibar.values.iter().map(|v| (-v).max(0.0)).collect();
    let clipped = pibar.geom.integrate(&neg);
    let pos: Vec<f64> = pibar.values.iter().map(|v| v.max(0.0)).collect();
    let mass = pibar.geom.integrate(&pos);
    if !(mass > MIN_MASS) {
        return Err(Error::NonPositiveMass { mass });
    }
    let values = pos.into_iter().map(|v| v / mass).collect();
    Ok(Normalized {
        density: DensityGrid { geom: pibar.geom.clone(), values, kind: DensityKind::PiNormalized },
        mass,
        clipped,
    })
}

pub fn moments(g: &DensityGrid) -> Result<Moments> {
    g.moments()
}

/// L¹ distance between the normalized versions of two densities.
pub fn normalized_l1(a: &DensityGrid, b: &DensityGrid) -> Result<f64> {
    normalize(a)?.density.l1_distance(&normalize(b)?.density)
}

/// How `D_ib̂^i − D_ib^i` is evaluated in the weight `G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceForm {
    /// `tr(σ𝖡̇ᵀ) − 2tr(âW) − tr ḃ`, the divergence of the reduced drift.
    Computed,
    /// `tr(σ𝖡̇ᵀ − âW − ḃ)`.
    SingleAhat,
}

/// Matrix in the dissipation term of the energy identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DissipationMatrix {
    /// `â = a − α`: the observation-driven transport conserves norms.
    Ahat,
    /// The full diffusion `a`.
    A,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyOptions {
    pub p: f64,
    pub divergence: DivergenceForm,
    pub dissipation: DissipationMatrix,
}

impl EnergyOptions {
    pub fn new(p: f64) -> Self {
        EnergyOptions { p, divergence: DivergenceForm::Computed, dissipation: DissipationMatrix::Ahat }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyDiagnostic {
    pub times: Vec<f64>,
    pub g: Vec<f64>,
    /// `G_t‖π̂_t‖_p^p`.
    pub series: Vec<f64>,
    /// `p(p−1)G_t c^{ij}∫|π̂|^{p−2}D_iπ̂D_jπ̂`.
    pub integrand: Vec<f64>,
    /// `G_t‖π̂_t‖^p − ‖π̂_0‖^p + ∫integrand`, trapezoid in time.
    pub residual: Vec<f64>,
    /// Largest `(E_{k+1} − E_k)/E_k`; nonpositive for a decreasing series.
    pub max_rel_increase: f64,
    pub max_abs_residual: f64,
    pub min_integrand: f64,
}

/// `c^{ij}∫|u|^{p−2}D_iuD_ju`: diagonal terms on faces, mixed terms from
/// central gradients.
pub fn gradient_energy(geom: &GridGeometry, u: &[f64], c: &DMatrix<f64>, p: f64) -> f64 {
    let h = geom.h;
    let vol = geom.cell_volume();
    let weight = |v: f64| if p == 2.0 { 1.0 } else { v.abs().powf(p - 2.0) };
    let mut total = 0.0;
    for dir in 0..geom.dim {
        let cd = c[(dir, dir)];
        if cd == 0.0 {
            continue;
        }
        for pnode in 0..geom.len() {
            let (i, j) = geom.coords(pnode);
            let q = if dir == 0 {
                if i + 1 >= geom.n[0] {
                    continue;
                }
                geom.index(i + 1, j)
            } else {
                if j + 1 >= geom.n[1] {
                    continue;
                }
                geom.index(i, j + 1)
            };
            // faces along the box edge carry half weight in the transverse trapezoid
            let transverse_edge = geom.dim == 2 && {
                let (ti, tn) = if dir == 0 { (j, geom.n[1]) } else { (i, geom.n[0]) };
                ti == 0 || ti + 1 == tn
            };
            let tw = if transverse_edge { 0.5 } else { 1.0 };
            let g = (u[q] - u[pnode]) / h;
            total += tw * cd * 0.5 * (weight(u[pnode]) + weight(u[q])) * g * g * vol;
        }
    }
    if geom.dim == 2 && c[(0, 1)] != 0.0 {
        let grad = central_gradient(geom, u);
        let f: Vec<f64> = (0..geom.len()).map(|k| weight(u[k]) * grad[k][0] * grad[k][1]).collect();
        total += 2.0 * c[(0, 1)] * geom.integrate(&f);
    }
    total
}

/// Energy series and identity residual for a given weight exponent
/// `log G_t` and dissipation matrices, one per time.
pub fn energy_identity(
    series: &[DensityGrid],
    times: &[f64],
    log_g: &[f64],
    dissipation: &[DMatrix<f64>],
    p: f64,
) -> Result<EnergyDiagnostic> {
    if !(p >= 2.0) {
        return Err(Error::InvalidArgument(format!("norm exponent p = {p} must be at least 2")));
    }
    let n = series.len();
    if n == 0 || times.len() != n || log_g.len() != n || dissipation.len() != n {
        return Err(Error::GridMismatch("series, times and weights differ in length".into()));
    }
    if series.iter().any(|s| !s.geom.same_as(&series[0].geom)) {
        return Err(Error::GridMismatch("snapshots on different grids".into()));
    }
    let g: Vec<f64> = log_g.iter().map(|l| l.exp()).collect();
    let energy: Vec<f64> = series.iter().zip(&g).map(|(s, gk)| gk * s.lp_norm_pow(p)).collect();
    let integrand: Vec<f64> = (0..n)
        .map(|k| p * (p - 1.0) * g[k] * gradient_energy(&series[k].geom, &series[k].values, &dissipation[k], p))
        .collect();
    let mut residual = vec![0.0];
    let mut acc = 0.0;
    for k in 1..n {
        acc += 0.5 * (integrand[k - 1] + integrand[k]) * (times[k] - times[k - 1]);
        residual.push(energy[k] - energy[0] + acc);
    }
    let max_rel_increase = energy
        .windows(2)
        .map(|w| if w[0] > 0.0 { (w[1] - w[0]) / w[0] } else { w[1] - w[0] })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(EnergyDiagnostic {
        times: times.to_vec(),
        max_abs_residual: residual.iter().fold(0.0, |m, r| m.max(r.abs())),
        min_integrand: integrand.iter().copied().fold(f64::INFINITY, f64::min),
        g,
        series: energy,
        integrand,
        residual,
        max_rel_increase: if n > 1 { max_rel_increase } else { 0.0 },
    })
}

/// Energy diagnostic for a reduced run stored at every step of `path`.
pub fn energy_diagnostic(
    series: &[DensityGrid],
    spec: &ModelSpec,
    path: &PathBundle,
    states: &[RiccatiState],
    opts: EnergyOptions,
) -> Result<EnergyDiagnostic> {
    if series.len() != path.times.len() || states.len() != path.times.len() {
        return Err(Error::GridMismatch("energy diagnostic needs one snapshot and state per path time".into()));
    }
    let mut log_g = Vec::with_capacity(series.len());
    let mut diss = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for k in 0..series.len() {
        let f = derived_at(spec, path.times[k], &path.y(k))?;
        log_g.push(acc);
        diss.push(match opts.dissipation {
            DissipationMatrix::Ahat => f.ahat.clone(),
            DissipationMatrix::A => f.a.clone(),
        });
        if k < path.n_steps() {
            let factor = match opts.divergence {
                DivergenceForm::Computed => 2.0,
                DivergenceForm::SingleAhat => 1.0,
            };
            let rate = (&f.sigma * f.sf_bdot.transpose()).trace() - factor * (&f.ahat * &states[k].w).trace() - f.bdot.trace();
            acc += rate * path.dt(k);
        }
    }
    energy_identity(series, &path.times, &log_g, &diss, opts.p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CflBound {
    pub dt_max: f64,
    pub diffusion: f64,
    /// `h / max|b|`, absent when the drift vanishes on the box.
    pub drift: Option<f64>,
    /// `0.5 / max|𝖡|²`, absent when `𝖡` vanishes on the box.
    pub observation: Option<f64>,
}

pub const CFL_SAFETY: f64 = 0.5;

/// Suggested step bound; `b` and `𝖡` are affine so their maxima over the
/// box are attained at the corners.
pub fn cfl_suggest(geom: &GridGeometry, f: &DerivedFields) -> CflBound {
    let d = geom.dim as f64;
    let amax = (0..f.d()).map(|i| f.a[(i, i)]).fold(0.0, f64::max);
    let diffusion = if amax > 0.0 { geom.h * geom.h / (2.0 * d * amax) } else { f64::INFINITY };
    let corners = geom.corners();
    let bmax = corners.iter().map(|x| f.drift(x).norm()).fold(0.0, f64::max);
    let smax = corners.iter().map(|x| f.sf_drift(x).norm_squared()).fold(0.0, f64::max);
    let drift = (bmax > 0.0).then(|| geom.h / bmax);
    let observation = (smax > 0.0).then(|| CFL_SAFETY / smax);
    let dt_max = [Some(diffusion), drift, observation].into_iter().flatten().fold(f64::INFINITY, f64::min);
    CflBound { dt_max, diffusion, drift, observation }
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct RunOptions {
    pub scheme: SchemeOptions,
    /// Snapshot every this many steps; 0 keeps only the first and last.
    pub store_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityRun {
    pub times: Vec<f64>,
    pub snapshot_steps: Vec<usize>,
    pub snapshots: Vec<DensityGrid>,
    /// Trapezoid mass at every step.
    pub mass: Vec<f64>,
    /// `min π / max π` at every step.
    pub min_ratio: Vec<f64>,
    /// Steps whose `dt` exceeded the suggested bound.
    pub cfl_violations: usize,
    pub dt_max: f64,
}

impl DensityRun {
    pub fn last(&self) -> &DensityGrid {
        self.snapshots.last().expect("run stores at least one snapshot")
    }

    pub fn snapshot_at(&self, step: usize) -> Option<&DensityGrid> {
        self.snapshot_steps.iter().position(|s| *s == step).map(|i| &self.snapshots[i])
    }
}

fn drive(
    path: &PathBundle,
    init: DensityGrid,
    opts: &RunOptions,
    mut step: impl FnMut(usize, &DensityGrid) -> Result<(DensityGrid, f64)>,
) -> Result<DensityRun> {
    let n = path.n_steps();
    let keep = |k: usize| k == 0 || k == n || (opts.store_every > 0 && k.is_multiple_of(opts.store_every));
    let stats = |g: &DensityGrid| {
        let mx = g.max();
        (g.mass(), if mx > 0.0 { g.min() / mx } else { 0.0 })
    };
    let (m0, r0) = stats(&init);
    let mut run = DensityRun {
        times: path.times.clone(),
        snapshot_steps: vec![0],
        snapshots: vec![init.clone()],
        mass: vec![m0],
        min_ratio: vec![r0],
        cfl_violations: 0,
        dt_max: f64::INFINITY,
    };
    let mut u = init;
    for k in 0..n {
        let (next, dt_max) = step(k, &u)?;
        u = next;
        run.dt_max = run.dt_max.min(dt_max);
        if path.dt(k) > dt_max {
            run.cfl_violations += 1;
        }
        let (m, r) = stats(&u);
        run.mass.push(m);
        run.min_ratio.push(r);
        if keep(k + 1) && run.snapshot_steps.last() != Some(&(k + 1)) {
            run.snapshot_steps.push(k + 1);
            run.snapshots.push(u.clone());
        }
    }
    Ok(run)
}

/// Integrates the Zakai equation along the observation path.
pub fn run_zakai(spec: &ModelSpec, path: &PathBundle, init: DensityGrid, opts: &RunOptions) -> Result<DensityRun> {
    check_dim(&init.geom, spec.d, "model")?;
    drive(path, init, opts, |k, u| {
        let f = derived_at(spec, path.times[k], &path.y(k))?;
        let cfl = cfl_suggest(&u.geom, &f);
        Ok((zakai_step(u, &f, &path.dytilde[k], path.dt(k), opts.scheme)?, cfl.dt_max))
    })
}

/// Integrates the reduced equation; `states` are the Riccati states of `Q`
/// on the same path.
pub fn run_reduced(
    spec: &ModelSpec,
    path: &PathBundle,
    states: &[RiccatiState],
    init: DensityGrid,
    opts: &RunOptions,
) -> Result<DensityRun> {
    check_dim(&init.geom, spec.d, "model")?;
    if states.len() != path.times.len() {
        return Err(Error::GridMismatch("Riccati states are not on the path grid".into()));
    }
    drive(path, init, opts, |k, u| {
        let f = derived_at(spec, path.times[k], &path.y(k))?;
        let cfl = cfl_suggest(&u.geom, &f);
        let q = states[k].form();
        Ok((reduced_step(u, &f, &q, &path.dytilde[k], path.dt(k), opts.scheme)?, cfl.dt_max))
    })
}

/// `−W⁻¹V` and `W⁻¹` of the Gaussian `e^{−Q}`.
pub fn form_moments(q: &QuadraticForm) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let cov = spd_inverse(&q.w).ok_or(Error::NotPositiveDefinite { t: f64::NAN })?;
    let mean = -spd_solve(&q.w, &q.v).ok_or(Error::NotPositiveDefinite { t: f64::NAN })?;
    Ok((mean, cov))
}
