//! Divergence-form linear SPDE
//! `du = (D_i(a^{ij}D_ju + 𝔟^iu) + b^iD_iu − (c+λ)u + D_if^i + f⁰)dt + (σ^{ik}D_iu + ν^ku + g^k)dw^k`
//! on a box with zero boundary values, together with discrete weak-form,
//! product-rule and a-priori checks.
//!
//! Pairings with a test function use the face differences of the scheme
//! itself, so summation by parts holds exactly on the grid and the residuals
//! only see the time discretization.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    assemble_operator, central_gradient, face_fluxes, face_list, flux_divergence, implicit_solve, GridGeometry,
    OperatorCoefficients,
};
use crate::linalg::{eigen_range, observed_order, symmetrize, CsrMatrix};
use crate::sde::{brownian_increments, coarsen_increments, path_seed};

/// Spatially varying free term; `t` enters only through `Oscillating`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FreeTerm {
    Zero,
    Constant { value: f64 },
    Gaussian { center: Vec<f64>, width: f64, amplitude: f64 },
    /// `amplitude` on the box `[lower, upper]`, zero elsewhere.
    Indicator { lower: Vec<f64>, upper: Vec<f64>, amplitude: f64 },
    /// `amplitude·exp(1 − 1/(1 − |x−c|²/r²))` inside the ball, zero outside.
    Bump { center: Vec<f64>, radius: f64, amplitude: f64 },
    Sum { terms: Vec<FreeTerm> },
    Scaled { factor: f64, term: Box<FreeTerm> },
    /// `cos(2πt/period)·term`.
    Oscillating { period: f64, term: Box<FreeTerm> },
}

fn dist2(x: &[f64], c: &[f64]) -> f64 {
    x.iter().enumerate().map(|(i, v)| (v - c.get(i).copied().unwrap_or(0.0)).powi(2)).sum()
}

impl FreeTerm {
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            FreeTerm::Zero => 0.0,
            FreeTerm::Constant { value } => *value,
            FreeTerm::Gaussian { center, width, amplitude } => amplitude * (-dist2(x, center) / (2.0 * width * width)).exp(),
            FreeTerm::Indicator { lower, upper, amplitude } => {
                let inside = x.iter().enumerate().all(|(i, v)| {
                    *v >= lower.get(i).copied().unwrap_or(f64::NEG_INFINITY) && *v <= upper.get(i).copied().unwrap_or(f64::INFINITY)
                });
                if inside {
                    *amplitude
                } else {
                    0.0
                }
            }
            FreeTerm::Bump { center, radius, amplitude } => {
                let s = dist2(x, center) / (radius * radius);
                if s < 1.0 {
                    amplitude * (1.0 - 1.0 / (1.0 - s)).exp()
                } else {
                    0.0
                }
            }
            FreeTerm::Sum { terms } => terms.iter().map(|f| f.eval(t, x)).sum(),
            FreeTerm::Scaled { factor, term } => factor * term.eval(t, x),
            FreeTerm::Oscillating { period, term } => (2.0 * std::f64::consts::PI * t / period).cos() * term.eval(t, x),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            FreeTerm::Zero => true,
            FreeTerm::Constant { value } => *value == 0.0,
            FreeTerm::Gaussian { amplitude, .. } | FreeTerm::Indicator { amplitude, .. } | FreeTerm::Bump { amplitude, .. } => {
                *amplitude == 0.0
            }
            FreeTerm::Sum { terms } => terms.iter().all(FreeTerm::is_zero),
            FreeTerm::Scaled { factor, term } => *factor == 0.0 || term.is_zero(),
            FreeTerm::Oscillating { term, .. } => term.is_zero(),
        }
    }
}

/// Coefficients and free terms. `a`, `σ`, `ν` are constant; `𝔟`, `b`, `c` are
/// affine: `𝔟(x) = 𝔟̇x + 𝔟₀`, `b(x) = ḃx + b₀`, `c(x) = c₀ + ċ·x`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralCoefficients {
    pub d: usize,
    pub m: usize,
    pub a: DMatrix<f64>,
    pub frakb_lin: DMatrix<f64>,
    pub frakb_const: DVector<f64>,
    pub b_lin: DMatrix<f64>,
    pub b_const: DVector<f64>,
    pub c_const: f64,
    pub c_lin: DVector<f64>,
    /// d×m
    pub sigma: DMatrix<f64>,
    pub nu: DVector<f64>,
    pub lambda: f64,
    /// `f⁰, f¹, …, f^d`.
    pub f: Vec<FreeTerm>,
    pub g: Vec<FreeTerm>,
}

impl GeneralCoefficients {
    /// `a = ½I`, everything else zero.
    pub fn heat(d: usize, m: usize) -> Self {
        GeneralCoefficients {
            d,
            m,
            a: DMatrix::identity(d, d) * 0.5,
            frakb_lin: DMatrix::zeros(d, d),
            frakb_const: DVector::zeros(d),
            b_lin: DMatrix::zeros(d, d),
            b_const: DVector::zeros(d),
            c_const: 0.0,
            c_lin: DVector::zeros(d),
            sigma: DMatrix::zeros(d, m),
            nu: DVector::zeros(m),
            lambda: 0.0,
            f: vec![FreeTerm::Zero; d + 1],
            g: vec![FreeTerm::Zero; m],
        }
    }

    /// Scalar noisy configuration with growing first-order coefficients and
    /// nonzero free terms.
    pub fn noisy_affine() -> Self {
        let mut c = Self::heat(1, 1);
        c.sigma[(0, 0)] = 0.5;
        c.nu[0] = 0.3;
        c.frakb_lin[(0, 0)] = 0.2;
        c.frakb_const[0] = 0.1;
        c.b_lin[(0, 0)] = -0.4;
        c.c_const = 0.3;
        c.c_lin[0] = 0.05;
        c.lambda = 0.2;
        c.f[0] = FreeTerm::Gaussian { center: vec![-0.5], width: 0.6, amplitude: 0.5 };
        c.f[1] = FreeTerm::Gaussian { center: vec![0.5], width: 0.5, amplitude: 0.2 };
        c.g[0] = FreeTerm::Gaussian { center: vec![0.0], width: 0.7, amplitude: 0.4 };
        c
    }

    /// `a − ½σσᵀ`.
    pub fn ahat(&self) -> DMatrix<f64> {
        symmetrize(&(&self.a - &self.sigma * self.sigma.transpose() * 0.5))
    }

    pub fn frakb(&self, x: &[f64]) -> DVector<f64> {
        &self.frakb_lin * DVector::from_column_slice(x) + &self.frakb_const
    }

    pub fn b(&self, x: &[f64]) -> DVector<f64> {
        &self.b_lin * DVector::from_column_slice(x) + &self.b_const
    }

    pub fn c(&self, x: &[f64]) -> f64 {
        self.c_const + self.c_lin.dot(&DVector::from_column_slice(x))
    }

    /// Smallest eigenvalue of `a − ½σσᵀ`.
    pub fn ellipticity(&self) -> f64 {
        eigen_range(&self.ahat()).0
    }

    /// `sup (div 𝔟 − div b − 2c − 2λ)` over the box. A nonpositive value
    /// makes the deterministic part `L²`-dissipative.
    pub fn dissipativity_margin(&self, geom: &GridGeometry) -> f64 {
        let div = self.frakb_lin.trace() - self.b_lin.trace();
        geom.corners()
            .iter()
            .map(|x| div - 2.0 * self.c(x.as_slice()) - 2.0 * self.lambda)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn validate(&self, geom: &GridGeometry) -> Result<()> {
        let (d, m) = (self.d, self.m);
        if d != geom.dim {
            return Err(Error::Dimension(format!("coefficients are {d}-dimensional, grid is {}", geom.dim)));
        }
        let shapes = [
            ("a", self.a.shape(), (d, d)),
            ("frakb_lin", self.frakb_lin.shape(), (d, d)),
            ("b_lin", self.b_lin.shape(), (d, d)),
            ("sigma", self.sigma.shape(), (d, m)),
            ("frakb_const", (self.frakb_const.len(), 1), (d, 1)),
            ("b_const", (self.b_const.len(), 1), (d, 1)),
            ("c_lin", (self.c_lin.len(), 1), (d, 1)),
            ("nu", (self.nu.len(), 1), (m, 1)),
            ("f", (self.f.len(), 1), (d + 1, 1)),
            ("g", (self.g.len(), 1), (m, 1)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Dimension(format!("{name} has shape {got:?}, expected {want:?}")));
            }
        }
        let delta = self.ellipticity();
        if !(delta > 0.0) {
            return Err(Error::AssumptionViolated(format!(
                "uniform parabolicity: min eigenvalue of a - sigma sigma^T/2 is {delta:e}"
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::AssumptionViolated(format!("lambda = {} is negative", self.lambda)));
        }
        for x in geom.corners() {
            let c = self.c(x.as_slice());
            if !(c >= 0.0) {
                return Err(Error::AssumptionViolated(format!("c = {c} < 0 at box corner {:?}", x.as_slice())));
            }
        }
        Ok(())
    }
}

struct Frozen<'a>(&'a GeneralCoefficients);

impl OperatorCoefficients for Frozen<'_> {
    fn diffusion(&self, _x: &[f64]) -> [[f64; 2]; 2] {
        let a = &self.0.a;
        let mut out = [[0.0; 2]; 2];
        for i in 0..self.0.d {
            for j in 0..self.0.d {
                out[i][j] = a[(i, j)];
            }
        }
        out
    }

    fn flux_drift(&self, x: &[f64]) -> [f64; 2] {
        pad(&self.0.frakb(x))
    }

    fn advection(&self, x: &[f64]) -> [f64; 2] {
        pad(&self.0.b(x))
    }

    fn reaction(&self, x: &[f64]) -> f64 {
        self.0.c(x) + self.0.lambda
    }
}

fn pad(v: &DVector<f64>) -> [f64; 2] {
    let mut out = [0.0; 2];
    out[..v.len()].copy_from_slice(v.as_slice());
    out
}

/// Face values per direction: `(left node, right node, value)`.
pub type FaceValues = Vec<Vec<(usize, usize, f64)>>;

/// `du = (D_iF^i + F⁰)dt + G^k dw^k` evaluated at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Differential {
    /// `a^{ij}D_ju + 𝔟^iu + f^i` on faces.
    pub flux: FaceValues,
    /// `b^iD_iu − (c+λ)u + f⁰` at nodes.
    pub zeroth: Vec<f64>,
    /// `σ^{ik}D_iu + ν^ku + g^k` at nodes, one vector per `k`.
    pub noise: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestbedRun {
    pub geom: GridGeometry,
    pub times: Vec<f64>,
    pub dw: Vec<DVector<f64>>,
    pub u: Vec<Vec<f64>>,
}

impl TestbedRun {
    pub fn n_steps(&self) -> usize {
        self.dw.len()
    }

    /// Trapezoid `‖u_t‖₂` at every time.
    pub fn l2_norms(&self) -> Vec<f64> {
        self.u.iter().map(|u| lp_norm(&self.geom, u, 2.0)).collect()
    }
}

/// Solver with the operator assembled once.
#[derive(Debug, Clone)]
pub struct TestbedSolver {
    pub geom: GridGeometry,
    pub coeffs: GeneralCoefficients,
    op: CsrMatrix,
}

impl TestbedSolver {
    pub fn new(geom: &GridGeometry, coeffs: &GeneralCoefficients) -> Result<Self> {
        coeffs.validate(geom)?;
        Ok(TestbedSolver { geom: geom.clone(), coeffs: coeffs.clone(), op: assemble_operator(geom, &Frozen(coeffs)) })
    }

    fn free_flux(&self, t: f64) -> FaceValues {
        (0..self.geom.dim)
            .map(|dir| {
                face_list(&self.geom, dir)
                    .into_iter()
                    .map(|(p, q, x)| (p, q, self.coeffs.f[dir + 1].eval(t, &x[..self.geom.dim])))
                    .collect()
            })
            .collect()
    }

    pub fn differential(&self, u: &[f64], t: f64) -> Differential {
        let geom = &self.geom;
        let c = &self.coeffs;
        let mut flux = face_fluxes(geom, &Frozen(c), u, None);
        for (dir, free) in self.free_flux(t).into_iter().enumerate() {
            for (f, (_, _, v)) in flux[dir].iter_mut().zip(free) {
                f.2 += v;
            }
        }
        let grad = central_gradient(geom, u);
        let dim = geom.dim;
        let mut zeroth = vec![0.0; geom.len()];
        let mut noise = vec![vec![0.0; geom.len()]; c.m];
        for p in geom.interior() {
            let x = geom.point(p);
            let xs = &x[..dim];
            let b = c.b(xs);
            let adv: f64 = (0..dim).map(|i| b[i] * grad[p][i]).sum();
            zeroth[p] = adv - (c.c(xs) + c.lambda) * u[p] + c.f[0].eval(t, xs);
            for (k, nk) in noise.iter_mut().enumerate() {
                let tr: f64 = (0..dim).map(|i| c.sigma[(i, k)] * grad[p][i]).sum();
                nk[p] = tr + c.nu[k] * u[p] + c.g[k].eval(t, xs);
            }
        }
        Differential { flux, zeroth, noise }
    }

    /// One step: drift implicit, free terms and stochastic part explicit at `t`.
    pub fn step(&self, u: &[f64], t: f64, dw: &DVector<f64>, dt: f64) -> Result<Vec<f64>> {
        if dw.len() != self.coeffs.m {
            return Err(Error::Dimension(format!("{} noise increments for m = {}", dw.len(), self.coeffs.m)));
        }
        let geom = &self.geom;
        let div_free = flux_divergence(geom, &self.free_flux(t));
        let grad = central_gradient(geom, u);
        let c = &self.coeffs;
        let dim = geom.dim;
        let mut rhs = vec![0.0; geom.len()];
        for p in geom.interior() {
            let x = geom.point(p);
            let xs = &x[..dim];
            let mut v = u[p] + dt * (div_free[p] + c.f[0].eval(t, xs));
            for k in 0..c.m {
                let tr: f64 = (0..dim).map(|i| c.sigma[(i, k)] * grad[p][i]).sum();
                v += (tr + c.nu[k] * u[p] + c.g[k].eval(t, xs)) * dw[k];
            }
            rhs[p] = v;
        }
        let out = implicit_solve(geom, &self.op, dt, &rhs)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolveFailed(format!("non-finite values after step at t={t}")));
        }
        Ok(out)
    }

    pub fn run(&self, u0: &[f64], dw: Vec<DVector<f64>>, dt: f64) -> Result<TestbedRun> {
        if u0.len() != self.geom.len() {
            return Err(Error::Dimension(format!("u0 has {} values for {} nodes", u0.len(), self.geom.len())));
        }
        let mut u = Vec::with_capacity(dw.len() + 1);
        let mut first = u0.to_vec();
        for (p, v) in first.iter_mut().enumerate() {
            if self.geom.is_boundary(p) {
                *v = 0.0;
            }
        }
        u.push(first);
        let mut times = vec![0.0];
        for (k, inc) in dw.iter().enumerate() {
            let t = k as f64 * dt;
            let next = self.step(&u[k], t, inc, dt)?;
            u.push(next);
            times.push((k + 1) as f64 * dt);
        }
        Ok(TestbedRun { geom: self.geom.clone(), times, dw, u })
    }
}

/// Single step with freshly assembled operator.
pub fn general_step(
    geom: &GridGeometry,
    coeffs: &GeneralCoefficients,
    u: &[f64],
    t: f64,
    dw: &DVector<f64>,
    dt: f64,
) -> Result<Vec<f64>> {
    TestbedSolver::new(geom, coeffs)?.step(u, t, dw, dt)
}

/// Smooth bump `exp(1 − 1/(1 − |x−c|²/r²))` sampled on the grid. Its support
/// must stay one node clear of the boundary.
pub fn test_function(geom: &GridGeometry, center: &[f64], radius: f64) -> Result<Vec<f64>> {
    let bump = FreeTerm::Bump { center: center.to_vec(), radius, amplitude: 1.0 };
    let phi = geom.sample_all(|x| bump.eval(0.0, x));
    for (p, v) in phi.iter().enumerate() {
        if *v != 0.0 && near_boundary(geom, p) {
            return Err(Error::SupportViolation);
        }
    }
    Ok(phi)
}

fn near_boundary(geom: &GridGeometry, p: usize) -> bool {
    let (i, j) = geom.coords(p);
    i <= 1 || i + 2 >= geom.n[0] || (geom.dim == 2 && (j <= 1 || j + 2 >= geom.n[1]))
}

fn pair(geom: &GridGeometry, f: &[f64], phi: &[f64]) -> f64 {
    geom.integrate(&f.iter().zip(phi).map(|(a, b)| a * b).collect::<Vec<_>>())
}

/// `(F^i, D_iφ)` with face differences of `φ`.
fn face_pair(geom: &GridGeometry, flux: &FaceValues, phi: &[f64]) -> f64 {
    let s: f64 = flux.iter().flatten().map(|(p, q, v)| v * (phi[*q] - phi[*p])).sum();
    s * geom.cell_volume() / geom.h
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub max_abs: f64,
}

impl ResidualSeries {
    fn new(times: Vec<f64>, values: Vec<f64>) -> Self {
        let max_abs = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        ResidualSeries { times, values, max_abs }
    }
}

fn check_phi(geom: &GridGeometry, phi: &[f64]) -> Result<()> {
    if phi.len() != geom.len() {
        return Err(Error::Dimension(format!("test function has {} values for {} nodes", phi.len(), geom.len())));
    }
    if phi.iter().enumerate().any(|(p, v)| *v != 0.0 && near_boundary(geom, p)) {
        return Err(Error::SupportViolation);
    }
    Ok(())
}

/// `(u_t, φ)` minus the right side of the weak form, with left-point sums in time.
pub fn weak_residual(run: &TestbedRun, coeffs: &GeneralCoefficients, phi: &[f64]) -> Result<ResidualSeries> {
    let geom = &run.geom;
    check_phi(geom, phi)?;
    let solver = TestbedSolver::new(geom, coeffs)?;
    let mut rhs = pair(geom, &run.u[0], phi);
    let mut values = vec![0.0];
    for k in 0..run.n_steps() {
        let dt = run.times[k + 1] - run.times[k];
        let du = solver.differential(&run.u[k], run.times[k]);
        rhs += dt * (pair(geom, &du.zeroth, phi) - face_pair(geom, &du.flux, phi));
        for (j, g) in du.noise.iter().enumerate() {
            rhs += pair(geom, g, phi) * run.dw[k][j];
        }
        values.push(pair(geom, &run.u[k + 1], phi) - rhs);
    }
    Ok(ResidualSeries::new(run.times.clone(), values))
}

/// A factor of the product `u ũ`.
#[derive(Debug, Clone, Copy)]
pub enum Factor<'a> {
    Solution { run: &'a TestbedRun, coeffs: &'a GeneralCoefficients },
    /// `ũ ≡ 1` with zero differential.
    Unit,
}

struct Resolved {
    values: Vec<Vec<f64>>,
    diffs: Option<Vec<Differential>>,
}

fn resolve(f: Factor<'_>, reference: &TestbedRun) -> Result<Resolved> {
    match f {
        Factor::Unit => Ok(Resolved { values: vec![vec![1.0; reference.geom.len()]; reference.times.len()], diffs: None }),
        Factor::Solution { run, coeffs } => {
            if run.geom != reference.geom || run.times != reference.times || run.dw != reference.dw {
                return Err(Error::GridMismatch("product factors must share grid, times and noise".into()));
            }
            let solver = TestbedSolver::new(&run.geom, coeffs)?;
            let diffs = (0..run.n_steps()).map(|k| solver.differential(&run.u[k], run.times[k])).collect();
            Ok(Resolved { values: run.u.clone(), diffs: Some(diffs) })
        }
    }
}

/// Quadrature of the correction `∫(h_s, φ)ds`, `h = Σ_k G^k G̃^k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItoCorrection {
    /// Left out; the residual then tends to `−∫(h, φ)ds`.
    Omitted,
    /// `Σ (h_k, φ)Δt`. The residual keeps the `Σ(G G̃, φ)(Δw² − Δt)` term,
    /// so its order is 1/2.
    Time,
    /// `Σ (G^j_k G̃^l_k, φ)Δw^j_kΔw^l_k`, against the realized quadratic variation.
    Realized,
}

/// Residual of the product rule for `(u_t ũ_t, φ)`.
pub fn product_rule_residual(first: Factor<'_>, second: Factor<'_>, phi: &[f64], correction: ItoCorrection) -> Result<ResidualSeries> {
    let reference = match (first, second) {
        (Factor::Solution { run, .. }, _) | (_, Factor::Solution { run, .. }) => run,
        _ => return Err(Error::InvalidArgument("at least one factor must be a solution".into())),
    };
    let geom = &reference.geom;
    check_phi(geom, phi)?;
    let a = resolve(first, reference)?;
    let b = resolve(second, reference)?;
    let prod = |k: usize| -> Vec<f64> { a.values[k].iter().zip(&b.values[k]).map(|(x, y)| x * y).collect() };
    let mut rhs = pair(geom, &prod(0), phi);
    let mut values = vec![0.0];
    for k in 0..reference.n_steps() {
        let dt = reference.times[k + 1] - reference.times[k];
        let mut drift = 0.0;
        // contributions of each factor's differential, weighted by the other factor
        for (own, other) in [(&a, &b), (&b, &a)] {
            if let Some(diffs) = &own.diffs {
                let du = &diffs[k];
                let w: Vec<f64> = other.values[k].iter().zip(phi).map(|(x, y)| x * y).collect();
                drift += pair(geom, &du.zeroth, &w) - face_pair(geom, &du.flux, &w);
                for (j, g) in du.noise.iter().enumerate() {
                    rhs += pair(geom, g, &w) * reference.dw[k][j];
                }
            }
        }
        if let (Some(da), Some(db)) = (&a.diffs, &b.diffs) {
            let dw = &reference.dw[k];
            for (j, ga) in da[k].noise.iter().enumerate() {
                for (l, gb) in db[k].noise.iter().enumerate() {
                    let weight = match correction {
                        ItoCorrection::Omitted => 0.0,
                        ItoCorrection::Time if j == l => dt,
                        ItoCorrection::Time => 0.0,
                        ItoCorrection::Realized => dw[j] * dw[l],
                    };
                    if weight != 0.0 {
                        let h: Vec<f64> = ga.iter().zip(gb).map(|(x, y)| x * y).collect();
                        rhs += weight * pair(geom, &h, phi);
                    }
                }
            }
        }
        rhs += dt * drift;
        values.push(pair(geom, &prod(k + 1), phi) - rhs);
    }
    Ok(ResidualSeries::new(reference.times.clone(), values))
}

fn lp_norm(geom: &GridGeometry, v: &[f64], p: f64) -> f64 {
    geom.integrate(&v.iter().map(|x| x.abs().powf(p)).collect::<Vec<_>>()).powf(1.0 / p)
}

/// `‖v‖_p + ‖|Dv|‖_p` with central differences.
pub fn w1p_norm(geom: &GridGeometry, v: &[f64], p: f64) -> f64 {
    let grad: Vec<f64> = central_gradient(geom, v).iter().map(|g| (g[0] * g[0] + g[1] * g[1]).sqrt()).collect();
    lp_norm(geom, v, p) + lp_norm(geom, &grad, p)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AprioriReport {
    pub p: f64,
    /// `‖u‖²` in `L_p(0,T; W¹_p)`.
    pub solution_norm_sq: f64,
    /// `Σ_i‖f^i‖² + ‖g‖² + ‖u₀‖²_{W¹_p}`.
    pub data_norm_sq: f64,
    pub ratio: f64,
}

/// Empirical stability constant of the a-priori estimate along one run
/// (left-point time sums). The initial-data term uses `‖u₀‖_{W¹_p}`.
pub fn apriori_ratio(run: &TestbedRun, coeffs: &GeneralCoefficients, p: f64) -> Result<AprioriReport> {
    if coeffs.lambda != 0.0 {
        return Err(Error::InvalidArgument(format!("the estimate is stated for lambda = 0, got {}", coeffs.lambda)));
    }
    if !(p >= 2.0) {
        return Err(Error::InvalidArgument(format!("p = {p} < 2")));
    }
    let geom = &run.geom;
    let n = run.n_steps();
    let mut sol = 0.0;
    let mut free = vec![0.0; coeffs.d + 1];
    let mut noise = 0.0;
    for k in 0..n {
        let dt = run.times[k + 1] - run.times[k];
        let t = run.times[k];
        sol += dt * w1p_norm(geom, &run.u[k], p).powf(p);
        for (i, f) in coeffs.f.iter().enumerate() {
            free[i] += dt * lp_norm(geom, &geom.sample(|x| f.eval(t, x)), p).powf(p);
        }
        let g_abs = geom.sample(|x| coeffs.g.iter().map(|g| g.eval(t, x).powi(2)).sum::<f64>().sqrt());
        noise += dt * lp_norm(geom, &g_abs, p).powf(p);
    }
    let e = 2.0 / p;
    let data = free.iter().map(|v| v.powf(e)).sum::<f64>() + noise.powf(e) + w1p_norm(geom, &run.u[0], p).powi(2);
    if !(data > 0.0) {
        return Err(Error::InvalidArgument("all data are zero".into()));
    }
    let solution_norm_sq = sol.powf(e);
    Ok(AprioriReport { p, solution_norm_sq, data_norm_sq: data, ratio: solution_norm_sq / data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResidualKind {
    Weak,
    /// `(u ũ, φ)`; without a second solution `ũ = u`.
    Product { correction: ItoCorrection },
}

/// Inputs of a time-refinement study on fixed noise paths.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub geom: GridGeometry,
    pub coeffs: GeneralCoefficients,
    pub u0: Vec<f64>,
    pub second: Option<(GeneralCoefficients, Vec<f64>)>,
    pub phi: Vec<f64>,
    pub horizon: f64,
    pub coarse_steps: usize,
    pub levels: usize,
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementStudy {
    pub dts: Vec<f64>,
    /// Root mean square over paths of `max_t |residual|`.
    pub errors: Vec<f64>,
    pub order: f64,
}

/// Residual sizes at `dt = T/(coarse·2^ℓ)`, `ℓ = 0..levels`, with the coarse
/// increments summed from the finest ones.
pub fn residual_refinement(cfg: &StudyConfig, kind: ResidualKind) -> Result<RefinementStudy> {
    if cfg.levels < 2 || cfg.n_paths == 0 || cfg.coarse_steps == 0 {
        return Err(Error::InvalidArgument("need at least two levels, one path and one step".into()));
    }
    let first = TestbedSolver::new(&cfg.geom, &cfg.coeffs)?;
    let second = match &cfg.second {
        Some((c, _)) => Some(TestbedSolver::new(&cfg.geom, c)?),
        None => None,
    };
    let finest = cfg.coarse_steps << (cfg.levels - 1);
    let dt_fine = cfg.horizon / finest as f64;
    let dts: Vec<f64> = (0..cfg.levels).map(|l| cfg.horizon / (cfg.coarse_steps << l) as f64).collect();
    let per_path: Vec<Vec<f64>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(path_seed(cfg.seed, i));
            let fine = brownian_increments(&mut rng, finest, cfg.coeffs.m, dt_fine);
            dts.iter()
                .enumerate()
                .map(|(l, dt)| {
                    let dw = coarsen_increments(&fine, 1 << (cfg.levels - 1 - l))?;
                    let run = first.run(&cfg.u0, dw.clone(), *dt)?;
                    let r = match kind {
                        ResidualKind::Weak => weak_residual(&run, &cfg.coeffs, &cfg.phi)?,
                        ResidualKind::Product { correction } => {
                            let u = Factor::Solution { run: &run, coeffs: &cfg.coeffs };
                            match (&second, &cfg.second) {
                                (Some(s), Some((c2, u2))) => {
                                    let run2 = s.run(u2, dw, *dt)?;
                                    product_rule_residual(u, Factor::Solution { run: &run2, coeffs: c2 }, &cfg.phi, correction)?
                                }
                                _ => product_rule_residual(u, u, &cfg.phi, correction)?,
                            }
                        }
                    };
                    Ok(r.max_abs)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let errors: Vec<f64> = (0..cfg.levels)
        .map(|l| (per_path.iter().map(|e| e[l] * e[l]).sum::<f64>() / cfg.n_paths as f64).sqrt())
        .collect();
    let order = observed_order(&dts, &errors);
    Ok(RefinementStudy { dts, errors, order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn line(h: f64) -> GridGeometry {
        GridGeometry::symmetric(1, 5.0, h).unwrap()
    }

    fn gaussian(var: f64) -> impl Fn(&[f64]) -> f64 {
        move |x: &[f64]| (-x[0] * x[0] / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
    }

    fn noise(m: usize, n: usize, dt: f64, seed: u64) -> Vec<DVector<f64>> {
        brownian_increments(&mut ChaCha8Rng::seed_from_u64(seed), n, m, dt)
    }

    #[test]
    fn zero_data_stays_zero() {
        let g = line(0.1);
        let c = GeneralCoefficients::noisy_affine();
        let mut c = c.clone();
        c.f = vec![FreeTerm::Zero; 2];
        c.g = vec![FreeTerm::Zero];
        let run = TestbedSolver::new(&g, &c).unwrap().run(&vec![0.0; g.len()], noise(1, 20, 0.01, 1), 0.01).unwrap();
        assert!(run.u.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn heat_kernel() {
        let g = line(0.05);
        let c = GeneralCoefficients::heat(1, 1);
        let dt = 1e-3;
        let run = TestbedSolver::new(&g, &c).unwrap().run(&g.sample(gaussian(1.0)), noise(1, 1000, dt, 2), dt).unwrap();
        let exact = g.sample(gaussian(2.0));
        let err = run.u[1000].iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 5e-4, "heat error {err:e}");
    }

    #[test]
    fn spatially_constant_noise() {
        let g = line(0.1);
        let mut c = GeneralCoefficients::heat(1, 1);
        c.g[0] = FreeTerm::Constant { value: 0.7 };
        let dt = 0.01;
        let dw = noise(1, 5, dt, 3);
        let w: f64 = dw.iter().map(|v| v[0]).sum();
        let run = TestbedSolver::new(&g, &c).unwrap().run(&g.sample(|_| 1.5), dw, dt).unwrap();
        let last = &run.u[5];
        for p in g.interior() {
            if g.point(p)[0].abs() <= 2.5 {
                assert!((last[p] - (1.5 + 0.7 * w)).abs() < 1e-10, "{} at x={}", last[p], g.point(p)[0]);
            }
        }
    }

    #[test]
    fn rejects_degenerate_and_negative_c() {
        let g = line(0.1);
        let mut c = GeneralCoefficients::heat(1, 1);
        c.sigma[(0, 0)] = 1.0;
        assert!(matches!(TestbedSolver::new(&g, &c), Err(Error::AssumptionViolated(_))));
        let mut c = GeneralCoefficients::heat(1, 1);
        c.c_lin[0] = 1.0;
        assert!(matches!(TestbedSolver::new(&g, &c), Err(Error::AssumptionViolated(_))));
    }

    #[test]
    fn weak_residual_trivial_cases() {
        let g = line(0.1);
        let c = GeneralCoefficients::heat(1, 1);
        let phi = test_function(&g, &[0.0], 1.0).unwrap();
        let run = TestbedSolver::new(&g, &c).unwrap().run(&vec![0.0; g.len()], noise(1, 10, 0.01, 1), 0.01).unwrap();
        assert_eq!(weak_residual(&run, &c, &phi).unwrap().max_abs, 0.0);
        // disjoint support: u concentrated far left, φ on the right
        let run = TestbedSolver::new(&g, &c)
            .unwrap()
            .run(&g.sample(|x| (-(x[0] + 3.5).powi(2) * 50.0).exp()), noise(1, 5, 1e-3, 1), 1e-3)
            .unwrap();
        let phi = test_function(&g, &[3.0], 1.0).unwrap();
        assert!(weak_residual(&run, &c, &phi).unwrap().max_abs < 1e-14);
    }

    #[test]
    fn support_checked() {
        let g = line(0.1);
        assert_eq!(test_function(&g, &[4.5], 1.0).unwrap_err(), Error::SupportViolation);
    }

    #[test]
    fn unit_factor_reduces_to_weak_form() {
        let g = line(0.1);
        let c = GeneralCoefficients::noisy_affine();
        let phi = test_function(&g, &[0.3], 1.5).unwrap();
        let run = TestbedSolver::new(&g, &c).unwrap().run(&g.sample(gaussian(0.5)), noise(1, 40, 0.0125, 4), 0.0125).unwrap();
        let w = weak_residual(&run, &c, &phi).unwrap();
        let p = product_rule_residual(Factor::Solution { run: &run, coeffs: &c }, Factor::Unit, &phi, ItoCorrection::Time).unwrap();
        for (a, b) in w.values.iter().zip(&p.values) {
            assert!((a - b).abs() < 1e-13, "{a} vs {b}");
        }
    }

    #[test]
    fn both_zero_product() {
        let g = line(0.1);
        let mut c = GeneralCoefficients::heat(1, 1);
        c.f = vec![FreeTerm::Zero; 2];
        let phi = test_function(&g, &[0.0], 1.0).unwrap();
        let run = TestbedSolver::new(&g, &c).unwrap().run(&vec![0.0; g.len()], noise(1, 10, 0.01, 1), 0.01).unwrap();
        let f = Factor::Solution { run: &run, coeffs: &c };
        assert_eq!(product_rule_residual(f, f, &phi, ItoCorrection::Realized).unwrap().max_abs, 0.0);
    }

    #[test]
    fn mismatched_factors_rejected() {
        let g = line(0.1);
        let c = GeneralCoefficients::heat(1, 1);
        let s = TestbedSolver::new(&g, &c).unwrap();
        let a = s.run(&g.sample(gaussian(1.0)), noise(1, 10, 0.01, 1), 0.01).unwrap();
        let b = s.run(&g.sample(gaussian(1.0)), noise(1, 10, 0.01, 2), 0.01).unwrap();
        let phi = test_function(&g, &[0.0], 1.0).unwrap();
        let err = product_rule_residual(Factor::Solution { run: &a, coeffs: &c }, Factor::Solution { run: &b, coeffs: &c }, &phi, ItoCorrection::Time);
        assert!(matches!(err, Err(Error::GridMismatch(_))));
    }

    #[test]
    fn linear_in_data() {
        let g = GridGeometry::symmetric(2, 3.0, 0.2).unwrap();
        let mut c1 = GeneralCoefficients::heat(2, 1);
        c1.sigma[(0, 0)] = 0.4;
        c1.nu[0] = 0.2;
        c1.frakb_lin[(0, 1)] = 0.3;
        c1.b_const[1] = 0.5;
        c1.c_const = 0.1;
        c1.f[0] = FreeTerm::Gaussian { center: vec![0.5, 0.0], width: 0.5, amplitude: 1.0 };
        c1.f[2] = FreeTerm::Constant { value: 0.3 };
        c1.g[0] = FreeTerm::Gaussian { center: vec![0.0, 0.5], width: 0.4, amplitude: 0.7 };
        let mut c2 = c1.clone();
        c2.f[0] = FreeTerm::Indicator { lower: vec![-1.0, -1.0], upper: vec![0.0, 1.0], amplitude: 2.0 };
        c2.f[1] = FreeTerm::Gaussian { center: vec![0.0, 0.0], width: 0.8, amplitude: -0.4 };
        c2.f[2] = FreeTerm::Zero;
        c2.g[0] = FreeTerm::Constant { value: 0.2 };
        let (alpha, beta) = (0.7, -1.3);
        let mut c3 = c1.clone();
        let combine = |x: &FreeTerm, y: &FreeTerm| FreeTerm::Sum {
            terms: vec![
                FreeTerm::Scaled { factor: alpha, term: Box::new(x.clone()) },
                FreeTerm::Scaled { factor: beta, term: Box::new(y.clone()) },
            ],
        };
        c3.f = c1.f.iter().zip(&c2.f).map(|(x, y)| combine(x, y)).collect();
        c3.g = c1.g.iter().zip(&c2.g).map(|(x, y)| combine(x, y)).collect();
        let u1 = g.sample(|x| (-(x[0] * x[0] + x[1] * x[1])).exp());
        let u2 = g.sample(|x| x[0] * (-(x[0] * x[0] + 2.0 * x[1] * x[1])).exp());
        let u3: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| alpha * a + beta * b).collect();
        let dw = noise(1, 20, 0.01, 5);
        let r1 = TestbedSolver::new(&g, &c1).unwrap().run(&u1, dw.clone(), 0.01).unwrap();
        let r2 = TestbedSolver::new(&g, &c2).unwrap().run(&u2, dw.clone(), 0.01).unwrap();
        let r3 = TestbedSolver::new(&g, &c3).unwrap().run(&u3, dw, 0.01).unwrap();
        let err = (0..g.len()).map(|p| (alpha * r1.u[20][p] + beta * r2.u[20][p] - r3.u[20][p]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "superposition error {err:e}");
    }

    #[test]
    fn dissipative_without_noise() {
        let g = line(0.05);
        let mut c = GeneralCoefficients::noisy_affine();
        c.sigma[(0, 0)] = 0.0;
        c.nu[0] = 0.0;
        c.frakb_lin[(0, 0)] = 0.0;
        c.f = vec![FreeTerm::Zero; 2];
        c.g = vec![FreeTerm::Zero];
        assert!(c.dissipativity_margin(&g) <= 0.0);
        let run = TestbedSolver::new(&g, &c).unwrap().run(&g.sample(gaussian(0.3)), noise(1, 200, 5e-3, 1), 5e-3).unwrap();
        let norms = run.l2_norms();
        assert!(norms.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn apriori_pure_heat_contracts() {
        for p in [2.0, 4.0] {
            let g = line(0.05);
            let c = GeneralCoefficients::heat(1, 1);
            let run = TestbedSolver::new(&g, &c).unwrap().run(&g.sample(gaussian(0.5)), noise(1, 200, 5e-3, 1), 5e-3).unwrap();
            let r = apriori_ratio(&run, &c, p).unwrap();
            assert!(r.ratio <= 1.0 + 1e-9, "p={p}: ratio {}", r.ratio);
        }
    }

    #[test]
    fn apriori_stable_under_refinement() {
        let mut c = GeneralCoefficients::heat(1, 1);
        c.f[0] = FreeTerm::Indicator { lower: vec![-0.5], upper: vec![0.5], amplitude: 1.0 };
        let ratio = |h: f64, dt: f64| {
            let g = line(h);
            let n = (1.0 / dt).round() as usize;
            let run = TestbedSolver::new(&g, &c).unwrap().run(&vec![0.0; g.len()], noise(1, n, dt, 1), dt).unwrap();
            apriori_ratio(&run, &c, 2.0).unwrap().ratio
        };
        let (coarse, fine) = (ratio(0.1, 0.02), ratio(0.05, 0.005));
        assert!(coarse.is_finite() && coarse > 0.0);
        assert!((fine / coarse - 1.0).abs() < 0.2, "{coarse} -> {fine}");
    }

    #[test]
    fn apriori_rejects_zero_data_and_lambda() {
        let g = line(0.1);
        let c = GeneralCoefficients::heat(1, 1);
        let run = TestbedSolver::new(&g, &c).unwrap().run(&vec![0.0; g.len()], noise(1, 5, 0.01, 1), 0.01).unwrap();
        assert!(matches!(apriori_ratio(&run, &c, 2.0), Err(Error::InvalidArgument(_))));
        let mut c = c;
        c.lambda = 1.0;
        assert!(matches!(apriori_ratio(&run, &c, 2.0), Err(Error::InvalidArgument(_))));
    }
}
