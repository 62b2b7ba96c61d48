//! Uniform 1-D/2-D node grids with Dirichlet boundary, conservative
//! second-order stencils and trapezoid quadrature.
//!
//! Node `(i, j)` sits at `lower + (i h, j h)` and is stored at `i + n0 j`.
//! Boundary nodes carry zero and are never unknowns.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{bicgstab, solve_tridiagonal, CsrMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub dim: usize,
    pub lower: [f64; 2],
    pub h: f64,
    pub n: [usize; 2],
}

impl GridGeometry {
    pub fn new(dim: usize, lower: [f64; 2], h: f64, n: [usize; 2]) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(Error::InvalidArgument(format!("grid dimension must be 1 or 2, got {dim}")));
        }
        if !(h > 0.0) {
            return Err(Error::InvalidArgument("grid spacing must be positive".into()));
        }
        let n = if dim == 1 { [n[0], 1] } else { n };
        if n[0] < 3 || (dim == 2 && n[1] < 3) {
            return Err(Error::InvalidArgument("need at least 3 nodes per direction".into()));
        }
        Ok(GridGeometry { dim, lower, h, n })
    }

    /// Box `center ± half_width` in every direction (node count rounded up).
    pub fn centered(dim: usize, center: &[f64], half_width: f64, h: f64) -> Result<Self> {
        let cells = (2.0 * half_width / h - 1e-9).ceil() as usize;
        let half = cells as f64 * h / 2.0;
        let c = |k: usize| center.get(k).copied().unwrap_or(0.0);
        Self::new(dim, [c(0) - half, c(1) - half], h, [cells + 1, cells + 1])
    }

    /// Symmetric box `[−L, L]^dim`.
    pub fn symmetric(dim: usize, half_width: f64, h: f64) -> Result<Self> {
        Self::centered(dim, &[0.0, 0.0], half_width, h)
    }

    pub fn len(&self) -> usize {
        self.n[0] * self.n[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.n[0] * j
    }

    pub fn coords(&self, p: usize) -> (usize, usize) {
        (p % self.n[0], p / self.n[0])
    }

    pub fn point(&self, p: usize) -> [f64; 2] {
        let (i, j) = self.coords(p);
        let y = if self.dim == 2 { self.lower[1] + j as f64 * self.h } else { 0.0 };
        [self.lower[0] + i as f64 * self.h, y]
    }

    pub fn point_vec(&self, p: usize) -> DVector<f64> {
        let pt = self.point(p);
        DVector::from_column_slice(&pt[..self.dim])
    }

    pub fn upper(&self) -> [f64; 2] {
        [
            self.lower[0] + (self.n[0] - 1) as f64 * self.h,
            self.lower[1] + (self.n[1] - 1) as f64 * self.h,
        ]
    }

    pub fn is_boundary(&self, p: usize) -> bool {
        let (i, j) = self.coords(p);
        i == 0 || i + 1 == self.n[0] || (self.dim == 2 && (j == 0 || j + 1 == self.n[1]))
    }

    pub fn interior(&self) -> Vec<usize> {
        (0..self.len()).filter(|p| !self.is_boundary(*p)).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    /// Box corners (2 or 4 points).
    pub fn corners(&self) -> Vec<DVector<f64>> {
        let up = self.upper();
        if self.dim == 1 {
            vec![DVector::from_element(1, self.lower[0]), DVector::from_element(1, up[0])]
        } else {
            let mut out = Vec::new();
            for x in [self.lower[0], up[0]] {
                for y in [self.lower[1], up[1]] {
                    out.push(DVector::from_vec(vec![x, y]));
                }
            }
            out
        }
    }

    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.len())
            .map(|p| if self.is_boundary(p) { 0.0 } else { f(&self.point(p)[..self.dim]) })
            .collect()
    }

    pub fn sample_all(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.len()).map(|p| f(&self.point(p)[..self.dim])).collect()
    }

    /// Trapezoid rule; exact boundary weights are halved (quartered at 2-D corners).
    pub fn integrate(&self, values: &[f64]) -> f64 {
        let mut s = 0.0;
        for (p, v) in values.iter().enumerate() {
            let (i, j) = self.coords(p);
            let mut w = 1.0;
            if i == 0 || i + 1 == self.n[0] {
                w *= 0.5;
            }
            if self.dim == 2 && (j == 0 || j + 1 == self.n[1]) {
                w *= 0.5;
            }
            s += w * v;
        }
        s * self.cell_volume()
    }

    pub fn same_as(&self, other: &GridGeometry) -> bool {
        self == other
    }

    /// Same box with half the spacing; node `(i, j)` here is node `(2i, 2j)` there.
    pub fn refined(&self) -> GridGeometry {
        let n1 = if self.dim == 2 { 2 * self.n[1] - 1 } else { 1 };
        GridGeometry { dim: self.dim, lower: self.lower, h: 0.5 * self.h, n: [2 * self.n[0] - 1, n1] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    PiBar,
    PiHat,
    PiNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityGrid {
    pub geom: GridGeometry,
    pub values: Vec<f64>,
    pub kind: DensityKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Moments {
    pub mass: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl DensityGrid {
    pub fn new(geom: GridGeometry, mut values: Vec<f64>, kind: DensityKind) -> Result<Self> {
        if values.len() != geom.len() {
            return Err(Error::Dimension(format!("{} values for {} nodes", values.len(), geom.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite nodal value".into()));
        }
        for p in 0..geom.len() {
            if geom.is_boundary(p) {
                values[p] = 0.0;
            }
        }
        Ok(DensityGrid { geom, values, kind })
    }

    pub fn mass(&self) -> f64 {
        self.geom.integrate(&self.values)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `∫|u|^p dx`.
    pub fn lp_norm_pow(&self, p: f64) -> f64 {
        self.geom.integrate(&self.values.iter().map(|v| v.abs().powf(p)).collect::<Vec<_>>())
    }

    pub fn l1_distance(&self, other: &DensityGrid) -> Result<f64> {
        if !self.geom.same_as(&other.geom) {
            return Err(Error::GridMismatch("density grids differ".into()));
        }
        let diff: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).collect();
        Ok(self.geom.integrate(&diff))
    }

    /// Injection onto `coarse`, whose refinement must be this grid.
    pub fn restrict_to(&self, coarse: &GridGeometry) -> Result<DensityGrid> {
        if coarse.refined() != self.geom {
            return Err(Error::GridMismatch("grid is not the refinement of the target".into()));
        }
        let values = (0..coarse.len())
            .map(|p| {
                let (i, j) = coarse.coords(p);
                let fj = if coarse.dim == 2 { 2 * j } else { 0 };
                self.values[self.geom.index(2 * i, fj)]
            })
            .collect();
        Ok(DensityGrid { geom: coarse.clone(), values, kind: self.kind })
    }

    /// Trapezoid mass, mean and covariance of the normalized density.
    pub fn moments(&self) -> Result<Moments> {
        let mass = self.mass();
        if !(mass > 1e-14) {
            return Err(Error::NonPositiveMass { mass });
        }
        let d = self.geom.dim;
        let mut mean = DVector::zeros(d);
        for k in 0..d {
            let f: Vec<f64> = (0..self.geom.len()).map(|p| self.values[p] * self.geom.point(p)[k]).collect();
            mean[k] = self.geom.integrate(&f) / mass;
        }
        let mut cov = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                let f: Vec<f64> = (0..self.geom.len())
                    .map(|p| {
                        let x = self.geom.point(p);
                        self.values[p] * (x[a] - mean[a]) * (x[b] - mean[b])
                    })
                    .collect();
                cov[(a, b)] = self.geom.integrate(&f) / mass;
                cov[(b, a)] = cov[(a, b)];
            }
        }
        Ok(Moments { mass, mean, cov })
    }
}

/// Coefficients of `D_i(a^{ij}D_j u + 𝔟^i u) + b^i D_i u − c u` at a point.
pub trait OperatorCoefficients {
    fn diffusion(&self, x: &[f64]) -> [[f64; 2]; 2];
    fn flux_drift(&self, _x: &[f64]) -> [f64; 2] {
        [0.0; 2]
    }
    fn advection(&self, _x: &[f64]) -> [f64; 2] {
        [0.0; 2]
    }
    fn reaction(&self, _x: &[f64]) -> f64 {
        0.0
    }
}

/// Linear combination of nodal values representing one face flux.
#[derive(Debug, Clone, Default)]
struct FaceStencil {
    terms: Vec<(usize, f64)>,
}

impl FaceStencil {
    fn apply(&self, u: &[f64]) -> f64 {
        self.terms.iter().map(|(p, c)| c * u[*p]).sum()
    }
}

/// Flux across the face between node `p` and its `+e_dir` neighbour:
/// `a^{dir,j}D_j u + 𝔟^{dir} u` at the face midpoint.
fn face_stencil(geom: &GridGeometry, coeffs: &dyn OperatorCoefficients, p: usize, dir: usize) -> FaceStencil {
    let h = geom.h;
    let (i, j) = geom.coords(p);
    let q = if dir == 0 { geom.index(i + 1, j) } else { geom.index(i, j + 1) };
    let mut x = geom.point(p);
    x[dir] += 0.5 * h;
    let xs = &x[..geom.dim];
    let a = coeffs.diffusion(xs);
    let fb = coeffs.flux_drift(xs);
    let mut terms = vec![(q, a[dir][dir] / h), (p, -a[dir][dir] / h), (q, 0.5 * fb[dir]), (p, 0.5 * fb[dir])];
    if geom.dim == 2 {
        let other = 1 - dir;
        let c = a[dir][other] / (4.0 * h);
        if c != 0.0 {
            // transverse derivative averaged over the two nodes of the face
            for &node in &[p, q] {
                let (ni, nj) = geom.coords(node);
                let (plus, minus) = if other == 1 {
                    (geom.index(ni, nj + 1), geom.index(ni, nj - 1))
                } else {
                    (geom.index(ni + 1, nj), geom.index(ni - 1, nj))
                };
                terms.push((plus, c));
                terms.push((minus, -c));
            }
        }
    }
    FaceStencil { terms }
}

/// Left nodes of the faces in direction `dir` that touch an interior node.
pub fn face_nodes(geom: &GridGeometry, dir: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let (n0, n1) = (geom.n[0], geom.n[1]);
    if dir == 0 {
        let jr = if geom.dim == 2 { 1..n1 - 1 } else { 0..1 };
        for j in jr {
            for i in 0..n0 - 1 {
                out.push(geom.index(i, j));
            }
        }
    } else {
        for j in 0..n1 - 1 {
            for i in 1..n0 - 1 {
                out.push(geom.index(i, j));
            }
        }
    }
    out
}

/// `(left node, right node, midpoint)` for every face in direction `dir`.
pub fn face_list(geom: &GridGeometry, dir: usize) -> Vec<(usize, usize, [f64; 2])> {
    face_nodes(geom, dir)
        .into_iter()
        .map(|p| {
            let mut x = geom.point(p);
            x[dir] += 0.5 * geom.h;
            (p, neighbour(geom, p, dir), x)
        })
        .collect()
}

fn faces(geom: &GridGeometry, coeffs: &dyn OperatorCoefficients, dir: usize) -> Vec<(usize, FaceStencil)> {
    face_nodes(geom, dir).into_iter().map(|p| (p, face_stencil(geom, coeffs, p, dir))).collect()
}

fn neighbour(geom: &GridGeometry, p: usize, dir: usize) -> usize {
    let (i, j) = geom.coords(p);
    if dir == 0 {
        geom.index(i + 1, j)
    } else {
        geom.index(i, j + 1)
    }
}

/// Prescribed flux `x ↦ f(x)` added on every face.
pub type FreeFlux<'a> = &'a dyn Fn(&[f64]) -> [f64; 2];

/// Face fluxes `a^{ij}D_j u + 𝔟^i u` (plus an optional free flux `f^i`) for
/// each direction: `(left node, right node, value)`.
pub fn face_fluxes(
    geom: &GridGeometry,
    coeffs: &dyn OperatorCoefficients,
    u: &[f64],
    free_flux: Option<FreeFlux<'_>>,
) -> Vec<Vec<(usize, usize, f64)>> {
    (0..geom.dim)
        .map(|dir| {
            faces(geom, coeffs, dir)
                .into_iter()
                .map(|(p, st)| {
                    let q = neighbour(geom, p, dir);
                    let mut v = st.apply(u);
                    if let Some(f) = free_flux {
                        let mut x = geom.point(p);
                        x[dir] += 0.5 * geom.h;
                        v += f(&x[..geom.dim])[dir];
                    }
                    (p, q, v)
                })
                .collect()
        })
        .collect()
}

/// Assembled `D_i(a^{ij}D_j u + 𝔟^i u) + b^i D_i u − c u` on interior rows.
pub fn assemble_operator(geom: &GridGeometry, coeffs: &dyn OperatorCoefficients) -> CsrMatrix {
    let n = geom.len();
    let h = geom.h;
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for dir in 0..geom.dim {
        for (p, st) in faces(geom, coeffs, dir) {
            let q = neighbour(geom, p, dir);
            // flux leaves p through its + face and enters q through its − face
            if !geom.is_boundary(p) {
                rows[p].extend(st.terms.iter().map(|(c, v)| (*c, v / h)));
            }
            if !geom.is_boundary(q) {
                rows[q].extend(st.terms.iter().map(|(c, v)| (*c, -v / h)));
            }
        }
    }
    for p in geom.interior() {
        let x = geom.point(p);
        let xs = &x[..geom.dim];
        let b = coeffs.advection(xs);
        let (i, j) = geom.coords(p);
        rows[p].push((geom.index(i + 1, j), b[0] / (2.0 * h)));
        rows[p].push((geom.index(i - 1, j), -b[0] / (2.0 * h)));
        if geom.dim == 2 {
            rows[p].push((geom.index(i, j + 1), b[1] / (2.0 * h)));
            rows[p].push((geom.index(i, j - 1), -b[1] / (2.0 * h)));
        }
        rows[p].push((p, -coeffs.reaction(xs)));
    }
    // boundary columns multiply zeros; drop them so the matrix acts on interior data only
    for (p, row) in rows.iter_mut().enumerate() {
        if geom.is_boundary(p) {
            row.clear();
        } else {
            row.retain(|(c, _)| !geom.is_boundary(*c));
        }
    }
    CsrMatrix::from_rows(n, rows)
}

/// Divergence of face fluxes at interior nodes.
pub fn flux_divergence(geom: &GridGeometry, fluxes: &[Vec<(usize, usize, f64)>]) -> Vec<f64> {
    let mut out = vec![0.0; geom.len()];
    for dir_faces in fluxes {
        for &(p, q, v) in dir_faces {
            out[p] += v / geom.h;
            out[q] -= v / geom.h;
        }
    }
    for (p, o) in out.iter_mut().enumerate() {
        if geom.is_boundary(p) {
            *o = 0.0;
        }
    }
    out
}

/// Central-difference gradient at interior nodes (zero on the boundary).
pub fn central_gradient(geom: &GridGeometry, u: &[f64]) -> Vec<[f64; 2]> {
    let h2 = 2.0 * geom.h;
    (0..geom.len())
        .map(|p| {
            if geom.is_boundary(p) {
                return [0.0; 2];
            }
            let (i, j) = geom.coords(p);
            let gx = (u[geom.index(i + 1, j)] - u[geom.index(i - 1, j)]) / h2;
            let gy = if geom.dim == 2 { (u[geom.index(i, j + 1)] - u[geom.index(i, j - 1)]) / h2 } else { 0.0 };
            [gx, gy]
        })
        .collect()
}

/// `s^i(x) D_i u + m(x) u` by central differences, interior only.
pub fn apply_first_order(
    geom: &GridGeometry,
    grad_coeff: &dyn Fn(&[f64]) -> [f64; 2],
    multiplier: &dyn Fn(&[f64]) -> f64,
    u: &[f64],
) -> Vec<f64> {
    let grad = central_gradient(geom, u);
    (0..geom.len())
        .map(|p| {
            if geom.is_boundary(p) {
                return 0.0;
            }
            let x = geom.point(p);
            let xs = &x[..geom.dim];
            let s = grad_coeff(xs);
            s[0] * grad[p][0] + s[1] * grad[p][1] + multiplier(xs) * u[p]
        })
        .collect()
}

/// Solves `(I − dt A) u = rhs` on the interior; boundary values stay zero.
pub fn implicit_solve(geom: &GridGeometry, a: &CsrMatrix, dt: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    let interior = geom.interior();
    let mut map = vec![usize::MAX; geom.len()];
    for (k, p) in interior.iter().enumerate() {
        map[*p] = k;
    }
    let rows: Vec<Vec<(usize, f64)>> = interior
        .iter()
        .map(|&p| {
            let mut r: Vec<(usize, f64)> = a.row(p).map(|(c, v)| (map[c], -dt * v)).collect();
            r.push((map[p], 1.0));
            r
        })
        .collect();
    let m = CsrMatrix::from_rows(interior.len(), rows);
    let b: Vec<f64> = interior.iter().map(|&p| rhs[p]).collect();
    let sol = if geom.dim == 1 {
        let (lo, di, up) = m.as_tridiagonal().ok_or_else(|| Error::SolveFailed("1-D operator is not tridiagonal".into()))?;
        solve_tridiagonal(&lo, &di, &up, &b)?
    } else {
        bicgstab(&m, &b, &b, 1e-13, 2000)?
    };
    let mut out = vec![0.0; geom.len()];
    for (k, p) in interior.iter().enumerate() {
        out[*p] = sol[k];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    struct Const {
        a: [[f64; 2]; 2],
        fb: [f64; 2],
        b: [f64; 2],
        c: f64,
    }

    impl OperatorCoefficients for Const {
        fn diffusion(&self, _x: &[f64]) -> [[f64; 2]; 2] {
            self.a
        }
        fn flux_drift(&self, x: &[f64]) -> [f64; 2] {
            [self.fb[0] * (1.0 + x[0]), self.fb[1]]
        }
        fn advection(&self, _x: &[f64]) -> [f64; 2] {
            self.b
        }
        fn reaction(&self, _x: &[f64]) -> f64 {
            self.c
        }
    }

    fn random_field(geom: &GridGeometry) -> Vec<f64> {
        geom.sample(|x| (3.1 * x[0]).sin() + 0.5 * x.get(1).map_or(0.0, |y| (1.7 * y).cos()) + 1.3)
    }

    #[test]
    fn assembled_matrix_equals_flux_divergence() {
        for dim in [1, 2] {
            let geom = GridGeometry::symmetric(dim, 1.0, 0.1).unwrap();
            let c = Const { a: [[0.7, 0.2], [0.2, 0.5]], fb: [0.3, -0.4], b: [0.6, 0.1], c: 0.25 };
            let u = random_field(&geom);
            let a = assemble_operator(&geom, &c);
            let lhs = a.matvec(&u);
            let div = flux_divergence(&geom, &face_fluxes(&geom, &c, &u, None));
            let grad = central_gradient(&geom, &u);
            for p in geom.interior() {
                let want = div[p] + c.b[0] * grad[p][0] + c.b[1] * grad[p][1] - c.c * u[p];
                assert_relative_eq!(lhs[p], want, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn trapezoid_integrates_gaussian() {
        let geom = GridGeometry::symmetric(1, 8.0, 0.05).unwrap();
        let v = geom.sample_all(|x| (-0.5 * x[0] * x[0]).exp() / (2.0 * std::f64::consts::PI).sqrt());
        assert_relative_eq!(geom.integrate(&v), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn moments_of_shifted_gaussian() {
        let geom = GridGeometry::symmetric(1, 10.0, 0.05).unwrap();
        let mu = 1.5;
        let g = DensityGrid::new(
            geom.clone(),
            geom.sample(|x| (-0.5 * (x[0] - mu).powi(2)).exp()),
            DensityKind::PiBar,
        )
        .unwrap();
        let m = g.moments().unwrap();
        assert_relative_eq!(m.mean[0], mu, epsilon = 1e-8);
        assert_relative_eq!(m.cov[(0, 0)], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn implicit_solve_2d_matches_residual() {
        let geom = GridGeometry::symmetric(2, 1.0, 0.1).unwrap();
        let c = Const { a: [[0.5, 0.1], [0.1, 0.4]], fb: [0.0, 0.0], b: [0.3, -0.2], c: 0.0 };
        let a = assemble_operator(&geom, &c);
        let rhs = random_field(&geom);
        let u = implicit_solve(&geom, &a, 0.01, &rhs).unwrap();
        let au = a.matvec(&u);
        for p in geom.interior() {
            assert!((u[p] - 0.01 * au[p] - rhs[p]).abs() < 1e-10);
        }
    }

    #[test]
    fn boundary_is_zeroed() {
        let geom = GridGeometry::symmetric(2, 1.0, 0.25).unwrap();
        let g = DensityGrid::new(geom.clone(), vec![1.0; geom.len()], DensityKind::PiBar).unwrap();
        for p in 0..geom.len() {
            assert_eq!(g.values[p] == 0.0, geom.is_boundary(p));
        }
    }
}
