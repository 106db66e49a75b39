//! Cost families with derivative oracles, and the geometry they live on.
//!
//! Euclidean families are translation invariant, `c(x, y) = h(x - y)`, so
//! `∇₁c = ∇h`, `∇₂c = -∇h`, `∇₁²c = ∇₂²c = ∇²h` and `∇₁∇₂c = -∇²h`.
//!
//! On the sphere `Sᵈ ⊂ Rᵈ⁺¹` gradients and Hessians are Riemannian: they are
//! returned as ambient vectors and `(d+1)×(d+1)` matrices with the normal
//! direction projected out.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

const UNIT_TOL: f64 = 1e-10;

/// Underlying space of a measure or cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometry {
    /// `Rᵈ` with the Euclidean metric.
    Euclidean(usize),
    /// The unit sphere `Sᵈ` in `Rᵈ⁺¹` with the angular metric.
    Sphere(usize),
}

impl Geometry {
    /// Length of a coordinate vector.
    pub fn ambient_dim(&self) -> usize {
        match *self {
            Geometry::Euclidean(d) => d,
            Geometry::Sphere(d) => d + 1,
        }
    }

    /// Manifold dimension.
    pub fn intrinsic_dim(&self) -> usize {
        match *self {
            Geometry::Euclidean(d) | Geometry::Sphere(d) => d,
        }
    }

    pub fn is_sphere(&self) -> bool {
        matches!(self, Geometry::Sphere(_))
    }

    /// Checks the coordinate count and, on the sphere, the unit norm.
    pub fn check_point(&self, p: &[f64], tol: f64) -> Result<()> {
        if p.len() != self.ambient_dim() {
            return Err(Error::GeometryMismatch(format!(
                "point has {} coordinates, geometry {:?} needs {}",
                p.len(),
                self,
                self.ambient_dim()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coordinate".into()));
        }
        if self.is_sphere() {
            let n = norm(p);
            if (n - 1.0).abs() > tol {
                return Err(Error::GeometryMismatch(format!("sphere point with norm {n}")));
            }
        }
        Ok(())
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Geometry::Euclidean(_) => x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
            Geometry::Sphere(_) => dot(x, y).clamp(-1.0, 1.0).acos(),
        }
    }

    /// Initial velocity of the unit-time geodesic from `base` to `target`.
    pub fn log_map(&self, base: &[f64], target: &[f64]) -> DVector<f64> {
        let y = DVector::from_column_slice(base);
        let z = DVector::from_column_slice(target);
        match self {
            Geometry::Euclidean(_) => z - y,
            Geometry::Sphere(_) => {
                let c = y.dot(&z).clamp(-1.0, 1.0);
                let theta = c.acos();
                let w = &z - &y * c;
                let wn = w.norm();
                if wn < 1e-300 {
                    DVector::zeros(y.len())
                } else {
                    w * (theta / wn)
                }
            }
        }
    }

    /// Point reached at time `t` along the geodesic with initial velocity `v`.
    pub fn exp_map(&self, base: &[f64], v: &[f64], t: f64) -> Result<DVector<f64>> {
        match self {
            Geometry::Euclidean(_) => {
                Ok(DVector::from_iterator(base.len(), base.iter().zip(v).map(|(b, w)| b + t * w)))
            }
            Geometry::Sphere(_) => sphere_exp(base, v, t),
        }
    }

    /// Orthonormal basis of the tangent space at `y`, as columns.
    pub fn tangent_basis(&self, y: &[f64]) -> DMatrix<f64> {
        match self {
            Geometry::Euclidean(d) => DMatrix::identity(*d, *d),
            Geometry::Sphere(d) => {
                let n = d + 1;
                let yv = DVector::from_column_slice(y);
                let mut cols: Vec<DVector<f64>> = Vec::with_capacity(*d);
                // Gram-Schmidt on the canonical basis, skipping the direction
                // most aligned with y.
                let skip = (0..n)
                    .max_by(|&a, &b| y[a].abs().partial_cmp(&y[b].abs()).unwrap())
                    .unwrap_or(0);
                for k in (0..n).filter(|&k| k != skip) {
                    let mut e = DVector::zeros(n);
                    e[k] = 1.0;
                    e -= &yv * yv.dot(&e);
                    for c in &cols {
                        let proj = c.dot(&e);
                        e -= c * proj;
                    }
                    let en = e.norm();
                    cols.push(e / en);
                }
                DMatrix::from_columns(&cols)
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `cos(t|v|) y + sin(t|v|) v/|v|`, the geodesic of `Sᵈ` started at `y` with
/// velocity `v`.
pub fn sphere_exp(y: &[f64], v: &[f64], t: f64) -> Result<DVector<f64>> {
    if y.len() != v.len() {
        return Err(Error::ShapeMismatch("base point and tangent vector differ in length".into()));
    }
    let ny = norm(y);
    if (ny - 1.0).abs() > UNIT_TOL {
        return Err(Error::GeometryMismatch(format!("base point with norm {ny}")));
    }
    let ip = dot(y, v);
    if ip.abs() > UNIT_TOL * (1.0 + norm(v)) {
        return Err(Error::NotTangent(ip));
    }
    let nv = norm(v);
    let yv = DVector::from_column_slice(y);
    if nv == 0.0 {
        return Ok(yv);
    }
    let s = t * nv;
    let mut out = yv * s.cos() + DVector::from_column_slice(v) * (s.sin() / nv);
    let n = out.norm();
    out /= n;
    Ok(out)
}

/// The STVS cost `|x-y|²/2 + γ² Σᵢ (asinh(|dᵢ|/2γ) + 1/2 - e^{-2 asinh(|dᵢ|/2γ)}/2)`.
pub fn stvs_eval(gamma: f64, x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| stvs_coordinate(gamma, a - b)).sum()
}

fn stvs_coordinate(gamma: f64, d: f64) -> f64 {
    let s = (d.abs() / (2.0 * gamma)).asinh();
    0.5 * d * d + gamma * gamma * (s - 0.5 * (-2.0 * s).exp_m1())
}

/// `L_{p,a}(r)`: `r²/2` up to `a`, then `a^{2-p} r^p / p + a²(p-2)/(2p)`.
pub fn omega_lpa(r: f64, p: f64, a: f64) -> f64 {
    if r <= a {
        0.5 * r * r
    } else {
        a.powf(2.0 - p) * r.powf(p) / p + a * a * (p - 2.0) / (2.0 * p)
    }
}

/// Cost families.
#[derive(Clone, Debug, PartialEq)]
pub enum CostModel {
    /// `|x-y|²/2`.
    HalfSquaredEuclidean,
    /// `⟨x-y, Σ(x-y)⟩/2` with `Σ` symmetric positive definite. Subspace
    /// elastic costs are built through [`CostModel::subspace_elastic`].
    AnisotropicQuadratic { sigma: DMatrix<f64> },
    /// Soft-thresholding with vanishing shrinkage, see [`stvs_eval`].
    Stvs { gamma: f64 },
    /// `(1+|x-y|²)^{p/2} - 1`, `p ∈ (1,2)`.
    PCost { p: f64 },
    /// `1 - ⟨x,y⟩` on the sphere.
    SphereRegular,
    /// `arccos(δ⟨x,y⟩)²` on the sphere, `δ ∈ (0,1)`.
    SphereDelta { delta: f64 },
}

impl CostModel {
    pub fn anisotropic(sigma: DMatrix<f64>) -> Result<Self> {
        if !sigma.is_square() || sigma.nrows() == 0 {
            return Err(Error::InvalidArgument("Σ must be a nonempty square matrix".into()));
        }
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > 1e-12 * (1.0 + sigma.amax()) {
            return Err(Error::InvalidArgument(format!("Σ is not symmetric (max deviation {asym:e})")));
        }
        if sigma.clone().cholesky().is_none() {
            return Err(Error::Singular);
        }
        Ok(CostModel::AnisotropicQuadratic { sigma })
    }

    /// `|x-y|²/2 + (γ/2)|A^⊥(x-y)|²`, i.e. the anisotropic cost with
    /// `Σ = Id + γA^⊥`.
    pub fn subspace_elastic(gamma: f64, a: &DMatrix<f64>) -> Result<Self> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidArgument("γ must be finite and nonnegative".into()));
        }
        let perp = complement_projector(a)?;
        let d = perp.nrows();
        Self::anisotropic(DMatrix::identity(d, d) + perp * gamma)
    }

    pub fn stvs(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidArgument("STVS needs γ > 0".into()));
        }
        Ok(CostModel::Stvs { gamma })
    }

    pub fn pcost(p: f64) -> Result<Self> {
        if !(p > 1.0 && p < 2.0) {
            return Err(Error::InvalidArgument("p-cost needs p in (1,2)".into()));
        }
        Ok(CostModel::PCost { p })
    }

    pub fn sphere_delta(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidArgument("δ must lie in (0,1)".into()));
        }
        Ok(CostModel::SphereDelta { delta })
    }

    /// Whether the family lives on the sphere.
    pub fn is_spherical(&self) -> bool {
        matches!(self, CostModel::SphereRegular | CostModel::SphereDelta { .. })
    }

    /// Rejects geometries the family is not defined on.
    pub fn check_geometry(&self, g: Geometry) -> Result<()> {
        match (self, g) {
            (CostModel::SphereRegular | CostModel::SphereDelta { .. }, Geometry::Sphere(_)) => Ok(()),
            (CostModel::AnisotropicQuadratic { sigma }, Geometry::Euclidean(d)) => {
                if sigma.nrows() == d {
                    Ok(())
                } else {
                    Err(Error::GeometryMismatch(format!("Σ is {0}×{0} but points live in R^{d}", sigma.nrows())))
                }
            }
            (
                CostModel::HalfSquaredEuclidean | CostModel::Stvs { .. } | CostModel::PCost { .. },
                Geometry::Euclidean(_),
            ) => Ok(()),
            _ => Err(Error::GeometryMismatch(format!("{self:?} is not defined on {g:?}"))),
        }
    }

    /// True when `∇₂²c(x,y)` does not depend on `x` or `y`.
    pub fn has_constant_hessian(&self) -> bool {
        matches!(self, CostModel::HalfSquaredEuclidean | CostModel::AnisotropicQuadratic { .. })
    }

    fn check_pair(&self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::GeometryMismatch(format!("points of length {} and {}", x.len(), y.len())));
        }
        if let CostModel::AnisotropicQuadratic { sigma } = self {
            if sigma.nrows() != x.len() {
                return Err(Error::GeometryMismatch("dimension differs from Σ".into()));
            }
        }
        if self.is_spherical() {
            for p in [x, y] {
                let n = norm(p);
                if (n - 1.0).abs() > UNIT_TOL {
                    return Err(Error::GeometryMismatch(format!("sphere cost needs unit vectors, got norm {n}")));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_pair(x, y)?;
        Ok(self.eval_unchecked(x, y))
    }

    /// Evaluation without argument checks, for hot loops over validated supports.
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            CostModel::HalfSquaredEuclidean => 0.5 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            CostModel::AnisotropicQuadratic { sigma } => {
                let d = x.len();
                let mut acc = 0.0;
                for i in 0..d {
                    let di = x[i] - y[i];
                    for j in 0..d {
                        acc += di * sigma[(i, j)] * (x[j] - y[j]);
                    }
                }
                0.5 * acc
            }
            CostModel::Stvs { gamma } => stvs_eval(*gamma, x, y),
            CostModel::PCost { p } => {
                let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (0.5 * p * r2.ln_1p()).exp_m1()
            }
            CostModel::SphereRegular => 1.0 - dot(x, y),
            CostModel::SphereDelta { delta } => {
                let s = dot(x, y).clamp(-1.0, 1.0);
                let a = (delta * s).acos();
                a * a
            }
        }
    }

    /// Gradient of `h` at `d = x - y` for the Euclidean families.
    fn h_grad(&self, d: &[f64]) -> DVector<f64> {
        match self {
            CostModel::HalfSquaredEuclidean => DVector::from_column_slice(d),
            CostModel::AnisotropicQuadratic { sigma } => sigma * DVector::from_column_slice(d),
            CostModel::Stvs { gamma } => DVector::from_iterator(
                d.len(),
                d.iter().map(|&di| {
                    let t = di.abs();
                    // (sqrt(t² + 4γ²) - t)/2 written without cancellation.
                    let slope = 2.0 * gamma * gamma / ((t * t + 4.0 * gamma * gamma).sqrt() + t);
                    di + di.signum() * slope * (di != 0.0) as u8 as f64
                }),
            ),
            CostModel::PCost { p } => {
                let r2: f64 = d.iter().map(|v| v * v).sum();
                let f = p * (1.0 + r2).powf(0.5 * p - 1.0);
                DVector::from_iterator(d.len(), d.iter().map(|v| f * v))
            }
            _ => unreachable!("sphere costs have no translation form"),
        }
    }

    fn h_hess(&self, d: &[f64]) -> DMatrix<f64> {
        let n = d.len();
        match self {
            CostModel::HalfSquaredEuclidean => DMatrix::identity(n, n),
            CostModel::AnisotropicQuadratic { sigma } => sigma.clone(),
            CostModel::Stvs { gamma } => DMatrix::from_diagonal(&DVector::from_iterator(
                n,
                d.iter().map(|&di| 0.5 + 0.5 * di.abs() / (di * di + 4.0 * gamma * gamma).sqrt()),
            )),
            CostModel::PCost { p } => {
                let r2: f64 = d.iter().map(|v| v * v).sum();
                let a = p * (1.0 + r2).powf(0.5 * p - 1.0);
                let b = p * (p - 2.0) * (1.0 + r2).powf(0.5 * p - 2.0);
                let dv = DVector::from_column_slice(d);
                DMatrix::identity(n, n) * a + &dv * dv.transpose() * b
            }
            _ => unreachable!("sphere costs have no translation form"),
        }
    }

    /// Riemannian gradient in the second argument.
    pub fn grad2(&self, x: &[f64], y: &[f64]) -> Result<DVector<f64>> {
        self.check_pair(x, y)?;
        self.grad2_unchecked(x, y)
    }

    pub(crate) fn grad2_unchecked(&self, x: &[f64], y: &[f64]) -> Result<DVector<f64>> {
        match self {
            CostModel::SphereRegular => {
                let s = dot(x, y);
                Ok(DVector::from_iterator(x.len(), x.iter().zip(y).map(|(a, b)| -(a - s * b))))
            }
            CostModel::SphereDelta { delta } => {
                let s = dot(x, y).clamp(-1.0, 1.0);
                let k = delta_slope(*delta, s)?;
                Ok(DVector::from_iterator(x.len(), x.iter().zip(y).map(|(a, b)| -k * (a - s * b))))
            }
            _ => {
                let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                Ok(-self.h_grad(&d))
            }
        }
    }

    /// Riemannian Hessian in the second argument.
    pub fn hess2(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        self.check_pair(x, y)?;
        self.hess2_unchecked(x, y)
    }

    pub(crate) fn hess2_unchecked(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        match self {
            CostModel::SphereRegular => {
                let s = dot(x, y);
                Ok(tangent_projector(y) * s)
            }
            CostModel::SphereDelta { delta } => {
                let s = dot(x, y).clamp(-1.0, 1.0);
                let k = delta_slope(*delta, s)?;
                let mut h = tangent_projector(y) * (k * s);
                let w = DVector::from_iterator(x.len(), x.iter().zip(y).map(|(a, b)| a - s * b));
                let wn = w.norm();
                if wn > 1e-300 {
                    let u = w / wn;
                    let q = 1.0 - delta * delta * s * s;
                    let g2 = 2.0 * delta * delta / q * (1.0 - delta * s * (delta * s).acos() / q.sqrt());
                    h += &u * u.transpose() * (g2 * (1.0 - s * s));
                }
                Ok(h)
            }
            _ => {
                let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                Ok(self.h_hess(&d))
            }
        }
    }

    /// Gradient in the first argument.
    pub fn grad1(&self, x: &[f64], y: &[f64]) -> Result<DVector<f64>> {
        self.check_pair(x, y)?;
        if self.is_spherical() {
            // Both sphere costs are symmetric in (x, y).
            return self.grad2_unchecked(y, x);
        }
        let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        Ok(self.h_grad(&d))
    }

    /// Hessian in the first argument.
    pub fn hess1(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        self.check_pair(x, y)?;
        if self.is_spherical() {
            return self.hess2_unchecked(y, x);
        }
        let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        Ok(self.h_hess(&d))
    }

    /// Mixed derivative `∂²c/∂xᵢ∂yⱼ` (Euclidean families only).
    pub fn crosshess(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        self.check_pair(x, y)?;
        if self.is_spherical() {
            return Err(Error::Unsupported("mixed derivative of sphere costs".into()));
        }
        let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        Ok(-self.h_hess(&d))
    }
}

/// `2δ arccos(δs)/sqrt(1-δ²s²)`, the radial slope of `c_δ`.
fn delta_slope(delta: f64, s: f64) -> Result<f64> {
    let q = 1.0 - delta * delta * s * s;
    if q <= 0.0 {
        return Err(Error::OutsideSmoothDomain);
    }
    Ok(2.0 * delta * (delta * s).acos() / q.sqrt())
}

fn tangent_projector(y: &[f64]) -> DMatrix<f64> {
    let n = y.len();
    let yv = DVector::from_column_slice(y);
    DMatrix::identity(n, n) - &yv * yv.transpose()
}

/// `A^⊥ = Id - Aᵀ(AAᵀ)⁻¹A` for a full-row-rank `A`.
pub fn complement_projector(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = a.ncols();
    if a.nrows() == 0 || a.nrows() > d {
        return Err(Error::InvalidArgument("A must have between 1 and d rows".into()));
    }
    let gram = a * a.transpose();
    let chol = gram.cholesky().ok_or(Error::Singular)?;
    let inner = chol.solve(a);
    Ok(DMatrix::identity(d, d) - a.transpose() * inner)
}
