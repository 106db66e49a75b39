//! Discrete probability measures and log-density models.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::costs::{norm, Geometry};
use crate::numerics::{kl_log_weights, log_sum_exp};
use crate::{Error, Result};

/// Atoms whose normalized weight falls below this are dropped.
pub const WEIGHT_FLOOR: f64 = 1e-300;

/// Sphere points must have unit norm within this tolerance.
pub const SPHERE_TOL: f64 = 1e-12;

/// A weighted finite point set on a fixed geometry.
///
/// Weights are strictly positive and sum to one. They are stored both
/// directly and as logarithms so log-domain kernels never take `log(0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    geometry: Geometry,
    points: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Builds a measure from raw nonnegative weights, normalizing them.
    pub fn new(geometry: Geometry, points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        let logs = weights.iter().map(|w| w.ln()).collect();
        Self::from_log_weights(geometry, points, logs)
    }

    /// Builds a measure from unnormalized log weights. `-inf` entries are
    /// zero weights.
    pub fn from_log_weights(geometry: Geometry, points: Vec<Vec<f64>>, log_weights: Vec<f64>) -> Result<Self> {
        if points.len() != log_weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} points but {} weights",
                points.len(),
                log_weights.len()
            )));
        }
        for p in &points {
            geometry.check_point(p, SPHERE_TOL)?;
        }
        if log_weights.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::InvalidArgument("log weights must be finite or -inf".into()));
        }
        let flat: Vec<f64> = points.into_iter().flatten().collect();
        Self::normalized(geometry, flat, log_weights, true)
    }

    /// Normalizes flat data, optionally dropping atoms below [`WEIGHT_FLOOR`].
    fn normalized(geometry: Geometry, points: Vec<f64>, mut log_weights: Vec<f64>, drop: bool) -> Result<Self> {
        let d = geometry.ambient_dim();
        let lse = log_sum_exp(&log_weights);
        if !lse.is_finite() {
            return Err(Error::EmptySupport);
        }
        log_weights.iter_mut().for_each(|l| *l -= lse);
        let floor = WEIGHT_FLOOR.ln();
        if drop && log_weights.iter().any(|&l| l < floor) {
            let keep: Vec<usize> = (0..log_weights.len()).filter(|&i| log_weights[i] >= floor).collect();
            if keep.is_empty() {
                return Err(Error::EmptySupport);
            }
            let pts = keep.iter().flat_map(|&i| points[i * d..(i + 1) * d].iter().copied()).collect();
            let lw = keep.iter().map(|&i| log_weights[i]).collect();
            return Self::normalized(geometry, pts, lw, false);
        }
        let weights = log_weights.iter().map(|l| l.exp()).collect();
        Ok(DiscreteMeasure { geometry, points, weights, log_weights })
    }

    /// Measure on already validated flat points that keeps every atom, so
    /// the result stays index-aligned with its source.
    pub(crate) fn aligned(geometry: Geometry, points: Vec<f64>, log_weights: Vec<f64>) -> Result<Self> {
        Self::normalized(geometry, points, log_weights, false)
    }

    pub fn uniform(geometry: Geometry, points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        Self::from_log_weights(geometry, points, vec![0.0; n])
    }

    pub fn dirac(geometry: Geometry, point: Vec<f64>) -> Result<Self> {
        Self::from_log_weights(geometry, vec![point], vec![0.0])
    }

    /// Same atoms with weights multiplied by `exp(log_factors)` and renormalized.
    pub fn reweighted(&self, log_factors: &[f64]) -> Result<Self> {
        if log_factors.len() != self.len() {
            return Err(Error::ShapeMismatch("one factor per atom required".into()));
        }
        let lw = self.log_weights.iter().zip(log_factors).map(|(a, b)| a + b).collect();
        Self::normalized(self.geometry, self.points.clone(), lw, true)
    }

    /// Same weights on new atom locations.
    pub fn with_points(&self, points: Vec<Vec<f64>>) -> Result<Self> {
        if points.len() != self.len() {
            return Err(Error::ShapeMismatch("one point per atom required".into()));
        }
        Self::from_log_weights(self.geometry, points, self.log_weights.clone())
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    /// Number of atoms.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Coordinates per atom.
    pub fn dim(&self) -> usize {
        self.geometry.ambient_dim()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.points[i * d..(i + 1) * d]
    }

    /// Row-major coordinates, `len() * dim()` entries.
    pub fn flat_points(&self) -> &[f64] {
        &self.points
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Whether the two measures have identical atoms in identical order.
    pub fn same_support(&self, other: &Self) -> bool {
        self.geometry == other.geometry && self.points == other.points
    }

    fn check_aligned(&self, other: &Self) -> Result<()> {
        if self.geometry != other.geometry {
            return Err(Error::GeometryMismatch("measures live on different geometries".into()));
        }
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!("{} atoms against {}", self.len(), other.len())));
        }
        Ok(())
    }

    /// Total variation `½Σ|pᵢ - qᵢ|` between index-aligned measures.
    pub fn total_variation(&self, other: &Self) -> Result<f64> {
        self.check_aligned(other)?;
        Ok(0.5 * self.weights.iter().zip(&other.weights).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }

    /// `KL(self|other)` between index-aligned measures.
    pub fn kl(&self, other: &Self) -> Result<f64> {
        self.check_aligned(other)?;
        kl_log_weights(&self.log_weights, &other.log_weights)
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for (p, w) in self.points().zip(&self.weights) {
            for k in 0..d {
                m[k] += w * p[k];
            }
        }
        m
    }

    /// Weighted covariance of the coordinates (two-pass).
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = self.mean();
        let mut c = DMatrix::zeros(d, d);
        for (p, w) in self.points().zip(&self.weights) {
            for a in 0..d {
                for b in 0..d {
                    c[(a, b)] += w * (p[a] - m[a]) * (p[b] - m[b]);
                }
            }
        }
        c
    }

    /// Per-axis `(min, max)` of the atoms.
    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        let d = self.dim();
        let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
        for p in self.points() {
            for k in 0..d {
                b[k].0 = b[k].0.min(p[k]);
                b[k].1 = b[k].1.max(p[k]);
            }
        }
        b
    }

    /// Largest distance of an atom from `center`.
    pub fn radius_about(&self, center: &[f64]) -> f64 {
        self.points().map(|p| self.geometry.distance(p, center)).fold(0.0, f64::max)
    }

    /// Writes one row per atom: `x_1, ..., x_d, weight`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.dim();
        let mut header: Vec<String> = (1..=d).map(|k| format!("x_{k}")).collect();
        header.push("weight".into());
        w.write_record(&header)?;
        for (p, wt) in self.points().zip(&self.weights) {
            let mut row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            row.push(wt.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads the format of [`DiscreteMeasure::write_csv`]; weights are renormalized.
    pub fn read_csv<R: Read>(input: R, geometry: Geometry) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let d = geometry.ambient_dim();
        let header = r.headers()?.clone();
        if header.len() != d + 1 || header.get(d) != Some("weight") {
            return Err(Error::ShapeMismatch(format!("expected header x_1..x_{d},weight")));
        }
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidArgument(format!("bad number in measure CSV: {e}")))?;
            if vals.len() != d + 1 {
                return Err(Error::ShapeMismatch("ragged measure CSV".into()));
            }
            weights.push(vals[d]);
            points.push(vals[..d].to_vec());
        }
        Self::new(geometry, points, weights)
    }

    pub fn load_csv(path: impl AsRef<Path>, geometry: Geometry) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, geometry)
    }
}

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// What is known about a potential `U` with `ρ ∝ e^{-U}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelTag {
    /// `∇²U ⪰ α`.
    StronglyLogConcave { alpha: f64 },
    /// Gradient monotonicity `α|Δx|² - |Δx| f_L(|Δx|)`, see [`f_weak`].
    WeaklyLogConcave { alpha: f64, l: f64 },
    /// `∇²U ⪰ C|x|^δ` outside `B_R`, `⪰ -L` inside.
    LightTails { c: f64, delta: f64, r: f64, l: f64 },
    Custom,
}

/// A potential with gradient and optional Hessian.
#[derive(Clone)]
pub struct LogDensityModel {
    potential: ScalarFn,
    gradient: VectorFn,
    hessian: Option<MatrixFn>,
    tag: ModelTag,
}

impl fmt::Debug for LogDensityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LogDensityModel")
            .field("tag", &self.tag)
            .field("has_hessian", &self.hessian.is_some())
            .finish()
    }
}

fn sq(x: &[f64], m: &[f64]) -> f64 {
    x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum()
}

impl LogDensityModel {
    pub fn new(
        potential: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        tag: ModelTag,
    ) -> Result<Self> {
        validate_tag(tag)?;
        Ok(LogDensityModel { potential: Arc::new(potential), gradient: Arc::new(gradient), hessian: None, tag })
    }

    pub fn with_hessian(mut self, hessian: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.hessian = Some(Arc::new(hessian));
        self
    }

    /// `U(x) = α|x - m|²/2`.
    pub fn gaussian(alpha: f64, mean: Vec<f64>) -> Result<Self> {
        let (m1, d) = (mean.clone(), mean.len());
        Ok(Self::new(
            move |x| 0.5 * alpha * sq(x, &mean),
            move |x| x.iter().zip(&m1).map(|(a, b)| alpha * (a - b)).collect(),
            ModelTag::StronglyLogConcave { alpha },
        )?
        .with_hessian(move |_| DMatrix::identity(d, d) * alpha))
    }

    /// `U(x) = α|x - m|²/2 + β|x - m|⁴/4`, strongly log-concave with constant α.
    pub fn quartic(alpha: f64, beta: f64, mean: Vec<f64>) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(Error::InvalidArgument("β must be nonnegative".into()));
        }
        let (m1, m2) = (mean.clone(), mean.clone());
        Ok(Self::new(
            move |x| {
                let r2 = sq(x, &mean);
                0.5 * alpha * r2 + 0.25 * beta * r2 * r2
            },
            move |x| {
                let r2 = sq(x, &m1);
                x.iter().zip(&m1).map(|(a, b)| (alpha + beta * r2) * (a - b)).collect()
            },
            ModelTag::StronglyLogConcave { alpha },
        )?
        .with_hessian(move |x| {
            let d = x.len();
            let v = nalgebra::DVector::from_iterator(d, x.iter().zip(&m2).map(|(a, b)| a - b));
            let r2 = v.norm_squared();
            DMatrix::identity(d, d) * (alpha + beta * r2) + &v * v.transpose() * (2.0 * beta)
        }))
    }

    /// `U(x) = |x|⁴ - M|x|²`, a double well.
    pub fn double_well(m: f64) -> Result<Self> {
        Ok(Self::new(
            move |x| {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                r2 * r2 - m * r2
            },
            move |x| {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                x.iter().map(|v| (4.0 * r2 - 2.0 * m) * v).collect()
            },
            ModelTag::Custom,
        )?
        .with_hessian(move |x| {
            let d = x.len();
            let v = nalgebra::DVector::from_column_slice(x);
            let r2 = v.norm_squared();
            DMatrix::identity(d, d) * (4.0 * r2 - 2.0 * m) + &v * v.transpose() * 8.0
        }))
    }

    /// `U ≡ 0`, the uniform density on whatever box it is discretized over.
    pub fn uniform() -> Self {
        LogDensityModel {
            potential: Arc::new(|_| 0.0),
            gradient: Arc::new(|x| vec![0.0; x.len()]),
            hessian: Some(Arc::new(|x| DMatrix::zeros(x.len(), x.len()))),
            tag: ModelTag::Custom,
        }
    }

    /// `U(x) = |x|^q + δ|x|²`. Tagged light-tailed with `C = q`, exponent
    /// `q - 2` and `R = L = 0` when `q > 2`.
    pub fn heavy_rho(q: f64, delta: f64) -> Result<Self> {
        if !(q >= 2.0) || !(delta >= 0.0) {
            return Err(Error::InvalidArgument("need q ≥ 2 and δ ≥ 0".into()));
        }
        let tag = if q > 2.0 {
            ModelTag::LightTails { c: q, delta: q - 2.0, r: 0.0, l: 0.0 }
        } else {
            ModelTag::StronglyLogConcave { alpha: 2.0 + 2.0 * delta }
        };
        Self::new(
            move |x| {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                r2.powf(0.5 * q) + delta * r2
            },
            move |x| {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                let f = if r2 > 0.0 { q * r2.powf(0.5 * q - 1.0) } else { 0.0 };
                x.iter().map(|v| (f + 2.0 * delta) * v).collect()
            },
            tag,
        )
    }

    /// `U(y) = min{|y|², |y|_p^p}`.
    pub fn heavy_nu(p: f64) -> Result<Self> {
        if !(p > 1.0 && p < 2.0) {
            return Err(Error::InvalidArgument("need p in (1,2)".into()));
        }
        Self::new(
            move |y| {
                let a: f64 = y.iter().map(|v| v * v).sum();
                let b: f64 = y.iter().map(|v| v.abs().powf(p)).sum();
                a.min(b)
            },
            move |y| {
                let a: f64 = y.iter().map(|v| v * v).sum();
                let b: f64 = y.iter().map(|v| v.abs().powf(p)).sum();
                if a <= b {
                    y.iter().map(|v| 2.0 * v).collect()
                } else {
                    y.iter().map(|v| p * v.signum() * v.abs().powf(p - 1.0)).collect()
                }
            },
            ModelTag::Custom,
        )
    }

    pub fn potential(&self, x: &[f64]) -> f64 {
        (self.potential)(x)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (self.gradient)(x)
    }

    pub fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        self.hessian.as_ref().map(|h| h(x))
    }

    pub fn tag(&self) -> ModelTag {
        self.tag
    }
}

fn validate_tag(tag: ModelTag) -> Result<()> {
    let ok = match tag {
        ModelTag::StronglyLogConcave { alpha } => alpha > 0.0 && alpha.is_finite(),
        ModelTag::WeaklyLogConcave { alpha, l } => alpha > 0.0 && l >= 0.0,
        ModelTag::LightTails { c, delta, r, l } => c > 0.0 && delta > 0.0 && r >= 0.0 && l >= 0.0,
        ModelTag::Custom => true,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("invalid model parameters {tag:?}")))
    }
}

/// Discretizes `e^{-U}` on a regular grid over `bbox` (last axis fastest).
pub fn build_grid_measure(model: &LogDensityModel, bbox: &[(f64, f64)], resolution: &[usize]) -> Result<DiscreteMeasure> {
    let axes = grid_axes(bbox, resolution)?;
    let points = grid_points(&axes);
    let logw = points.iter().map(|p| -model.potential(p)).map(|l| if l.is_nan() { f64::NEG_INFINITY } else { l }).collect();
    DiscreteMeasure::from_log_weights(Geometry::Euclidean(bbox.len()), points, logw)
}

fn grid_axes(bbox: &[(f64, f64)], resolution: &[usize]) -> Result<Vec<Vec<f64>>> {
    if bbox.is_empty() || bbox.len() != resolution.len() {
        return Err(Error::ShapeMismatch("one resolution per box axis required".into()));
    }
    bbox.iter()
        .zip(resolution)
        .map(|(&(lo, hi), &n)| {
            if n < 2 {
                return Err(Error::InvalidArgument("resolution must be at least 2 per axis".into()));
            }
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidArgument(format!("degenerate box axis [{lo}, {hi}]")));
            }
            let h = (hi - lo) / (n - 1) as f64;
            Ok((0..n).map(|k| if k == n - 1 { hi } else { lo + k as f64 * h }).collect())
        })
        .collect()
}

fn grid_points(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![vec![]];
    for axis in axes {
        out = out.into_iter().flat_map(|p| axis.iter().map(move |&v| [p.clone(), vec![v]].concat())).collect();
    }
    out
}

/// `n` nearly uniform points on `S²` (Fibonacci lattice).
pub fn fibonacci_sphere(n: usize) -> Vec<Vec<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - (2.0 * k as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * k as f64;
            let p = [r * t.cos(), r * t.sin(), z];
            let s = norm(&p);
            p.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Talagrand constant `τ = 1/α` of an α-log-concave measure.
pub fn ti_constant(model: &LogDensityModel) -> Result<f64> {
    match model.tag {
        ModelTag::StronglyLogConcave { alpha } => Ok(1.0 / alpha),
        _ => Err(Error::NoClosedFormTi),
    }
}

/// `f_L(r) = 2√L tanh(√L r / 2)`.
pub fn f_weak(r: f64, l: f64) -> f64 {
    let s = l.sqrt();
    2.0 * s * (0.5 * s * r).tanh()
}

/// Sampled convexity profile: for each radius `r`, the smallest quotient
/// `⟨∇U(x̂) - ∇U(x), x̂ - x⟩/r²` over antipodal pairs `x, x̂ = c ∓ (r/2)u`
/// with centers `c` uniform in `bbox` and `u` a random unit vector. Sampling
/// can only miss the infimum, so each value is an upper estimate.
pub fn convexity_profile(
    model: &LogDensityModel,
    radii: &[f64],
    samples: usize,
    seed: u64,
    bbox: &[(f64, f64)],
) -> Result<Vec<(f64, f64)>> {
    if radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::InvalidArgument("radii must be positive".into()));
    }
    if samples == 0 || bbox.is_empty() {
        return Err(Error::InvalidArgument("need samples and a nonempty box".into()));
    }
    let d = bbox.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(radii.len());
    for &r in radii {
        let mut best = f64::INFINITY;
        for _ in 0..samples {
            let c: Vec<f64> = bbox.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
            let mut u: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let un = norm(&u);
            if un < 1e-12 {
                continue;
            }
            u.iter_mut().for_each(|v| *v /= un);
            let x: Vec<f64> = c.iter().zip(&u).map(|(a, b)| a - 0.5 * r * b).collect();
            let xh: Vec<f64> = c.iter().zip(&u).map(|(a, b)| a + 0.5 * r * b).collect();
            let (g, gh) = (model.gradient(&x), model.gradient(&xh));
            let q: f64 = (0..d).map(|k| (gh[k] - g[k]) * (xh[k] - x[k])).sum::<f64>() / (r * r);
            best = best.min(q);
        }
        out.push((r, best));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn line(points: &[f64]) -> Vec<Vec<f64>> {
        points.iter().map(|&v| vec![v]).collect()
    }

    #[test]
    fn grid_uniform_two_atoms() {
        let m = build_grid_measure(&LogDensityModel::uniform(), &[(0.0, 1.0)], &[2]).unwrap();
        assert_eq!(m.flat_points(), &[0.0, 1.0]);
        assert_eq!(m.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn grid_gaussian_three_atoms() {
        let model = LogDensityModel::gaussian(1.0, vec![0.0]).unwrap();
        let m = build_grid_measure(&model, &[(-1.0, 1.0)], &[3]).unwrap();
        let raw = [(-0.5f64).exp(), 1.0, (-0.5f64).exp()];
        let z: f64 = raw.iter().sum();
        for (w, r) in m.weights().iter().zip(raw) {
            assert_relative_eq!(*w, r / z, epsilon = 1e-15);
        }
    }

    #[test]
    fn grid_infinite_potential_is_empty() {
        let model = LogDensityModel::new(|_| f64::INFINITY, |x| vec![0.0; x.len()], ModelTag::Custom).unwrap();
        assert!(matches!(build_grid_measure(&model, &[(0.0, 1.0)], &[4]), Err(Error::EmptySupport)));
    }

    #[test]
    fn grid_order_is_row_major() {
        let m = build_grid_measure(&LogDensityModel::uniform(), &[(0.0, 1.0), (0.0, 2.0)], &[2, 3]).unwrap();
        assert_eq!(m.point(0), &[0.0, 0.0]);
        assert_eq!(m.point(1), &[0.0, 1.0]);
        assert_eq!(m.point(3), &[1.0, 0.0]);
    }

    #[test]
    fn ti_constant_examples() {
        assert_eq!(ti_constant(&LogDensityModel::gaussian(1.0, vec![0.0]).unwrap()).unwrap(), 1.0);
        assert_eq!(ti_constant(&LogDensityModel::gaussian(4.0, vec![0.0]).unwrap()).unwrap(), 0.25);
        let weak = LogDensityModel::new(|_| 0.0, |x| vec![0.0; x.len()], ModelTag::WeaklyLogConcave { alpha: 1.0, l: 1.0 })
            .unwrap();
        assert!(matches!(ti_constant(&weak), Err(Error::NoClosedFormTi)));
    }

    #[test]
    fn convexity_profile_quadratic_is_exact() {
        let model = LogDensityModel::gaussian(2.5, vec![0.0, 0.0]).unwrap();
        let prof = convexity_profile(&model, &[0.1, 1.0, 3.0], 50, 7, &[(-2.0, 2.0), (-2.0, 2.0)]).unwrap();
        for (_, k) in prof {
            assert_relative_eq!(k, 2.5, epsilon = 1e-12);
        }
        assert!(convexity_profile(&model, &[], 10, 1, &[(-1.0, 1.0)]).unwrap().is_empty());
    }

    #[test]
    fn convexity_profile_double_well() {
        // x⁴ - x²: quotient 4(x² + x x̂ + x̂²) - 2, minimized at x = -r/2 with value r² - 2.
        let model = LogDensityModel::new(
            |x| x[0].powi(4) - x[0] * x[0],
            |x| vec![4.0 * x[0].powi(3) - 2.0 * x[0]],
            ModelTag::Custom,
        )
        .unwrap();
        let r = 0.1;
        let prof = convexity_profile(&model, &[r], 20_000, 3, &[(-1.0, 1.0)]).unwrap();
        let oracle = (-2000..=2000)
            .map(|k| {
                let x = k as f64 * 1e-3;
                let xh = x + r;
                ((4.0 * xh.powi(3) - 2.0 * xh) - (4.0 * x.powi(3) - 2.0 * x)) / r
            })
            .fold(f64::INFINITY, f64::min);
        assert_relative_eq!(oracle, r * r - 2.0, epsilon = 1e-9);
        assert!(prof[0].1 >= oracle - 1e-12);
        assert!(prof[0].1 < oracle + 1e-3);
    }

    #[test]
    fn f_weak_examples() {
        assert_eq!(f_weak(3.0, 0.0), 0.0);
        assert_relative_eq!(f_weak(2.0, 1.0), 2.0 * 1f64.tanh(), epsilon = 1e-15);
        assert_relative_eq!(f_weak(1e3, 1.0), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn drops_negligible_atoms() {
        let m = DiscreteMeasure::from_log_weights(Geometry::Euclidean(1), line(&[0.0, 1.0, 2.0]), vec![0.0, -800.0, 0.0])
            .unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.flat_points(), &[0.0, 2.0]);
        let z = DiscreteMeasure::new(Geometry::Euclidean(1), line(&[0.0]), vec![0.0]);
        assert!(matches!(z, Err(Error::EmptySupport)));
    }

    #[test]
    fn sphere_points_must_be_unit() {
        let g = Geometry::Sphere(2);
        assert!(DiscreteMeasure::uniform(g, vec![vec![1.0, 0.0, 0.0]]).is_ok());
        assert!(DiscreteMeasure::uniform(g, vec![vec![1.0, 1e-5, 0.0]]).is_err());
        assert!(DiscreteMeasure::uniform(g, vec![vec![1.0, 0.0]]).is_err());
        for p in fibonacci_sphere(50) {
            assert!((norm(&p) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn csv_roundtrip() {
        let m = DiscreteMeasure::new(Geometry::Euclidean(2), vec![vec![0.1, -2.0], vec![3.0, 1e-7]], vec![1.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x_1,x_2,weight\n"));
        let back = DiscreteMeasure::read_csv(&buf[..], Geometry::Euclidean(2)).unwrap();
        assert_eq!(back.flat_points(), m.flat_points());
        assert!(back.total_variation(&m).unwrap() < 1e-16);
    }

    #[test]
    fn kl_between_measures() {
        let g = Geometry::Euclidean(1);
        let p = DiscreteMeasure::new(g, line(&[0.0, 1.0]), vec![0.3, 0.7]).unwrap();
        let q = DiscreteMeasure::uniform(g, line(&[0.0, 1.0])).unwrap();
        assert_relative_eq!(p.kl(&q).unwrap(), 0.3 * 0.6f64.ln() + 0.7 * 1.4f64.ln(), epsilon = 1e-15);
        assert_eq!(p.kl(&p).unwrap(), 0.0);
        let r = DiscreteMeasure::uniform(g, line(&[0.0])).unwrap();
        assert!(matches!(p.kl(&r), Err(Error::ShapeMismatch(_))));
    }
}
