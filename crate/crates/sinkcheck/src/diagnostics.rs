//! Checks of the Sinkhorn identities and inequalities on concrete runs:
//! conditionals of the plan given `y`, the gradient and Hessian formulas for
//! `ψⁿ`, sampled semiconcavity constants, the KL bound between conditionals,
//! the entropy-difference identity and KL stability of optimal plans.
//!
//! Off-support values of `ψⁿ` always come from the softmin extension
//! `ψⁿ(y) = -Φ(φⁿ)(y)`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::costs::{CostModel, Geometry};
use crate::exact_ot;
use crate::measures::DiscreteMeasure;
use crate::numerics::{kl_log_weights, lambda_max, log_sum_exp, symmetric_norm};
use crate::sinkhorn::{solve_reference, EotProblem, PlanKind, SinkhornState, REFERENCE_MAX_ITER, REFERENCE_TOL};
use crate::{Error, Result};

/// Seed used by the probes unless the caller picks another one.
pub const DEFAULT_PROBE_SEED: u64 = 0x5eed_2024;
/// Central-difference step for gradients.
pub const GRADIENT_FD_STEP: f64 = 1e-5;
/// Central-difference step for Hessians.
pub const HESSIAN_FD_STEP: f64 = 1e-3;
/// Probe pairs closer than this are skipped.
const MIN_PROBE_DISTANCE: f64 = 1e-8;

fn oracle(problem: &EotProblem) -> Result<&CostModel> {
    problem.cost().ok_or_else(|| Error::Unsupported("diagnostic needs a cost oracle, not a raw matrix".into()))
}

/// Normalized log weights of `π(·|y)` on the ρ atoms, and `ψ(y)`, from the
/// cost column at `y`.
fn conditional_logs(problem: &EotProblem, phi: &[f64], col: &[f64]) -> (Vec<f64>, f64) {
    let eps = problem.epsilon();
    let lr = problem.rho().log_weights();
    let mut l: Vec<f64> = (0..lr.len()).map(|i| lr[i] - (col[i] + phi[i]) / eps).collect();
    let lse = log_sum_exp(&l);
    l.iter_mut().for_each(|v| *v -= lse);
    (l, eps * lse)
}

fn conditional_measure(problem: &EotProblem, logs: Vec<f64>) -> Result<DiscreteMeasure> {
    let rho = problem.rho();
    DiscreteMeasure::aligned(rho.geometry(), rho.flat_points().to_vec(), logs)
}

/// `πⁿ(·|yⱼ)` for a ν atom, with weights `∝ ρᵢ e^{-(cᵢⱼ + φᵢ)/ε}`.
pub fn conditional_given_y(state: &SinkhornState, j: usize) -> Result<DiscreteMeasure> {
    let problem = state.problem();
    if j >= problem.nu().len() {
        return Err(Error::InvalidArgument(format!("ν has {} atoms, asked for {j}", problem.nu().len())));
    }
    let (logs, _) = conditional_logs(problem, state.phi(), problem.cost_col(j));
    conditional_measure(problem, logs)
}

/// `πⁿ(·|y)` at an arbitrary point of the geometry.
pub fn conditional_at(state: &SinkhornState, y: &[f64]) -> Result<DiscreteMeasure> {
    let problem = state.problem();
    let col = problem.cost_column_at(y)?;
    let (logs, _) = conditional_logs(problem, state.phi(), &col);
    conditional_measure(problem, logs)
}

/// Weighted mean and two-pass weighted covariance of vectors.
pub fn weighted_mean_cov(weights: &[f64], values: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if weights.len() != values.len() || values.is_empty() {
        return Err(Error::ShapeMismatch("one value per weight, at least one".into()));
    }
    let d = values[0].len();
    if values.iter().any(|v| v.len() != d) {
        return Err(Error::ShapeMismatch("values of different lengths".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut mean = DVector::zeros(d);
    for (w, v) in weights.iter().zip(values) {
        mean.axpy(*w / total, v, 1.0);
    }
    let mut cov = DMatrix::zeros(d, d);
    for (w, v) in weights.iter().zip(values) {
        let c = v - &mean;
        cov.ger(*w / total, &c, &c, 1.0);
    }
    Ok((mean, 0.5 * (&cov + cov.transpose())))
}

/// Mean and covariance of `grad_map(X, y)` for `X ~ πⁿ(·|y)`.
pub fn conditional_mean_cov(
    state: &SinkhornState,
    y: &[f64],
    grad_map: impl Fn(&[f64], &[f64]) -> Result<DVector<f64>>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let cond = conditional_at(state, y)?;
    let values = cond.points().map(|x| grad_map(x, y)).collect::<Result<Vec<_>>>()?;
    weighted_mean_cov(cond.weights(), &values)
}

/// `∇ψⁿ(y) = -E[∇₂c(X,y)]` and `∇²ψⁿ(y) = -E[∇₂²c(X,y)] + Cov(∇₂c(X,y))/ε`
/// under `πⁿ(·|y)`, as ambient vectors and matrices.
pub fn psi_derivatives(state: &SinkhornState, y: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let problem = state.problem();
    let cost = oracle(problem)?;
    let col = problem.cost_column_at(y)?;
    let (logs, _) = conditional_logs(problem, state.phi(), &col);
    let q: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
    let rho = problem.rho();
    let grads = rho.points().map(|x| cost.grad2_unchecked(x, y)).collect::<Result<Vec<_>>>()?;
    let (mean, cov) = weighted_mean_cov(&q, &grads)?;
    let n = y.len();
    let mut mean_h = DMatrix::zeros(n, n);
    for (x, w) in rho.points().zip(&q) {
        mean_h += cost.hess2_unchecked(x, y)? * *w;
    }
    Ok((-mean, cov / problem.epsilon() - mean_h))
}

/// Point reached from `y` along the unit tangent direction `dir` for time `t`.
fn move_along(geometry: Geometry, y: &[f64], dir: &DVector<f64>, t: f64) -> Result<Vec<f64>> {
    Ok(geometry.exp_map(y, dir.as_slice(), t)?.iter().copied().collect())
}

fn check_stencil(state: &SinkhornState, y: &[f64], reach: f64) -> Result<()> {
    let nu = state.problem().nu();
    if nu.geometry().is_sphere() {
        return Ok(());
    }
    for (k, (lo, hi)) in nu.bounding_box().into_iter().enumerate() {
        if y[k] - reach < lo || y[k] + reach > hi {
            return Err(Error::StencilOutsideBox);
        }
    }
    Ok(())
}

/// Largest deviation, over an orthonormal tangent frame, between central
/// differences of the extended `ψⁿ` and `-E[∇₂c]`.
pub fn gradient_identity_residual(state: &SinkhornState, y: &[f64], fd_step: f64) -> Result<f64> {
    check_stencil(state, y, fd_step)?;
    let geometry = state.problem().nu().geometry();
    let (grad, _) = psi_derivatives(state, y)?;
    let frame = geometry.tangent_basis(y);
    let mut worst: f64 = 0.0;
    for k in 0..frame.ncols() {
        let e = frame.column(k).into_owned();
        let up = state.psi_at(&move_along(geometry, y, &e, fd_step)?)?;
        let down = state.psi_at(&move_along(geometry, y, &e, -fd_step)?)?;
        let fd = (up - down) / (2.0 * fd_step);
        worst = worst.max((fd - grad.dot(&e)).abs());
    }
    Ok(worst)
}

/// Finite-difference Hessian of `ψⁿ`, the covariance formula, both in
/// tangent-frame coordinates, and the operator norm of their difference.
#[derive(Clone, Debug)]
pub struct HessianResidual {
    pub finite_difference: DMatrix<f64>,
    pub formula: DMatrix<f64>,
    pub norm: f64,
}

impl HessianResidual {
    pub fn residual(&self) -> DMatrix<f64> {
        &self.finite_difference - &self.formula
    }
}

pub fn hessian_identity_residual(state: &SinkhornState, y: &[f64], fd_step: f64) -> Result<HessianResidual> {
    if !(fd_step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    check_stencil(state, y, fd_step)?;
    let geometry = state.problem().nu().geometry();
    let (_, hess) = psi_derivatives(state, y)?;
    let frame = geometry.tangent_basis(y);
    let formula = frame.transpose() * hess * &frame;
    let center = state.psi_at(y)?;
    // Second derivative along the geodesic with velocity v.
    let second = |v: &DVector<f64>| -> Result<f64> {
        let up = state.psi_at(&move_along(geometry, y, v, fd_step)?)?;
        let down = state.psi_at(&move_along(geometry, y, v, -fd_step)?)?;
        Ok((up - 2.0 * center + down) / (fd_step * fd_step))
    };
    let k = frame.ncols();
    let mut fd = DMatrix::zeros(k, k);
    for a in 0..k {
        let ea = frame.column(a).into_owned();
        fd[(a, a)] = second(&ea)?;
        for b in 0..a {
            let eb = frame.column(b).into_owned();
            let h = (second(&(&ea + &eb))? - second(&(&ea - &eb))?) / 4.0;
            fd[(a, b)] = h;
            fd[(b, a)] = h;
        }
    }
    let norm = symmetric_norm(&(&fd - &formula));
    Ok(HessianResidual { finite_difference: fd, formula, norm })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    /// Maximize the semiconcavity quotient over sampled triples `(x, y, z)`.
    DefinitionProbe,
    /// Maximize `λ_max[∇₂²c(x,y) + ∇²ψⁿ(y)]` over sampled `y` and all ρ atoms.
    HessianSup,
}

impl ProbeMode {
    pub fn name(self) -> &'static str {
        match self {
            ProbeMode::DefinitionProbe => "definition-probe",
            ProbeMode::HessianSup => "hessian-sup",
        }
    }
}

/// Sampling plan for [`estimate_lambda`].
#[derive(Clone, Debug)]
pub struct ProbeSpec {
    pub mode: ProbeMode,
    /// Random base points `y`.
    pub samples: usize,
    pub seed: u64,
    /// Euclidean sampling box; ν's bounding box when absent.
    pub bbox: Option<Vec<(f64, f64)>>,
    /// Also probe at every ν atom.
    pub include_support: bool,
    /// Compass-search iterations applied to the best hessian-sup candidates.
    pub refine: usize,
    /// Largest `d(y, z)` drawn by the definition probe (capped at π/2 on spheres).
    pub max_radius: f64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            mode: ProbeMode::HessianSup,
            samples: 200,
            seed: DEFAULT_PROBE_SEED,
            bbox: None,
            include_support: true,
            refine: 30,
            max_radius: 1.0,
        }
    }
}

impl ProbeSpec {
    pub fn with_mode(mode: ProbeMode) -> Self {
        ProbeSpec { mode, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstProbe {
    pub x_index: usize,
    pub y: Vec<f64>,
    /// Second point of the probe pair; absent in hessian-sup mode.
    pub z: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemiconcavityEstimate {
    pub lambda_hat: f64,
    pub probe_count: usize,
    pub worst: Option<WorstProbe>,
    pub mode: ProbeMode,
    pub seed: u64,
}

fn random_point(geometry: Geometry, bbox: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<f64> {
    match geometry {
        Geometry::Euclidean(_) => bbox.iter().map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect(),
        Geometry::Sphere(d) => loop {
            let v: Vec<f64> = (0..=d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|a| a / n).collect();
            }
        },
    }
}

/// Uniform unit tangent vector at `y`.
fn random_direction(geometry: Geometry, y: &[f64], rng: &mut ChaCha8Rng) -> DVector<f64> {
    let frame = geometry.tangent_basis(y);
    loop {
        let c = DVector::from_fn(frame.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = c.norm();
        if n > 1e-12 {
            return &frame * (c / n);
        }
    }
}

/// Hessian-sup objective at `y` and the maximizing ρ atom.
fn hessian_sup_at(state: &SinkhornState, cost: &CostModel, y: &[f64]) -> Result<(f64, usize)> {
    let problem = state.problem();
    let geometry = problem.nu().geometry();
    let col = problem.cost_column_at(y)?;
    let (logs, _) = conditional_logs(problem, state.phi(), &col);
    let q: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
    let rho = problem.rho();
    let grads = rho.points().map(|x| cost.grad2_unchecked(x, y)).collect::<Result<Vec<_>>>()?;
    let (_, cov) = weighted_mean_cov(&q, &grads)?;
    let frame = geometry.tangent_basis(y);
    let cov_t = frame.transpose() * cov * &frame / problem.epsilon();
    if cost.has_constant_hessian() {
        // ∇₂²c(x,y) - E[∇₂²c] vanishes.
        return Ok((lambda_max(&cov_t), 0));
    }
    let hs = rho
        .points()
        .map(|x| cost.hess2_unchecked(x, y).map(|h| frame.transpose() * h * &frame))
        .collect::<Result<Vec<_>>>()?;
    let mut mean_h = DMatrix::zeros(frame.ncols(), frame.ncols());
    for (h, w) in hs.iter().zip(&q) {
        mean_h += h * *w;
    }
    let base = cov_t - mean_h;
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, h) in hs.iter().enumerate() {
        let v = lambda_max(&(h + &base));
        if v > best.0 {
            best = (v, i);
        }
    }
    Ok(best)
}

/// Semiconcavity quotient of `c(x,·) + ψⁿ` for the pair `(y, z)`, maximized
/// over the ρ atoms. `None` when the pair is degenerate.
fn definition_quotient(state: &SinkhornState, cost: &CostModel, y: &[f64], z: &[f64]) -> Result<Option<(f64, usize)>> {
    let problem = state.problem();
    let geometry = problem.nu().geometry();
    let dist = geometry.distance(y, z);
    if dist < MIN_PROBE_DISTANCE {
        return Ok(None);
    }
    let col_y = problem.cost_column_at(y)?;
    let col_z = problem.cost_column_at(z)?;
    let (logs, psi_y) = conditional_logs(problem, state.phi(), &col_y);
    let (_, psi_z) = conditional_logs(problem, state.phi(), &col_z);
    let v = geometry.log_map(y, z);
    let grads = problem.rho().points().map(|x| cost.grad2_unchecked(x, y)).collect::<Result<Vec<_>>>()?;
    let slope_psi: f64 = -logs.iter().zip(&grads).map(|(l, g)| l.exp() * g.dot(&v)).sum::<f64>();
    let psi_part = psi_z - psi_y - slope_psi;
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, g) in grads.iter().enumerate() {
        let q = 2.0 * (col_z[i] - col_y[i] - g.dot(&v) + psi_part) / (dist * dist);
        if q > best.0 {
            best = (q, i);
        }
    }
    Ok(Some(best))
}

fn sampling_box(state: &SinkhornState, spec: &ProbeSpec) -> Result<Vec<(f64, f64)>> {
    let nu = state.problem().nu();
    let bbox = spec.bbox.clone().unwrap_or_else(|| nu.bounding_box());
    if !nu.geometry().is_sphere() && bbox.len() != nu.dim() {
        return Err(Error::ShapeMismatch("probe box dimension differs from ν".into()));
    }
    Ok(bbox)
}

/// Sampled lower estimate of the semiconcavity constant of `c(x,·) + ψⁿ`,
/// uniform in the ρ atoms.
pub fn estimate_lambda(state: &SinkhornState, spec: &ProbeSpec) -> Result<SemiconcavityEstimate> {
    let problem = state.problem();
    let cost = oracle(problem)?;
    let geometry = problem.nu().geometry();
    let bbox = sampling_box(state, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut bases: Vec<Vec<f64>> = Vec::new();
    if spec.include_support {
        bases.extend(problem.nu().points().map(<[f64]>::to_vec));
    }
    for _ in 0..spec.samples {
        bases.push(random_point(geometry, &bbox, &mut rng));
    }
    match spec.mode {
        ProbeMode::HessianSup => {
            let values = bases.par_iter().map(|y| hessian_sup_at(state, cost, y)).collect::<Result<Vec<_>>>()?;
            let mut probe_count = values.len();
            let mut order: Vec<usize> = (0..values.len()).collect();
            order.sort_by(|&a, &b| values[b].0.total_cmp(&values[a].0).then(a.cmp(&b)));
            let starts: Vec<usize> = order.into_iter().take(5).collect();
            let refined = starts
                .par_iter()
                .map(|&s| compass_search(state, cost, &bbox, bases[s].clone(), values[s], spec.refine))
                .collect::<Result<Vec<_>>>()?;
            let mut best: Option<(f64, usize, Vec<f64>)> = None;
            for (y, v) in bases.iter().zip(&values) {
                if best.as_ref().is_none_or(|b| v.0 > b.0) {
                    best = Some((v.0, v.1, y.clone()));
                }
            }
            for (y, (v, x), evals) in refined {
                probe_count += evals;
                if best.as_ref().is_none_or(|b| v > b.0) {
                    best = Some((v, x, y));
                }
            }
            let (lambda_hat, worst) = match best {
                Some((v, x, y)) => (v, Some(WorstProbe { x_index: x, y, z: None })),
                None => (f64::NEG_INFINITY, None),
            };
            Ok(SemiconcavityEstimate { lambda_hat, probe_count, worst, mode: spec.mode, seed: spec.seed })
        }
        ProbeMode::DefinitionProbe => {
            let cap = if geometry.is_sphere() { spec.max_radius.min(std::f64::consts::FRAC_PI_2) } else { spec.max_radius };
            let pairs: Vec<(Vec<f64>, Vec<f64>)> = bases
                .into_iter()
                .map(|y| {
                    let dir = random_direction(geometry, &y, &mut rng);
                    let r = cap * (1.0 - rng.random::<f64>());
                    let z = move_along(geometry, &y, &dir, r)?;
                    Ok((y, z))
                })
                .collect::<Result<Vec<_>>>()?;
            let values =
                pairs.par_iter().map(|(y, z)| definition_quotient(state, cost, y, z)).collect::<Result<Vec<_>>>()?;
            let mut best: Option<(f64, usize, usize)> = None;
            let mut probe_count = 0;
            for (k, v) in values.iter().enumerate() {
                if let Some((q, x)) = v {
                    probe_count += 1;
                    if best.is_none_or(|b| *q > b.0) {
                        best = Some((*q, *x, k));
                    }
                }
            }
            let (lambda_hat, worst) = match best {
                Some((q, x, k)) => {
                    (q, Some(WorstProbe { x_index: x, y: pairs[k].0.clone(), z: Some(pairs[k].1.clone()) }))
                }
                None => (f64::NEG_INFINITY, None),
            };
            Ok(SemiconcavityEstimate { lambda_hat, probe_count, worst, mode: spec.mode, seed: spec.seed })
        }
    }
}

/// Coordinate pattern search maximizing the hessian-sup objective, kept
/// inside the Euclidean box. Returns the point, its value and the number of
/// evaluations.
#[allow(clippy::type_complexity)]
fn compass_search(
    state: &SinkhornState,
    cost: &CostModel,
    bbox: &[(f64, f64)],
    mut y: Vec<f64>,
    mut value: (f64, usize),
    iterations: usize,
) -> Result<(Vec<f64>, (f64, usize), usize)> {
    let geometry = state.problem().nu().geometry();
    let mut step = if geometry.is_sphere() {
        0.2
    } else {
        0.25 * bbox.iter().map(|(lo, hi)| hi - lo).fold(f64::INFINITY, f64::min).max(1e-3)
    };
    let mut evals = 0;
    for _ in 0..iterations {
        let frame = geometry.tangent_basis(&y);
        let mut moved = false;
        'dirs: for k in 0..frame.ncols() {
            for sign in [1.0, -1.0] {
                let e = frame.column(k).into_owned();
                let mut cand = move_along(geometry, &y, &e, sign * step)?;
                if !geometry.is_sphere() {
                    for (c, (lo, hi)) in cand.iter_mut().zip(bbox) {
                        *c = c.clamp(*lo, *hi);
                    }
                }
                let v = hessian_sup_at(state, cost, &cand)?;
                evals += 1;
                if v.0 > value.0 {
                    y = cand;
                    value = v;
                    moved = true;
                    break 'dirs;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    Ok((y, value, evals))
}

/// Outcome of [`conditional_kl_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalKlCheck {
    /// `max KL(π(·|y)|π(·|z)) - (λ/2ε)d²(y,z)` over the sampled pairs.
    pub worst_violation: f64,
    pub worst_pair: Option<(Vec<f64>, Vec<f64>)>,
    pub pairs: usize,
}

/// Samples pairs `(y, z)` and compares the KL between conditionals with
/// `(λ/2ε)d²(y,z)`. Euclidean pairs are uniform in ν's bounding box; sphere
/// pairs use a uniform `y` and a geodesic step of length in `(0, π/2]`.
pub fn conditional_kl_check(state: &SinkhornState, lambda: f64, pairs: usize, seed: u64) -> Result<ConditionalKlCheck> {
    let problem = state.problem();
    let geometry = problem.nu().geometry();
    let bbox = problem.nu().bounding_box();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let y = random_point(geometry, &bbox, &mut rng);
        let z = if geometry.is_sphere() {
            let dir = random_direction(geometry, &y, &mut rng);
            move_along(geometry, &y, &dir, std::f64::consts::FRAC_PI_2 * (1.0 - rng.random::<f64>()))?
        } else {
            random_point(geometry, &bbox, &mut rng)
        };
        samples.push((y, z));
    }
    let values = samples
        .par_iter()
        .map(|(y, z)| conditional_kl_gap(state, lambda, y, z))
        .collect::<Result<Vec<_>>>()?;
    let mut worst = (f64::NEG_INFINITY, None);
    for (k, v) in values.into_iter().enumerate() {
        if v > worst.0 {
            worst = (v, Some(k));
        }
    }
    Ok(ConditionalKlCheck {
        worst_violation: if pairs == 0 { 0.0 } else { worst.0 },
        worst_pair: worst.1.map(|k| samples[k].clone()),
        pairs,
    })
}

/// `KL(π(·|y)|π(·|z)) - (λ/2ε)d²(y,z)` for one pair.
pub fn conditional_kl_gap(state: &SinkhornState, lambda: f64, y: &[f64], z: &[f64]) -> Result<f64> {
    let problem = state.problem();
    let (ly, _) = conditional_logs(problem, state.phi(), &problem.cost_column_at(y)?);
    let (lz, _) = conditional_logs(problem, state.phi(), &problem.cost_column_at(z)?);
    let d = problem.nu().geometry().distance(y, z);
    Ok(kl_log_weights(&ly, &lz)? - lambda / (2.0 * problem.epsilon()) * d * d)
}

/// Both sides of
/// `KL(π*|π^{n+1,n}) - KL(π*|π^{n,n-1}) = -(KL(ρ|ρ^{n,n}) + KL(ν|ν^{n,n-1}))`
/// for consecutive states at iterations `n ≥ 1` and `n + 1` of one run.
/// The left side comes from plan KLs, the right from wrong-marginal KLs.
pub fn entropy_difference_identity(
    prev: &SinkhornState,
    next: &SinkhornState,
    reference: &crate::sinkhorn::DiscretePlan,
) -> Result<(f64, f64)> {
    if !Arc::ptr_eq(prev.problem(), next.problem()) || !Arc::ptr_eq(prev.problem(), reference.problem()) {
        return Err(Error::MismatchedRuns);
    }
    if next.iteration() != prev.iteration() + 1 || prev.iteration() == 0 {
        return Err(Error::MismatchedRuns);
    }
    let (phi_n, psi_n) = next.previous().ok_or(Error::MismatchedRuns)?;
    // The gauge may shift the history by a constant; anything else means the
    // states come from different runs.
    let k = prev.phi()[0] - phi_n[0];
    let scale = 1.0 + prev.phi().iter().chain(prev.psi()).fold(0.0_f64, |a, v| a.max(v.abs()));
    let same = prev.phi().iter().zip(phi_n).all(|(a, b)| (a - b - k).abs() <= 1e-9 * scale)
        && prev.psi().iter().zip(psi_n).all(|(a, b)| (a - b + k).abs() <= 1e-9 * scale);
    if !same {
        return Err(Error::MismatchedRuns);
    }
    let later = reference.kl(&next.plan(PlanKind::HalfPrevious)?)?;
    let earlier = reference.kl(&prev.plan(PlanKind::HalfPrevious)?)?;
    let (_, rho_nn) = prev.wrong_marginals()?;
    let nu_prev = prev.previous_wrong_nu().ok_or(Error::MismatchedRuns)?;
    let rhs = -(prev.problem().rho().kl(&rho_nn)? + prev.problem().nu().kl(&nu_prev)?);
    Ok((later - earlier, rhs))
}

/// Both sides of the KL stability inequality for one perturbation `μ` of `ν`.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityGap {
    /// `KL(π^μ|π^ν)` between the two reference plans.
    pub kl_plans: f64,
    pub kl_marginals: f64,
    /// `W₂²(μ,ν)`, or `W_ω(μ,ν)` when a gauge was given.
    pub transport: f64,
    /// `KL(μ|ν) + (λ/2ε)·transport`.
    pub bound: f64,
    /// `bound - kl_plans`.
    pub slack: f64,
    pub converged: bool,
}

fn point_key(p: &[f64]) -> Vec<u64> {
    p.iter().map(|v| v.to_bits()).collect()
}

/// Compares `KL(π^μ|π^ν)` with `KL(μ|ν) + (λ/2ε)W(μ,ν)` using two reference
/// solves. Atoms of `μ` must be atoms of `ν`; otherwise both sides are `+∞`.
pub fn stability_gap(
    rho: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    mu: &DiscreteMeasure,
    cost: &CostModel,
    epsilon: f64,
    lambda: f64,
    omega: Option<&exact_ot::Omega<'_>>,
) -> Result<StabilityGap> {
    if mu.geometry() != nu.geometry() {
        return Err(Error::GeometryMismatch("μ and ν live on different geometries".into()));
    }
    let index: HashMap<Vec<u64>, usize> = nu.points().enumerate().map(|(j, p)| (point_key(p), j)).collect();
    let map: Option<Vec<usize>> = mu.points().map(|p| index.get(&point_key(p)).copied()).collect();
    let Some(map) = map else {
        return Ok(StabilityGap {
            kl_plans: f64::INFINITY,
            kl_marginals: f64::INFINITY,
            transport: f64::NAN,
            bound: f64::INFINITY,
            slack: f64::INFINITY,
            converged: true,
        });
    };
    // μ as a measure on ν's atoms.
    let mut log_mu_on_nu = vec![f64::NEG_INFINITY; nu.len()];
    for (k, &j) in map.iter().enumerate() {
        log_mu_on_nu[j] = log_sum_exp(&[log_mu_on_nu[j], mu.log_weights()[k]]);
    }
    let kl_marginals = kl_log_weights(&log_mu_on_nu, nu.log_weights())?;
    let transport = match omega {
        None => exact_ot::w2_squared(mu, nu)?.0,
        Some(w) => exact_ot::w_omega(mu, nu, w)?.0,
    };

    let p_nu = EotProblem::new(rho.clone(), nu.clone(), cost.clone(), epsilon)?;
    let p_mu = EotProblem::new(rho.clone(), mu.clone(), cost.clone(), epsilon)?;
    let (s_nu, s_mu) = rayon::join(
        || solve_reference(&p_nu, REFERENCE_TOL, REFERENCE_MAX_ITER),
        || solve_reference(&p_mu, REFERENCE_TOL, REFERENCE_MAX_ITER),
    );
    let (plan_nu, plan_mu) = (s_nu.plan(), s_mu.plan());
    let m = rho.len();
    let n = nu.len();
    // π^μ placed on ρ×supp(ν).
    let mut log_p = vec![f64::NEG_INFINITY; m * n];
    for i in 0..m {
        for (k, &j) in map.iter().enumerate() {
            let cell = &mut log_p[i * n + j];
            *cell = log_sum_exp(&[*cell, plan_mu.log_weight(i, k)]);
        }
    }
    let kl_plans = kl_log_weights(&log_p, plan_nu.log_weights())?;
    let bound = kl_marginals + lambda / (2.0 * epsilon) * transport;
    Ok(StabilityGap {
        kl_plans,
        kl_marginals,
        transport,
        bound,
        slack: bound - kl_plans,
        converged: s_nu.converged && s_mu.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::CostModel;
    use approx::assert_abs_diff_eq;

    fn line(points: &[f64]) -> Vec<Vec<f64>> {
        points.iter().map(|p| vec![*p]).collect()
    }

    fn grid_2d(k: usize, half: f64) -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        for a in 0..k {
            for b in 0..k {
                let s = |t: usize| -half + 2.0 * half * t as f64 / (k - 1) as f64;
                pts.push(vec![s(a), s(b)]);
            }
        }
        pts
    }

    fn random_cloud(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
    }

    #[test]
    fn two_atom_conditional() {
        let g = Geometry::Euclidean(1);
        let rho = DiscreteMeasure::uniform(g, line(&[0.0, 1.0])).unwrap();
        let nu = DiscreteMeasure::uniform(g, line(&[0.0])).unwrap();
        let p = EotProblem::from_cost_matrix(rho, nu, &DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), 1.0).unwrap();
        let state = SinkhornState::with_initial_phi(p, vec![0.0, 0.0]).unwrap();
        // The gauge leaves φ constant here, so the conditional ignores it.
        let c = conditional_given_y(&state, 0).unwrap();
        let e = (-1.0f64).exp();
        assert_abs_diff_eq!(c.weights()[0], 1.0 / (1.0 + e), epsilon = 1e-15);
        assert_abs_diff_eq!(c.weights()[1], e / (1.0 + e), epsilon = 1e-15);
    }

    #[test]
    fn zero_cost_conditional_is_rho() {
        let g = Geometry::Euclidean(1);
        let rho = DiscreteMeasure::new(g, line(&[0.0, 1.0, 2.0]), vec![0.2, 0.3, 0.5]).unwrap();
        let nu = DiscreteMeasure::uniform(g, line(&[0.0, 1.0])).unwrap();
        let p = EotProblem::from_cost_matrix(rho.clone(), nu, &DMatrix::zeros(3, 2), 0.7).unwrap();
        let mut state = SinkhornState::new(p);
        state.run(3);
        for j in 0..2 {
            let c = conditional_given_y(&state, j).unwrap();
            assert!(c.total_variation(&rho).unwrap() < 1e-14);
        }
    }

    #[test]
    fn covariance_examples() {
        let v = DVector::from_vec(vec![1.0, -2.0]);
        let (_, c) = weighted_mean_cov(&[1.0], std::slice::from_ref(&v)).unwrap();
        assert_eq!(c, DMatrix::zeros(2, 2));
        let (m, c) = weighted_mean_cov(&[0.5, 0.5], &[v.clone(), -v.clone()]).unwrap();
        assert!(m.norm() < 1e-15);
        assert!((c - &v * v.transpose()).norm() < 1e-15);
        let w = [0.2, 0.5, 0.3];
        let g = [
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![-1.0, 2.0]),
            DVector::from_vec(vec![0.5, 3.0]),
        ];
        let mut bar = DVector::zeros(2);
        for k in 0..3 {
            bar += &g[k] * w[k];
        }
        let mut want = DMatrix::zeros(2, 2);
        for k in 0..3 {
            let d = &g[k] - &bar;
            want += &d * d.transpose() * w[k];
        }
        let (_, c) = weighted_mean_cov(&w, &g).unwrap();
        assert!((c - want).norm() < 1e-15);
    }

    #[test]
    fn dirac_rho_identities() {
        let g = Geometry::Euclidean(2);
        let rho = DiscreteMeasure::dirac(g, vec![0.3, -0.2]).unwrap();
        let nu = DiscreteMeasure::uniform(g, grid_2d(5, 1.0)).unwrap();
        let p = EotProblem::new(rho, nu, CostModel::HalfSquaredEuclidean, 1.0).unwrap();
        let mut state = SinkhornState::new(p);
        state.run(2);
        let r = hessian_identity_residual(&state, &[0.1, 0.2], HESSIAN_FD_STEP).unwrap();
        assert!((&r.formula + DMatrix::identity(2, 2)).norm() < 1e-12);
        assert!(r.norm < 1e-6, "{}", r.norm);
        for mode in [ProbeMode::HessianSup, ProbeMode::DefinitionProbe] {
            let est = estimate_lambda(&state, &ProbeSpec { samples: 50, refine: 5, ..ProbeSpec::with_mode(mode) }).unwrap();
            assert!(est.lambda_hat.abs() < 1e-8, "{mode:?} {}", est.lambda_hat);
        }
        let check = conditional_kl_check(&state, 0.0, 50, 3).unwrap();
        assert!(check.worst_violation.abs() < 1e-12);
    }

    #[test]
    fn hessian_residual_random_instance() {
        let g = Geometry::Euclidean(2);
        let rho = DiscreteMeasure::uniform(g, random_cloud(20, 7)).unwrap();
        let nu = DiscreteMeasure::uniform(g, grid_2d(7, 1.5)).unwrap();
        let p = EotProblem::new(rho, nu, CostModel::HalfSquaredEuclidean, 0.5).unwrap();
        let reference = solve_reference(&p, REFERENCE_TOL, REFERENCE_MAX_ITER);
        let state = reference.state;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let y = [rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2)];
            let r = hessian_identity_residual(&state, &y, HESSIAN_FD_STEP).unwrap();
            assert!(r.norm <= 1e-4, "{}", r.norm);
            assert!(gradient_identity_residual(&state, &y, GRADIENT_FD_STEP).unwrap() <= 1e-6);
        }
        assert!(matches!(
            hessian_identity_residual(&state, &[1.5, 0.0], HESSIAN_FD_STEP),
            Err(Error::StencilOutsideBox)
        ));
    }

    #[test]
    fn compact_support_lambda_bound() {
        // ρ in the unit ball, quadratic cost: Λ ≤ R²/ε.
        let g = Geometry::Euclidean(2);
        let pts: Vec<Vec<f64>> = random_cloud(40, 5).into_iter().filter(|p| p[0] * p[0] + p[1] * p[1] <= 1.0).collect();
        let rho = DiscreteMeasure::uniform(g, pts).unwrap();
        let nu = DiscreteMeasure::uniform(g, grid_2d(6, 2.0)).unwrap();
        let eps = 0.5;
        let p = EotProblem::new(rho, nu, CostModel::HalfSquaredEuclidean, eps).unwrap();
        let state = solve_reference(&p, 1e-11, 10_000).state;
        let hs = estimate_lambda(&state, &ProbeSpec::default()).unwrap();
        assert!(hs.lambda_hat > 0.0 && hs.lambda_hat <= 1.0 / eps + 1e-6);
        let dp = estimate_lambda(&state, &ProbeSpec::with_mode(ProbeMode::DefinitionProbe)).unwrap();
        assert!(dp.lambda_hat <= hs.lambda_hat * 1.0001 + 1e-9);
        let check = conditional_kl_check(&state, hs.lambda_hat + 1e-6, 100, 2).unwrap();
        assert!(check.worst_violation <= 1e-8);
        let same = conditional_kl_gap(&state, 1.0, &[0.1, 0.1], &[0.1, 0.1]).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn entropy_identity_small_cases() {
        let g = Geometry::Euclidean(1);
        let one = DiscreteMeasure::uniform(g, line(&[0.0])).unwrap();
        let p = EotProblem::new(one.clone(), one, CostModel::HalfSquaredEuclidean, 1.0).unwrap();
        let reference = solve_reference(&p, REFERENCE_TOL, 10).plan();
        let mut a = SinkhornState::new(p);
        a.step();
        let mut b = a.clone();
        b.step();
        let (l, r) = entropy_difference_identity(&a, &b, &reference).unwrap();
        assert_eq!((l.abs(), r.abs()), (0.0, 0.0));

        let rho = DiscreteMeasure::uniform(Geometry::Euclidean(2), random_cloud(15, 3)).unwrap();
        let nu = DiscreteMeasure::uniform(Geometry::Euclidean(2), random_cloud(12, 4)).unwrap();
        let p = EotProblem::new(rho, nu, CostModel::HalfSquaredEuclidean, 0.3).unwrap();
        let reference = solve_reference(&p, REFERENCE_TOL, REFERENCE_MAX_ITER).plan();
        let mut prev = SinkhornState::new(p.clone());
        prev.step();
        for _ in 0..8 {
            let mut next = prev.clone();
            next.step();
            let (l, r) = entropy_difference_identity(&prev, &next, &reference).unwrap();
            assert!((l - r).abs() <= 1e-8 * (1.0 + l.abs()), "{l} {r}");
            assert!(l <= 0.0);
            prev = next;
        }
        let mut other = SinkhornState::new(p);
        other.run(3);
        assert!(entropy_difference_identity(&other, &prev, &reference).is_err());
    }

    #[test]
    fn stability_trivial_cases() {
        let g = Geometry::Euclidean(1);
        let rho = DiscreteMeasure::uniform(g, line(&[-1.0, 0.0, 0.5])).unwrap();
        let nu = DiscreteMeasure::uniform(g, line(&[-0.5, 0.2, 1.0, 1.4])).unwrap();
        let cost = CostModel::HalfSquaredEuclidean;
        let gap = stability_gap(&rho, &nu, &nu, &cost, 1.0, 1.0, None).unwrap();
        assert!(gap.kl_plans.abs() < 1e-12 && gap.bound.abs() < 1e-12);

        let mu = nu.reweighted(&[0.3, -0.2, 0.1, 0.0]).unwrap();
        let dirac = DiscreteMeasure::dirac(g, vec![0.2]).unwrap();
        let gap = stability_gap(&dirac, &nu, &mu, &cost, 1.0, 0.0, None).unwrap();
        assert!((gap.kl_plans - gap.kl_marginals).abs() < 1e-12);

        let gap = stability_gap(&rho, &nu, &mu, &cost, 1.0, 2.0, None).unwrap();
        assert!(gap.slack >= -1e-8, "{gap:?}");

        let off = DiscreteMeasure::uniform(g, line(&[0.3])).unwrap();
        let gap = stability_gap(&rho, &nu, &off, &cost, 1.0, 1.0, None).unwrap();
        assert_eq!(gap.bound, f64::INFINITY);
    }
}
