//! Log-domain Sinkhorn iteration.
//!
//! With plan densities `exp(-(c + φ⊕ψ)/ε)` against `ρ⊗ν`, the iteration is
//!
//! ```text
//! φⁿ⁺¹ = -Ψ(ψⁿ),   Ψ(ψ)(x) = -ε log ∫ exp(-(c(x,y) + ψ(y))/ε) ν(dy)
//! ψⁿ⁺¹ = -Φ(φⁿ⁺¹), Φ(φ)(y) = -ε log ∫ exp(-(c(x,y) + φ(x))/ε) ρ(dx)
//! ```
//!
//! so `π^{n+1,n}` has first marginal `ρ` and `π^{n,n}` has second marginal
//! `ν`. Potentials are kept in the gauge `Σᵢ ρᵢ φᵢ = 0`.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::costs::CostModel;
use crate::measures::DiscreteMeasure;
use crate::numerics::{bregman_h, kl_term, log_sum_exp_with};
use crate::{Error, Result};

/// Default stopping tolerance of [`solve_reference`] (TV of the free marginal).
pub const REFERENCE_TOL: f64 = 1e-13;
/// Default iteration budget of [`solve_reference`].
pub const REFERENCE_MAX_ITER: usize = 100_000;

/// Marginals, cost and regularization, with the cost matrix cached.
#[derive(Debug)]
pub struct EotProblem {
    rho: DiscreteMeasure,
    nu: DiscreteMeasure,
    cost: Option<CostModel>,
    epsilon: f64,
    cost_matrix: Vec<f64>,
    cost_matrix_t: Vec<f64>,
}

fn transpose(m: usize, n: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!("ε must be positive and finite, got {epsilon}")));
    }
    Ok(())
}

impl EotProblem {
    pub fn new(rho: DiscreteMeasure, nu: DiscreteMeasure, cost: CostModel, epsilon: f64) -> Result<Arc<Self>> {
        check_epsilon(epsilon)?;
        if rho.geometry() != nu.geometry() {
            return Err(Error::GeometryMismatch("ρ and ν live on different geometries".into()));
        }
        cost.check_geometry(rho.geometry())?;
        let (m, n) = (rho.len(), nu.len());
        let mut c = vec![0.0; m * n];
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let x = rho.point(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = cost.eval_unchecked(x, nu.point(j));
            }
        });
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
        }
        let ct = transpose(m, n, &c);
        Ok(Arc::new(EotProblem { rho, nu, cost: Some(cost), epsilon, cost_matrix: c, cost_matrix_t: ct }))
    }

    /// Problem with an explicit `|ρ|×|ν|` cost matrix and no cost oracle.
    /// Off-support queries are unavailable for such problems.
    pub fn from_cost_matrix(rho: DiscreteMeasure, nu: DiscreteMeasure, cost: &DMatrix<f64>, epsilon: f64) -> Result<Arc<Self>> {
        check_epsilon(epsilon)?;
        let (m, n) = (rho.len(), nu.len());
        if cost.nrows() != m || cost.ncols() != n {
            return Err(Error::ShapeMismatch(format!("cost is {}×{}, marginals need {m}×{n}", cost.nrows(), cost.ncols())));
        }
        if cost.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
        }
        let c: Vec<f64> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| cost[(i, j)]).collect();
        let ct = transpose(m, n, &c);
        Ok(Arc::new(EotProblem { rho, nu, cost: None, epsilon, cost_matrix: c, cost_matrix_t: ct }))
    }

    /// Same marginals and cost at another regularization, sharing nothing mutable.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Arc<Self>> {
        check_epsilon(epsilon)?;
        Ok(Arc::new(EotProblem {
            rho: self.rho.clone(),
            nu: self.nu.clone(),
            cost: self.cost.clone(),
            epsilon,
            cost_matrix: self.cost_matrix.clone(),
            cost_matrix_t: self.cost_matrix_t.clone(),
        }))
    }

    /// The problem with `(ρ, c)` and `(ν, cᵀ)` exchanged. Every cost family
    /// here is symmetric, so the oracle is kept.
    pub fn transposed(&self) -> Arc<Self> {
        Arc::new(EotProblem {
            rho: self.nu.clone(),
            nu: self.rho.clone(),
            cost: self.cost.clone(),
            epsilon: self.epsilon,
            cost_matrix: self.cost_matrix_t.clone(),
            cost_matrix_t: self.cost_matrix.clone(),
        })
    }

    pub fn rho(&self) -> &DiscreteMeasure {
        &self.rho
    }

    pub fn nu(&self) -> &DiscreteMeasure {
        &self.nu
    }

    pub fn cost(&self) -> Option<&CostModel> {
        self.cost.as_ref()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `(|ρ|, |ν|)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.rho.len(), self.nu.len())
    }

    /// Cached `c(xᵢ, yⱼ)`.
    pub fn c(&self, i: usize, j: usize) -> f64 {
        self.cost_matrix[i * self.nu.len() + j]
    }

    pub fn cost_row(&self, i: usize) -> &[f64] {
        let n = self.nu.len();
        &self.cost_matrix[i * n..(i + 1) * n]
    }

    pub fn cost_col(&self, j: usize) -> &[f64] {
        let m = self.rho.len();
        &self.cost_matrix_t[j * m..(j + 1) * m]
    }

    fn oracle(&self) -> Result<&CostModel> {
        self.cost.as_ref().ok_or_else(|| Error::Unsupported("off-support query on a raw cost matrix".into()))
    }

    /// `c(xᵢ, y)` for every ρ atom at an arbitrary `y`.
    pub fn cost_column_at(&self, y: &[f64]) -> Result<Vec<f64>> {
        let cost = self.oracle()?;
        self.rho.geometry().check_point(y, 1e-10)?;
        Ok(self.rho.points().map(|x| cost.eval_unchecked(x, y)).collect())
    }

    /// `c(x, yⱼ)` for every ν atom at an arbitrary `x`.
    pub fn cost_row_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let cost = self.oracle()?;
        self.nu.geometry().check_point(x, 1e-10)?;
        Ok(self.nu.points().map(|y| cost.eval_unchecked(x, y)).collect())
    }

    /// `Ψ(ψ)` at the ρ atoms.
    pub fn softmin_over_nu(&self, psi: &[f64]) -> Vec<f64> {
        let eps = self.epsilon;
        let ln = self.nu.log_weights();
        (0..self.rho.len())
            .into_par_iter()
            .map(|i| {
                let row = self.cost_row(i);
                -eps * log_sum_exp_with(ln.len(), |j| ln[j] - (row[j] + psi[j]) / eps)
            })
            .collect()
    }

    /// `Ψ(ψ)(x)` at an arbitrary point.
    pub fn softmin_over_nu_at(&self, psi: &[f64], x: &[f64]) -> Result<f64> {
        let row = self.cost_row_at(x)?;
        let eps = self.epsilon;
        let ln = self.nu.log_weights();
        Ok(-eps * log_sum_exp_with(ln.len(), |j| ln[j] - (row[j] + psi[j]) / eps))
    }

    /// `Φ(φ)` at the ν atoms.
    pub fn softmin_over_rho(&self, phi: &[f64]) -> Vec<f64> {
        let eps = self.epsilon;
        let lr = self.rho.log_weights();
        (0..self.nu.len())
            .into_par_iter()
            .map(|j| {
                let col = self.cost_col(j);
                -eps * log_sum_exp_with(lr.len(), |i| lr[i] - (col[i] + phi[i]) / eps)
            })
            .collect()
    }

    /// `Φ(φ)(y)` at an arbitrary point.
    pub fn softmin_over_rho_at(&self, phi: &[f64], y: &[f64]) -> Result<f64> {
        let col = self.cost_column_at(y)?;
        let eps = self.epsilon;
        let lr = self.rho.log_weights();
        Ok(-eps * log_sum_exp_with(lr.len(), |i| lr[i] - (col[i] + phi[i]) / eps))
    }

    /// Plan with density `exp(-(c + φ⊕ψ)/ε)` against `ρ⊗ν`.
    pub fn plan_from_potentials(self: &Arc<Self>, phi: Vec<f64>, psi: Vec<f64>) -> Result<DiscretePlan> {
        let (m, n) = self.shape();
        if phi.len() != m || psi.len() != n {
            return Err(Error::ShapeMismatch("potentials do not match the marginals".into()));
        }
        Ok(DiscretePlan::build(self.clone(), phi, psi))
    }
}

fn gauge_constant(rho: &DiscreteMeasure, phi: &[f64]) -> f64 {
    rho.weights().iter().zip(phi).map(|(w, p)| w * p).sum()
}

/// Which Sinkhorn plan to build from a state at iteration `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanKind {
    /// `π^{n,n}`: second marginal `ν`.
    Full,
    /// `π^{n+1,n}`: first marginal `ρ`, built from a virtual half-step.
    HalfNext,
    /// `π^{n,n-1}`: needs the previous `ψ`.
    HalfPrevious,
}

/// Potentials `(φⁿ, ψⁿ)` of one run, with the previous pair cached.
#[derive(Clone, Debug)]
pub struct SinkhornState {
    problem: Arc<EotProblem>,
    phi: Vec<f64>,
    psi: Vec<f64>,
    iteration: usize,
    previous: Option<(Vec<f64>, Vec<f64>)>,
}

impl SinkhornState {
    /// Starts from `φ⁰ = 0` and `ψ⁰ = -Φ(φ⁰)`.
    pub fn new(problem: Arc<EotProblem>) -> Self {
        let m = problem.rho().len();
        Self::start(problem, vec![0.0; m])
    }

    /// Starts from a given `φ⁰` (any additive constant is removed by the gauge).
    pub fn with_initial_phi(problem: Arc<EotProblem>, phi0: Vec<f64>) -> Result<Self> {
        if phi0.len() != problem.rho().len() || phi0.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("φ⁰ must be finite with one entry per ρ atom".into()));
        }
        Ok(Self::start(problem, phi0))
    }

    fn start(problem: Arc<EotProblem>, mut phi: Vec<f64>) -> Self {
        let k = gauge_constant(problem.rho(), &phi);
        phi.iter_mut().for_each(|v| *v -= k);
        let psi = problem.softmin_over_rho(&phi).into_iter().map(|v| -v).collect();
        SinkhornState { problem, phi, psi, iteration: 0, previous: None }
    }

    pub fn problem(&self) -> &Arc<EotProblem> {
        &self.problem
    }

    pub fn epsilon(&self) -> f64 {
        self.problem.epsilon
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    /// `(φⁿ⁻¹, ψⁿ⁻¹)` in the current gauge, if `n ≥ 1`.
    pub fn previous(&self) -> Option<(&[f64], &[f64])> {
        self.previous.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()))
    }

    /// `φⁿ⁺¹ = -Ψ(ψⁿ)` before gauge fixing.
    pub fn next_phi(&self) -> Vec<f64> {
        self.problem.softmin_over_nu(&self.psi).into_iter().map(|v| -v).collect()
    }

    /// One full iteration.
    pub fn step(&mut self) {
        let raw = self.next_phi();
        self.step_from(raw);
    }

    /// Completes an iteration whose half-step `φⁿ⁺¹` was already computed.
    /// The gauge constant is applied to the whole history, which leaves every
    /// plan unchanged.
    fn step_from(&mut self, mut phi_next: Vec<f64>) {
        let k = gauge_constant(self.problem.rho(), &phi_next);
        phi_next.iter_mut().for_each(|v| *v -= k);
        let mut old_phi = std::mem::replace(&mut self.phi, phi_next);
        old_phi.iter_mut().for_each(|v| *v -= k);
        let psi_next: Vec<f64> = self.problem.softmin_over_rho(&self.phi).into_iter().map(|v| -v).collect();
        let mut old_psi = std::mem::replace(&mut self.psi, psi_next);
        old_psi.iter_mut().for_each(|v| *v += k);
        self.previous = Some((old_phi, old_psi));
        self.iteration += 1;
    }

    pub fn run(&mut self, iterations: usize) {
        for _ in 0..iterations {
            self.step();
        }
    }

    /// Extended `ψⁿ(y) = -Φ(φⁿ)(y)` at any point of the geometry.
    pub fn psi_at(&self, y: &[f64]) -> Result<f64> {
        Ok(-self.problem.softmin_over_rho_at(&self.phi, y)?)
    }

    pub fn plan(&self, kind: PlanKind) -> Result<DiscretePlan> {
        match kind {
            PlanKind::Full => Ok(DiscretePlan::build(self.problem.clone(), self.phi.clone(), self.psi.clone())),
            PlanKind::HalfNext => Ok(DiscretePlan::build(self.problem.clone(), self.next_phi(), self.psi.clone())),
            PlanKind::HalfPrevious => {
                let (_, psi_prev) = self.previous.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("π^{n,n-1} needs at least one completed iteration".into())
                })?;
                Ok(DiscretePlan::build(self.problem.clone(), self.phi.clone(), psi_prev.clone()))
            }
        }
    }

    /// Log-ratios `(ψⁿ - ψⁿ⁺¹)/ε` and `(φⁿ - φⁿ⁺¹)/ε` from a virtual next
    /// iteration, so that `dν^{n+1,n} = e^{-a}dν` and `dρ^{n,n} = e^{-b}dρ`.
    fn wrong_log_ratios(&self) -> (Vec<f64>, Vec<f64>) {
        let eps = self.epsilon();
        let phi_next = self.next_phi();
        let psi_next: Vec<f64> = self.problem.softmin_over_rho(&phi_next).into_iter().map(|v| -v).collect();
        let a = self.psi.iter().zip(&psi_next).map(|(p, q)| (p - q) / eps).collect();
        let b = self.phi.iter().zip(&phi_next).map(|(p, q)| (p - q) / eps).collect();
        (a, b)
    }

    /// `(ν^{n+1,n}, ρ^{n,n})`, the marginals left free by the last two half-steps.
    pub fn wrong_marginals(&self) -> Result<(DiscreteMeasure, DiscreteMeasure)> {
        let (a, b) = self.wrong_log_ratios();
        let (rho, nu) = (self.problem.rho(), self.problem.nu());
        let lnu = nu.log_weights().iter().zip(&a).map(|(l, r)| l - r).collect();
        let lrho = rho.log_weights().iter().zip(&b).map(|(l, r)| l - r).collect();
        Ok((
            DiscreteMeasure::aligned(nu.geometry(), nu.flat_points().to_vec(), lnu)?,
            DiscreteMeasure::aligned(rho.geometry(), rho.flat_points().to_vec(), lrho)?,
        ))
    }

    /// `ν^{n,n-1} = e^{-(ψⁿ⁻¹ - ψⁿ)/ε} ν`, if `n ≥ 1`.
    pub fn previous_wrong_nu(&self) -> Option<DiscreteMeasure> {
        let (_, psi_prev) = self.previous.as_ref()?;
        let nu = self.problem.nu();
        let eps = self.epsilon();
        let l = nu.log_weights().iter().zip(psi_prev.iter().zip(&self.psi)).map(|(l, (p, q))| l - (p - q) / eps).collect();
        DiscreteMeasure::aligned(nu.geometry(), nu.flat_points().to_vec(), l).ok()
    }

    /// `(KL(ρ|ρ^{n,n}), KL(ν|ν^{n+1,n}))` computed from potential increments,
    /// accurate down to tiny values.
    pub fn wrong_marginal_kls(&self) -> (f64, f64) {
        let (a, b) = self.wrong_log_ratios();
        (
            bregman_kl(self.problem.rho().log_weights(), &b),
            bregman_kl(self.problem.nu().log_weights(), &a),
        )
    }

    /// `KL(ν|ν^{n,n-1})`, if `n ≥ 1`.
    pub fn previous_nu_kl(&self) -> Option<f64> {
        let (_, psi_prev) = self.previous.as_ref()?;
        let eps = self.epsilon();
        let l: Vec<f64> = psi_prev.iter().zip(&self.psi).map(|(p, q)| (p - q) / eps).collect();
        Some(bregman_kl(self.problem.nu().log_weights(), &l))
    }

    /// TV distance between `ρ^{n,n}` and `ρ`.
    pub fn free_marginal_error(&self) -> f64 {
        self.free_marginal_error_with(&self.next_phi())
    }

    fn free_marginal_error_with(&self, phi_next: &[f64]) -> f64 {
        let eps = self.epsilon();
        let w = self.problem.rho().weights();
        0.5 * w.iter().zip(phi_next.iter().zip(&self.phi)).map(|(w, (a, b))| w * ((a - b) / eps).exp_m1().abs()).sum::<f64>()
    }
}

/// `KL(p|q)` for `p` with log weights `log_p` and `q = p·e^{-l}`, in the
/// Bregman form `Σ q h(l)`.
fn bregman_kl(log_p: &[f64], l: &[f64]) -> f64 {
    log_p.iter().zip(l).map(|(lp, li)| kl_term(lp - li, *li)).sum::<f64>().max(0.0)
}

/// A coupling of `ρ` and `ν` with density `exp(-(c + φ⊕ψ)/ε)`.
#[derive(Clone, Debug)]
pub struct DiscretePlan {
    problem: Arc<EotProblem>,
    phi: Vec<f64>,
    psi: Vec<f64>,
    log_weights: Vec<f64>,
}

impl DiscretePlan {
    fn build(problem: Arc<EotProblem>, phi: Vec<f64>, psi: Vec<f64>) -> Self {
        let (m, n) = problem.shape();
        let eps = problem.epsilon;
        let lr = problem.rho.log_weights();
        let ln = problem.nu.log_weights();
        let mut lw = vec![0.0; m * n];
        lw.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let c = problem.cost_row(i);
            for j in 0..n {
                row[j] = lr[i] + ln[j] - (c[j] + phi[i] + psi[j]) / eps;
            }
        });
        DiscretePlan { problem, phi, psi, log_weights: lw }
    }

    pub fn problem(&self) -> &Arc<EotProblem> {
        &self.problem
    }

    pub fn shape(&self) -> (usize, usize) {
        self.problem.shape()
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn row_measure(&self) -> &DiscreteMeasure {
        self.problem.rho()
    }

    pub fn col_measure(&self) -> &DiscreteMeasure {
        self.problem.nu()
    }

    /// Row-major log weights.
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn log_weight(&self, i: usize, j: usize) -> f64 {
        self.log_weights[i * self.problem.nu.len() + j]
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.row_marginal().iter().sum()
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        let n = self.problem.nu.len();
        self.log_weights.par_chunks(n).map(|r| r.iter().map(|l| l.exp()).sum()).collect()
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        let (m, n) = self.shape();
        (0..n).into_par_iter().map(|j| (0..m).map(|i| self.log_weights[i * n + j].exp()).sum()).collect()
    }

    /// `KL(self|other)`. Plans of the same problem are compared through
    /// potential differences, which keeps tiny divergences accurate.
    pub fn kl(&self, other: &DiscretePlan) -> Result<f64> {
        let (m, n) = self.shape();
        if other.shape() != (m, n) {
            return Err(Error::ShapeMismatch("plans of different shapes".into()));
        }
        let rows: Vec<f64> = if Arc::ptr_eq(&self.problem, &other.problem) {
            let eps = self.problem.epsilon;
            (0..m)
                .into_par_iter()
                .map(|i| {
                    let dphi = other.phi[i] - self.phi[i];
                    let q = &other.log_weights[i * n..(i + 1) * n];
                    (0..n).map(|j| kl_term(q[j], (dphi + other.psi[j] - self.psi[j]) / eps)).sum()
                })
                .collect()
        } else {
            (0..m)
                .into_par_iter()
                .map(|i| {
                    let p = &self.log_weights[i * n..(i + 1) * n];
                    let q = &other.log_weights[i * n..(i + 1) * n];
                    (0..n).map(|j| kl_term(q[j], p[j] - q[j])).sum()
                })
                .collect()
        };
        Ok(rows.iter().sum::<f64>().max(0.0))
    }

    /// Log weights of the transposed plan, row-major `|ν|×|ρ|`.
    pub fn transposed_log_weights(&self) -> Vec<f64> {
        let (m, n) = self.shape();
        transpose(m, n, &self.log_weights)
    }

    /// Writes `i,j,weight` triplets with a header line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "weight"])?;
        let n = self.problem.nu.len();
        for (k, l) in self.log_weights.iter().enumerate() {
            w.write_record(&[(k / n).to_string(), (k % n).to_string(), l.exp().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Outcome of [`solve_reference`].
#[derive(Clone, Debug)]
pub struct ReferenceSolution {
    pub state: SinkhornState,
    pub converged: bool,
    pub iterations: usize,
    pub free_marginal_error: f64,
}

impl ReferenceSolution {
    /// The reference plan `π^{n,n}` of the final state.
    pub fn plan(&self) -> DiscretePlan {
        DiscretePlan::build(self.state.problem.clone(), self.state.phi.clone(), self.state.psi.clone())
    }
}

/// Iterates from `φ⁰ = 0` until the free marginal of `π^{n,n}` is within
/// `tol` in total variation, or `max_iter` iterations. Non-convergence is
/// flagged, not an error.
pub fn solve_reference(problem: &Arc<EotProblem>, tol: f64, max_iter: usize) -> ReferenceSolution {
    let mut state = SinkhornState::new(problem.clone());
    state.step();
    loop {
        let phi_next = state.next_phi();
        let err = state.free_marginal_error_with(&phi_next);
        if err <= tol || state.iteration >= max_iter.max(1) {
            return ReferenceSolution { converged: err <= tol, iterations: state.iteration, free_marginal_error: err, state };
        }
        state.step_from(phi_next);
    }
}

/// One row of a Sinkhorn trace against a reference plan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub n: usize,
    /// `KL(π*|π^{n,n})`.
    pub kl_plan_nn: f64,
    /// `KL(π*|π^{n+1,n})`.
    pub kl_plan_n1n: f64,
    /// `KL(ρ|ρ^{n,n})`.
    pub kl_rho_wrong: f64,
    /// `KL(ν|ν^{n+1,n})`.
    pub kl_nu_wrong: f64,
    /// TV between `ρ^{n,n}` and `ρ`.
    pub marginal_tv_error: f64,
}

impl TraceRow {
    pub const HEADER: [&'static str; 6] = ["n", "kl_plan_nn", "kl_plan_n1n", "kl_rho_wrong", "kl_nu_wrong", "marginal_tv_error"];

    pub fn record(&self) -> [String; 6] {
        [
            self.n.to_string(),
            format!("{:e}", self.kl_plan_nn),
            format!("{:e}", self.kl_plan_n1n),
            format!("{:e}", self.kl_rho_wrong),
            format!("{:e}", self.kl_nu_wrong),
            format!("{:e}", self.marginal_tv_error),
        ]
    }
}

/// Runs from `state` for up to `iterations` steps, recording a row before
/// each step. Stops early once `KL(π*|π^{n,n})` drops below `stop_below`.
pub fn trace(state: &mut SinkhornState, reference: &DiscretePlan, iterations: usize, stop_below: f64) -> Result<Vec<TraceRow>> {
    if !Arc::ptr_eq(state.problem(), reference.problem()) {
        return Err(Error::MismatchedRuns);
    }
    let mut rows = Vec::with_capacity(iterations + 1);
    for _ in 0..=iterations {
        let nn = reference.kl(&state.plan(PlanKind::Full)?)?;
        let phi_next = state.next_phi();
        let half = DiscretePlan::build(state.problem.clone(), phi_next.clone(), state.psi.clone());
        let n1n = reference.kl(&half)?;
        let (kr, kn) = state.wrong_marginal_kls();
        rows.push(TraceRow {
            n: state.iteration,
            kl_plan_nn: nn,
            kl_plan_n1n: n1n,
            kl_rho_wrong: kr,
            kl_nu_wrong: kn,
            marginal_tv_error: state.free_marginal_error_with(&phi_next),
        });
        if nn < stop_below || rows.len() > iterations {
            break;
        }
        state.step_from(phi_next);
    }
    Ok(rows)
}

/// `KL(π*|π^{n,n})` for `n = 0..=n_report`, resolved far below double
/// precision of the plans themselves.
///
/// Plain evaluation floors near `1e-17` because the log-ratio between two
/// nearby plans is lost in the rounding of the potentials. Here the run
/// tracks the increments `dφⁿ⁺¹ = φⁿ⁺¹ - φⁿ` directly,
///
/// ```text
/// dφⁿ⁺¹ᵢ = ε log1p(Σⱼ Wᵢⱼ expm1(-dψⁿⱼ/ε)),  W = softmaxⱼ(log νⱼ - (cᵢⱼ + ψⁿ⁻¹ⱼ)/ε)
/// ```
///
/// and likewise for `ψ`, until they underflow. The limit potentials are then
/// `φ* - φⁿ = Σ_{k>n} dφᵏ`, summed from the tail, and the divergence is taken
/// in Bregman form against `π^{n,n}`.
pub fn precise_kl_trace(problem: &Arc<EotProblem>, phi0: Option<Vec<f64>>, n_report: usize, max_iter: usize) -> Result<PreciseTrace> {
    let (m, n) = problem.shape();
    let eps = problem.epsilon;
    let lr = problem.rho.log_weights();
    let ln = problem.nu.log_weights();
    let phi0 = phi0.unwrap_or_else(|| vec![0.0; m]);
    if phi0.len() != m {
        return Err(Error::ShapeMismatch("φ⁰ must have one entry per ρ atom".into()));
    }
    let neg = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| -x).collect() };
    let mut phi = phi0;
    let mut psi = neg(problem.softmin_over_rho(&phi));
    let mut phis = vec![phi.clone()];
    let mut psis = vec![psi.clone()];

    // Each new φ is shifted to zero ρ-mean increment before ψ is updated. This
    // is a gauge change of the pair, so plans are untouched, and it keeps a
    // constant drift (dφ = -c, dψ = +c) from swamping the increments.
    let rw = problem.rho.weights();
    let center = |d: &mut Vec<f64>| {
        let c: f64 = d.iter().zip(rw).map(|(a, w)| a * w).sum();
        d.iter_mut().for_each(|a| *a -= c);
    };

    // The first iteration is taken directly; later ones need ψⁿ⁻¹.
    let mut dphi1: Vec<f64> = neg(problem.softmin_over_nu(&psi)).iter().zip(&phi).map(|(a, b)| a - b).collect();
    center(&mut dphi1);
    let phi1: Vec<f64> = phi.iter().zip(&dphi1).map(|(a, b)| a + b).collect();
    let psi1 = neg(problem.softmin_over_rho(&phi1));
    let mut dphis = vec![dphi1];
    let mut dpsis = vec![psi1.iter().zip(&psi).map(|(a, b)| a - b).collect::<Vec<f64>>()];
    let mut psi_prev = std::mem::replace(&mut psi, psi1);
    phi = phi1;
    if n_report >= 1 {
        phis.push(phi.clone());
        psis.push(psi.clone());
    }
    let mut converged = false;
    let mut report_scale = 0.0;
    while dphis.len() < max_iter {
        let dpsi = dpsis.last().expect("nonempty");
        let scale = dpsi.iter().chain(dphis.last().expect("nonempty")).fold(0.0f64, |a, v| a.max(v.abs()));
        if dphis.len() == n_report + 1 {
            report_scale = scale;
        }
        // Once increments are negligible against the last reported one, the
        // remaining tail cannot move any reported divergence.
        if scale < 1e-280 || scale < 1e-20 * report_scale {
            converged = true;
            break;
        }
        let mut dphi: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|i| {
                let row = problem.cost_row(i);
                let f = |j: usize| ln[j] - (row[j] + psi_prev[j]) / eps;
                let lse = log_sum_exp_with(n, f);
                let s: f64 = (0..n).map(|j| (f(j) - lse).exp() * (-dpsi[j] / eps).exp_m1()).sum();
                eps * s.ln_1p()
            })
            .collect();
        center(&mut dphi);
        let dpsi_next: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|j| {
                let col = problem.cost_col(j);
                let f = |i: usize| lr[i] - (col[i] + phi[i]) / eps;
                let lse = log_sum_exp_with(m, f);
                let s: f64 = (0..m).map(|i| (f(i) - lse).exp() * (-dphi[i] / eps).exp_m1()).sum();
                eps * s.ln_1p()
            })
            .collect();
        psi_prev.copy_from_slice(&psi);
        phi.iter_mut().zip(&dphi).for_each(|(a, d)| *a += d);
        psi.iter_mut().zip(&dpsi_next).for_each(|(a, d)| *a += d);
        dphis.push(dphi);
        dpsis.push(dpsi_next);
        if phis.len() <= n_report {
            phis.push(phi.clone());
            psis.push(psi.clone());
        }
    }
    // Tails Σ_{k>n} d·ᵏ for n = 0..=n_report, accumulated from the end.
    let total = dphis.len();
    let mut tail_phi = vec![0.0; m];
    let mut tail_psi = vec![0.0; n];
    let mut tails = vec![(vec![0.0; m], vec![0.0; n]); n_report.min(total) + 1];
    for k in (0..total).rev() {
        // dphis[k] is φᵏ⁺¹ - φᵏ.
        tail_phi.iter_mut().zip(&dphis[k]).for_each(|(a, d)| *a += d);
        tail_psi.iter_mut().zip(&dpsis[k]).for_each(|(a, d)| *a += d);
        if k < tails.len() {
            tails[k] = (tail_phi.clone(), tail_psi.clone());
        }
    }
    let kl: Vec<f64> = tails
        .iter()
        .enumerate()
        .filter(|(k, _)| *k < phis.len())
        .map(|(k, (tp, ts))| {
            let (ph, ps) = (&phis[k], &psis[k]);
            (0..m)
                .into_par_iter()
                .map(|i| {
                    let row = problem.cost_row(i);
                    (0..n)
                        .map(|j| {
                            let log_q = lr[i] + ln[j] - (row[j] + ph[i] + ps[j]) / eps;
                            let l = -(tp[i] + ts[j]) / eps;
                            log_q.exp() * bregman_h(l)
                        })
                        .sum::<f64>()
                })
                .collect::<Vec<f64>>()
                .iter()
                .sum::<f64>()
        })
        .collect();
    Ok(PreciseTrace { kl_plan_nn: kl, iterations: total, converged })
}

/// Output of [`precise_kl_trace`].
#[derive(Clone, Debug)]
pub struct PreciseTrace {
    /// `KL(π*|π^{n,n})` indexed by `n`.
    pub kl_plan_nn: Vec<f64>,
    /// Iterations run before the increments underflowed.
    pub iterations: usize,
    pub converged: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::Geometry;
    use approx::assert_relative_eq;

    fn line(points: &[f64]) -> Vec<Vec<f64>> {
        points.iter().map(|&v| vec![v]).collect()
    }

    fn uniform(points: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::uniform(Geometry::Euclidean(1), line(points)).unwrap()
    }

    fn matrix_problem(rho: DiscreteMeasure, nu: DiscreteMeasure, rows: &[&[f64]], eps: f64) -> Arc<EotProblem> {
        let m = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
        EotProblem::from_cost_matrix(rho, nu, &m, eps).unwrap()
    }

    #[test]
    fn softmin_over_nu_examples() {
        let p = EotProblem::new(uniform(&[0.0, 1.0]), uniform(&[2.0]), CostModel::HalfSquaredEuclidean, 0.3).unwrap();
        let v = p.softmin_over_nu(&[0.7]);
        assert_relative_eq!(v[0], 2.0 + 0.7, epsilon = 1e-14);
        assert_relative_eq!(v[1], 0.5 + 0.7, epsilon = 1e-14);
        assert_relative_eq!(p.softmin_over_nu_at(&[0.7], &[-1.0]).unwrap(), 4.5 + 0.7, epsilon = 1e-14);

        let p = matrix_problem(uniform(&[0.0, 1.0]), uniform(&[0.0, 1.0]), &[&[1.0, 1.0], &[1.0, 1.0]], 0.05);
        for v in p.softmin_over_nu(&[0.0, 0.0]) {
            assert_relative_eq!(v, 1.0, epsilon = 1e-14);
        }

        let p = matrix_problem(uniform(&[0.0]), uniform(&[0.0, 1.0]), &[&[0.0, 1.0]], 1.0);
        let want = -((1.0 + (-1.0f64).exp()) / 2.0).ln();
        assert_relative_eq!(p.softmin_over_nu(&[0.0, 0.0])[0], want, epsilon = 1e-15);
        assert_relative_eq!(want, 0.379885, epsilon = 1e-6);
    }

    #[test]
    fn softmin_over_rho_examples() {
        let p = EotProblem::new(uniform(&[1.0]), uniform(&[0.0, 3.0]), CostModel::HalfSquaredEuclidean, 0.2).unwrap();
        let v = p.softmin_over_rho(&[-0.4]);
        assert_relative_eq!(v[0], 0.5 - 0.4, epsilon = 1e-14);
        assert_relative_eq!(v[1], 2.0 - 0.4, epsilon = 1e-14);

        let p = matrix_problem(uniform(&[0.0, 1.0]), uniform(&[0.0, 1.0]), &[&[0.0, 0.0], &[0.0, 0.0]], 0.5);
        for v in p.softmin_over_rho(&[2.5, 2.5]) {
            assert_relative_eq!(v, 2.5, epsilon = 1e-14);
        }

        let p = matrix_problem(uniform(&[0.0, 1.0]), uniform(&[0.0]), &[&[0.0], &[2.0]], 2.0);
        let want = -2.0 * ((1.0 + (-1.0f64).exp()) / 2.0).ln();
        assert_relative_eq!(p.softmin_over_rho(&[0.0, 0.0])[0], want, epsilon = 1e-15);
        assert_relative_eq!(want, 0.759770, epsilon = 1e-6);
    }

    #[test]
    fn one_by_one_problem_is_fixed_after_one_step() {
        let p = EotProblem::new(uniform(&[0.3]), uniform(&[-1.0]), CostModel::HalfSquaredEuclidean, 0.1).unwrap();
        let mut s = SinkhornState::new(p.clone());
        s.step();
        let plan = s.plan(PlanKind::Full).unwrap();
        assert_relative_eq!(plan.weights()[0], 1.0, epsilon = 1e-14);
        let (phi, psi) = (s.phi().to_vec(), s.psi().to_vec());
        s.step();
        assert_relative_eq!(s.phi()[0], phi[0], epsilon = 1e-14);
        assert_relative_eq!(s.psi()[0], psi[0], epsilon = 1e-14);
        let (nu_w, rho_w) = s.wrong_marginals().unwrap();
        assert_relative_eq!(nu_w.weights()[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(rho_w.weights()[0], 1.0, epsilon = 1e-14);
        let r = solve_reference(&p, 1e-13, 100);
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn product_case_converges_to_product() {
        let rho = DiscreteMeasure::new(Geometry::Euclidean(1), line(&[0.0, 1.0, 2.0]), vec![0.2, 0.3, 0.5]).unwrap();
        let nu = DiscreteMeasure::new(Geometry::Euclidean(1), line(&[0.0, 1.0]), vec![0.6, 0.4]).unwrap();
        let zero = [[0.0; 2]; 3];
        let rows: Vec<&[f64]> = zero.iter().map(|r| &r[..]).collect();
        let p = matrix_problem(rho.clone(), nu.clone(), &rows, 0.7);
        let r = solve_reference(&p, 1e-13, 100);
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        assert!(r.state.phi().iter().chain(r.state.psi()).all(|v| v.abs() < 1e-15));
        let w = r.plan().weights();
        for i in 0..3 {
            for j in 0..2 {
                assert_relative_eq!(w[i * 2 + j], rho.weights()[i] * nu.weights()[j], epsilon = 1e-14);
            }
        }
    }

    /// Diagonal mass `a` of the symmetric 2×2 optimum: `a/(1/2 - a) = e^{1/ε}`.
    fn bisection_oracle(eps: f64) -> f64 {
        let f = |a: f64| a.ln() - (0.5 - a).ln() - 1.0 / eps;
        let (mut lo, mut hi) = (1e-300, 0.5 - 1e-17);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn two_by_two_matches_bisection() {
        let p = matrix_problem(uniform(&[0.0, 1.0]), uniform(&[0.0, 1.0]), &[&[0.0, 1.0], &[1.0, 0.0]], 1.0);
        let r = solve_reference(&p, 1e-13, 100_000);
        assert!(r.converged);
        let a = bisection_oracle(1.0);
        let w = r.plan().weights();
        assert_relative_eq!(w[0], a, epsilon = 1e-10);
        assert_relative_eq!(w[3], a, epsilon = 1e-10);
        assert_relative_eq!(w[1], 0.5 - a, epsilon = 1e-10);
        assert_relative_eq!(w[2], 0.5 - a, epsilon = 1e-10);
        let plan = r.plan();
        for v in plan.row_marginal().into_iter().chain(plan.col_marginal()) {
            assert_relative_eq!(v, 0.5, epsilon = 1e-13);
        }
    }

    #[test]
    fn wrong_marginals_match_plan_sums() {
        let rho = DiscreteMeasure::new(Geometry::Euclidean(1), line(&[0.0, 1.0]), vec![0.3, 0.7]).unwrap();
        let nu = DiscreteMeasure::new(Geometry::Euclidean(1), line(&[0.0, 1.0]), vec![0.55, 0.45]).unwrap();
        let p = matrix_problem(rho.clone(), nu.clone(), &[&[0.0, 1.0], &[1.0, 0.0]], 1.0);
        let mut s = SinkhornState::new(p);
        s.step();
        let (nu_w, rho_w) = s.wrong_marginals().unwrap();
        let half = s.plan(PlanKind::HalfNext).unwrap();
        let full = s.plan(PlanKind::Full).unwrap();
        for (a, b) in nu_w.weights().iter().zip(half.col_marginal()) {
            assert_relative_eq!(*a, b, epsilon = 1e-14);
        }
        for (a, b) in rho_w.weights().iter().zip(full.row_marginal()) {
            assert_relative_eq!(*a, b, epsilon = 1e-14);
        }
        // The constrained marginals are exact.
        for (a, b) in half.row_marginal().iter().zip(rho.weights()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-15);
        }
        for (a, b) in full.col_marginal().iter().zip(nu.weights()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn fixed_point_has_correct_wrong_marginals() {
        let rho = DiscreteMeasure::new(Geometry::Euclidean(1), line(&[0.0, 1.0, 1.5]), vec![0.3, 0.5, 0.2]).unwrap();
        let nu = uniform(&[-0.5, 0.4]);
        let p = EotProblem::new(rho.clone(), nu.clone(), CostModel::HalfSquaredEuclidean, 0.5).unwrap();
        let r = solve_reference(&p, 1e-15, 10_000);
        let (nu_w, rho_w) = r.state.wrong_marginals().unwrap();
        assert!(nu_w.total_variation(&nu).unwrap() < 1e-13);
        assert!(rho_w.total_variation(&rho).unwrap() < 1e-13);
    }

    #[test]
    fn half_previous_needs_history() {
        let p = EotProblem::new(uniform(&[0.0, 1.0]), uniform(&[0.0]), CostModel::HalfSquaredEuclidean, 1.0).unwrap();
        let s = SinkhornState::new(p);
        assert!(s.plan(PlanKind::HalfPrevious).is_err());
        assert!(s.previous_wrong_nu().is_none());
    }

    #[test]
    fn precise_trace_agrees_with_plain_kl() {
        let g = Geometry::Euclidean(1);
        let xs: Vec<f64> = (0..15).map(|k| -1.5 + 0.2 * k as f64).collect();
        let ys: Vec<f64> = (0..12).map(|k| -2.0 + 0.35 * k as f64).collect();
        let rho = DiscreteMeasure::from_log_weights(g, line(&xs), xs.iter().map(|x| -x * x).collect()).unwrap();
        let nu = DiscreteMeasure::from_log_weights(g, line(&ys), ys.iter().map(|y| -0.5 * y * y).collect()).unwrap();
        let p = EotProblem::new(rho, nu, CostModel::HalfSquaredEuclidean, 0.5).unwrap();
        let reference = solve_reference(&p, 1e-15, 100_000).plan();
        let precise = precise_kl_trace(&p, None, 12, 100_000).unwrap();
        assert!(precise.converged);
        let mut s = SinkhornState::new(p.clone());
        for n in 0..=12 {
            let plain = reference.kl(&s.plan(PlanKind::Full).unwrap()).unwrap();
            if plain > 1e-9 {
                assert_relative_eq!(precise.kl_plan_nn[n], plain, max_relative = 1e-5);
            }
            s.step();
        }
        // Keeps decaying well below the plain floor.
        assert!(precise.kl_plan_nn[12] < precise.kl_plan_nn[6]);
        assert!(precise.kl_plan_nn[12] > 0.0);
    }
}
