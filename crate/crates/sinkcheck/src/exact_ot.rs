//! Exact optimal transport between small discrete measures, and a one-sided
//! probe of transport-entropy inequalities.
//!
//! The solver is a transportation simplex (the bipartite network simplex
//! with uncapacitated arcs): north-west corner start, Dantzig pricing with
//! lowest-index ties, and Bland's rule once a run of degenerate pivots shows
//! up. Every returned plan carries the primal–dual gap of its final basis.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::costs::Geometry;
use crate::measures::DiscreteMeasure;
use crate::numerics::kl_log_weights;
use crate::{Error, Result};

/// Largest `|μ|·|ν|` accepted by the exact solver.
pub const MAX_PAIRS: usize = 1_000_000;
/// Consecutive degenerate pivots tolerated before switching to Bland's rule.
const DEGENERATE_RUN: usize = 50;

/// A gauge `ω(y, z) ≥ 0` on pairs of points.
pub type Omega<'a> = dyn Fn(&[f64], &[f64]) -> f64 + Sync + 'a;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostKind {
    SquaredDistance,
    Omega,
}

/// An optimal coupling stored as its support triplets.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlanExact {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
    pub objective: f64,
    pub cost_kind: CostKind,
    /// Primal minus dual objective of the final basis; `None` for the
    /// monotone shortcut, which has no basis.
    pub duality_gap: Option<f64>,
    /// Most negative reduced cost of the final duals (0 when dual feasible).
    pub min_reduced_cost: Option<f64>,
}

impl TransportPlanExact {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Nonzero cells `(i, j, weight)`, row-major.
    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.rows * self.cols];
        for &(i, j, w) in &self.entries {
            d[i * self.cols + j] += w;
        }
        d
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut r = vec![0.0; self.rows];
        for &(i, _, w) in &self.entries {
            r[i] += w;
        }
        r
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.cols];
        for &(_, j, w) in &self.entries {
            c[j] += w;
        }
        c
    }

    /// Writes `i,j,weight` rows for the support of the coupling.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "weight"])?;
        for &(i, j, v) in &self.entries {
            w.write_record([i.to_string(), j.to_string(), format!("{v:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_pair(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<()> {
    if mu.geometry() != nu.geometry() {
        return Err(Error::GeometryMismatch("measures live on different geometries".into()));
    }
    let pairs = mu.len().saturating_mul(nu.len());
    if pairs > MAX_PAIRS {
        return Err(Error::TooLarge { pairs, limit: MAX_PAIRS });
    }
    Ok(())
}

fn squared_distance_matrix(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Vec<f64> {
    let g = mu.geometry();
    mu.points().flat_map(|x| nu.points().map(move |y| g.distance(x, y).powi(2))).collect()
}

fn is_line(g: Geometry) -> bool {
    g == Geometry::Euclidean(1)
}

/// `W₂²(μ,ν)` and an optimal coupling. One-dimensional Euclidean inputs use
/// the monotone rearrangement.
pub fn w2_squared(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<(f64, TransportPlanExact)> {
    if is_line(mu.geometry()) && mu.geometry() == nu.geometry() {
        let plan = monotone_coupling_1d(mu, nu, |a, b| (a - b) * (a - b))?;
        return Ok((plan.objective, plan));
    }
    w2_squared_lp(mu, nu)
}

/// `W₂²(μ,ν)` by the simplex, whatever the dimension.
pub fn w2_squared_lp(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<(f64, TransportPlanExact)> {
    check_pair(mu, nu)?;
    let cost = squared_distance_matrix(mu, nu);
    let plan = solve_transport(mu.weights(), nu.weights(), &cost, CostKind::SquaredDistance)?;
    Ok((plan.objective, plan))
}

/// `W_ω(μ,ν) = inf_π ∫ω dπ` by the simplex.
pub fn w_omega(mu: &DiscreteMeasure, nu: &DiscreteMeasure, omega: &Omega<'_>) -> Result<(f64, TransportPlanExact)> {
    check_pair(mu, nu)?;
    let mut cost = Vec::with_capacity(mu.len() * nu.len());
    for x in mu.points() {
        for y in nu.points() {
            let w = omega(x, y);
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!("ω must be finite and nonnegative, got {w}")));
            }
            cost.push(w);
        }
    }
    let plan = solve_transport(mu.weights(), nu.weights(), &cost, CostKind::Omega)?;
    Ok((plan.objective, plan))
}

/// North-west corner coupling of the sorted atoms of two measures on the
/// line, scored with `cost(a, b)`. Optimal whenever the cost is a convex
/// function of `b - a`.
pub fn monotone_coupling_1d(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: impl Fn(f64, f64) -> f64,
) -> Result<TransportPlanExact> {
    if !is_line(mu.geometry()) || mu.geometry() != nu.geometry() {
        return Err(Error::GeometryMismatch("monotone coupling needs measures on the line".into()));
    }
    let sorted = |m: &DiscreteMeasure| {
        let mut idx: Vec<usize> = (0..m.len()).collect();
        idx.sort_by(|&a, &b| m.point(a)[0].total_cmp(&m.point(b)[0]).then(a.cmp(&b)));
        idx
    };
    let (iu, iv) = (sorted(mu), sorted(nu));
    let (wa, wb) = (mu.weights(), nu.weights());
    let scale = wa.iter().sum::<f64>() / wb.iter().sum::<f64>();
    let (mut a, mut b) = (0, 0);
    let (mut ra, mut rb) = (wa[iu[0]], wb[iv[0]] * scale);
    let mut entries = Vec::new();
    let mut objective = 0.0;
    loop {
        let (i, j) = (iu[a], iv[b]);
        let t = ra.min(rb);
        if t > 0.0 {
            entries.push((i, j, t));
            objective += t * cost(mu.point(i)[0], nu.point(j)[0]);
        }
        ra -= t;
        rb -= t;
        let last_a = a + 1 == iu.len();
        let last_b = b + 1 == iv.len();
        if last_a && last_b {
            break;
        }
        if (ra <= rb && !last_a) || last_b {
            a += 1;
            ra += wa[iu[a]];
        } else {
            b += 1;
            rb += wb[iv[b]] * scale;
        }
    }
    entries.sort_by_key(|x| (x.0, x.1));
    Ok(TransportPlanExact {
        rows: mu.len(),
        cols: nu.len(),
        entries,
        objective,
        cost_kind: CostKind::SquaredDistance,
        duality_gap: None,
        min_reduced_cost: None,
    })
}

/// Basis of the transportation simplex: `m + n - 1` cells forming a
/// spanning tree of the bipartite graph rows ∪ columns.
struct Basis {
    m: usize,
    n: usize,
    cells: Vec<(usize, usize)>,
    flow: Vec<f64>,
    /// Basis cell indices touching each node; rows first, then columns.
    adj: Vec<Vec<usize>>,
}

impl Basis {
    fn north_west(a: &[f64], b: &[f64]) -> Self {
        let (m, n) = (a.len(), b.len());
        let mut basis = Basis { m, n, cells: Vec::new(), flow: Vec::new(), adj: vec![Vec::new(); m + n] };
        let (mut i, mut j) = (0, 0);
        let (mut ra, mut rb) = (a[0], b[0]);
        loop {
            let t = ra.min(rb);
            basis.push((i, j), t);
            ra -= t;
            rb -= t;
            if i + 1 == m && j + 1 == n {
                break;
            }
            if (ra <= rb && i + 1 < m) || j + 1 == n {
                i += 1;
                ra = a[i];
            } else {
                j += 1;
                rb = b[j];
            }
        }
        basis
    }

    fn push(&mut self, cell: (usize, usize), flow: f64) {
        let k = self.cells.len();
        self.cells.push(cell);
        self.flow.push(flow);
        self.adj[cell.0].push(k);
        self.adj[self.m + cell.1].push(k);
    }

    fn other_end(&self, k: usize, node: usize) -> usize {
        let (i, j) = self.cells[k];
        if node == i {
            self.m + j
        } else {
            i
        }
    }

    /// Duals with `u₀ = 0` and `uᵢ + vⱼ = cᵢⱼ` on basic cells.
    fn duals(&self, cost: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (self.m, self.n);
        let mut pot = vec![f64::NAN; m + n];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0]);
        while let Some(node) = queue.pop_front() {
            for &k in &self.adj[node] {
                let other = self.other_end(k, node);
                if pot[other].is_nan() {
                    let (i, j) = self.cells[k];
                    pot[other] = cost[i * n + j] - pot[node];
                    queue.push_back(other);
                }
            }
        }
        (pot[..m].to_vec(), pot[m..].to_vec())
    }

    /// Basis cells on the tree path from column `j` to row `i`, in order.
    fn path(&self, i: usize, j: usize) -> Vec<usize> {
        let start = self.m + j;
        let mut via = vec![usize::MAX; self.m + self.n];
        let mut seen = vec![false; self.m + self.n];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            if node == i {
                break;
            }
            for &k in &self.adj[node] {
                let other = self.other_end(k, node);
                if !seen[other] {
                    seen[other] = true;
                    via[other] = k;
                    queue.push_back(other);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = i;
        while node != start {
            let k = via[node];
            path.push(k);
            node = self.other_end(k, node);
        }
        path.reverse();
        path
    }

    fn replace(&mut self, leaving: usize, entering: (usize, usize), flow: f64) {
        let (i, j) = self.cells[leaving];
        self.adj[i].retain(|&k| k != leaving);
        self.adj[self.m + j].retain(|&k| k != leaving);
        self.cells[leaving] = entering;
        self.flow[leaving] = flow;
        self.adj[entering.0].push(leaving);
        self.adj[self.m + entering.1].push(leaving);
    }

    /// Flows solved exactly from the tree by peeling leaves.
    fn recompute_flows(&mut self, a: &[f64], b: &[f64]) {
        let (m, n) = (self.m, self.n);
        let mut supply: Vec<f64> = a.iter().chain(b).copied().collect();
        let mut degree: Vec<usize> = self.adj.iter().map(Vec::len).collect();
        let mut used = vec![false; self.cells.len()];
        let mut leaves: VecDeque<usize> = (0..m + n).filter(|&v| degree[v] == 1).collect();
        while let Some(node) = leaves.pop_front() {
            if degree[node] != 1 {
                continue;
            }
            let Some(&k) = self.adj[node].iter().find(|&&k| !used[k]) else { continue };
            used[k] = true;
            let x = supply[node];
            self.flow[k] = x.max(0.0);
            let other = self.other_end(k, node);
            supply[other] -= x;
            supply[node] = 0.0;
            degree[node] -= 1;
            degree[other] -= 1;
            if degree[other] == 1 {
                leaves.push_back(other);
            }
        }
        let _ = n;
    }
}

/// Exact transportation LP with supplies `a`, demands `b` (rescaled to the
/// same total) and a row-major cost matrix.
pub fn solve_transport(a: &[f64], b: &[f64], cost: &[f64], kind: CostKind) -> Result<TransportPlanExact> {
    let (m, n) = (a.len(), b.len());
    if m == 0 || n == 0 {
        return Err(Error::EmptySupport);
    }
    if cost.len() != m * n {
        return Err(Error::ShapeMismatch(format!("cost has {} entries, expected {}", cost.len(), m * n)));
    }
    if a.iter().chain(b).any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidArgument("supplies and demands must be nonnegative".into()));
    }
    let scale = a.iter().sum::<f64>() / b.iter().sum::<f64>();
    let b: Vec<f64> = b.iter().map(|w| w * scale).collect();
    let cmax = cost.iter().fold(0.0_f64, |acc, c| acc.max(c.abs()));
    let tol = 1e-12 * (1.0 + cmax);

    let mut basis = Basis::north_west(a, &b);
    let limit = 10 * m * n + 10_000;
    let mut degenerate = 0;
    let mut pivots = 0;
    loop {
        let (u, v) = basis.duals(cost);
        let bland = degenerate >= DEGENERATE_RUN;
        let mut entering: Option<((usize, usize), f64)> = None;
        'scan: for i in 0..m {
            for j in 0..n {
                let r = cost[i * n + j] - u[i] - v[j];
                if r < -tol && entering.is_none_or(|(_, best)| r < best) {
                    entering = Some(((i, j), r));
                    if bland {
                        break 'scan;
                    }
                }
            }
        }
        let Some(((i, j), _)) = entering else { break };
        pivots += 1;
        if pivots > limit {
            return Err(Error::PivotLimit(limit));
        }
        // Cycle: +θ on (i,j), then alternately -θ, +θ along the tree path
        // from column j back to row i.
        let path = basis.path(i, j);
        let mut leaving: Option<usize> = None;
        for &k in path.iter().step_by(2) {
            let better = match leaving {
                None => true,
                Some(l) => {
                    let (fk, fl) = (basis.flow[k], basis.flow[l]);
                    fk < fl || (fk == fl && basis.cells[k] < basis.cells[l])
                }
            };
            if better {
                leaving = Some(k);
            }
        }
        let leaving = leaving.expect("a cycle always has a decreasing cell");
        let theta = basis.flow[leaving];
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                basis.flow[k] -= theta;
            } else {
                basis.flow[k] += theta;
            }
        }
        basis.replace(leaving, (i, j), theta);
        degenerate = if theta == 0.0 { degenerate + 1 } else { 0 };
    }

    basis.recompute_flows(a, &b);
    let (u, v) = basis.duals(cost);
    let mut min_reduced: f64 = 0.0;
    for i in 0..m {
        for j in 0..n {
            min_reduced = min_reduced.min(cost[i * n + j] - u[i] - v[j]);
        }
    }
    let mut entries: Vec<(usize, usize, f64)> =
        basis.cells.iter().zip(&basis.flow).filter(|(_, f)| **f > 0.0).map(|(&(i, j), &f)| (i, j, f)).collect();
    entries.sort_by_key(|x| (x.0, x.1));
    let objective: f64 = entries.iter().map(|&(i, j, f)| f * cost[i * n + j]).sum();
    let dual: f64 = a.iter().zip(&u).map(|(w, p)| w * p).sum::<f64>() + b.iter().zip(&v).map(|(w, p)| w * p).sum::<f64>();
    Ok(TransportPlanExact {
        rows: m,
        cols: n,
        entries,
        objective,
        cost_kind: kind,
        duality_gap: Some(objective - dual),
        min_reduced_cost: Some(min_reduced),
    })
}

/// Which transport-entropy inequality [`ti_probe`] tests.
#[derive(Clone, Copy)]
pub enum TiForm<'a> {
    /// `W₂²(μ,ν) ≤ 2τ KL(μ|ν)`.
    Talagrand,
    /// `W_ω(μ,ν) ≤ 2τ KL(μ|ν)`.
    Omega(&'a Omega<'a>),
    /// `W_ω(μ,ν) ≤ τ(KL(μ|ν) + KL(μ|ν)^γ)`.
    Gamma { gamma: f64, omega: &'a Omega<'a> },
}

/// Result of a falsification probe. A nonpositive `max_violation` is
/// consistent with the inequality and never proves it.
#[derive(Clone, Debug, PartialEq)]
pub struct TiProbeReport {
    pub max_violation: f64,
    pub worst_candidate: usize,
    pub candidates: usize,
    pub family: &'static str,
}

const CANDIDATE_FAMILY: &str =
    "candidate 0 is ν; odd candidates are Gaussian log-reweightings of ν, even ones exponential tilts ⟨u,y⟩ (local shifts)";

/// Log factors of candidate `k` relative to ν.
fn candidate_log_factors(nu: &DiscreteMeasure, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if k == 0 {
        return vec![0.0; nu.len()];
    }
    // Log-uniform strength over [1e-2, 2].
    let s = (rng.random::<f64>() * (2.0f64 / 1e-2).ln()).exp() * 1e-2;
    if k % 2 == 1 {
        (0..nu.len()).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    } else {
        let u: Vec<f64> = (0..nu.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let un = u.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
        nu.points().map(|p| s * p.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() / un).collect()
    }
}

/// Largest `LHS - RHS` of the chosen inequality over random candidates `μ`
/// sharing ν's support.
pub fn ti_probe(nu: &DiscreteMeasure, tau: f64, form: TiForm<'_>, candidate_count: usize, seed: u64) -> Result<TiProbeReport> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument("τ must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors: Vec<Vec<f64>> = (0..candidate_count).map(|k| candidate_log_factors(nu, k, &mut rng)).collect();
    let violations = factors
        .par_iter()
        .map(|lf| {
            let mu = nu.reweighted(lf)?;
            // Reweighting may drop atoms below the weight floor; compare on
            // ν's indexing.
            let kl = if mu.len() == nu.len() {
                kl_log_weights(mu.log_weights(), nu.log_weights())?
            } else {
                mu.kl(nu).unwrap_or(f64::INFINITY)
            };
            Ok(match form {
                TiForm::Talagrand => w2_squared(&mu, nu)?.0 - 2.0 * tau * kl,
                TiForm::Omega(w) => w_omega(&mu, nu, w)?.0 - 2.0 * tau * kl,
                TiForm::Gamma { gamma, omega } => w_omega(&mu, nu, omega)?.0 - tau * (kl + kl.powf(gamma)),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut worst = (f64::NEG_INFINITY, 0);
    for (k, v) in violations.into_iter().enumerate() {
        if v > worst.0 {
            worst = (v, k);
        }
    }
    Ok(TiProbeReport {
        max_violation: if candidate_count == 0 { 0.0 } else { worst.0 },
        worst_candidate: worst.1,
        candidates: candidate_count,
        family: CANDIDATE_FAMILY,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::omega_lpa;

    fn line(points: &[f64], weights: Option<&[f64]>) -> DiscreteMeasure {
        let pts = points.iter().map(|p| vec![*p]).collect();
        match weights {
            Some(w) => DiscreteMeasure::new(Geometry::Euclidean(1), pts, w.to_vec()).unwrap(),
            None => DiscreteMeasure::uniform(Geometry::Euclidean(1), pts).unwrap(),
        }
    }

    fn check_plan(plan: &TransportPlanExact, mu: &DiscreteMeasure, nu: &DiscreteMeasure) {
        for (s, w) in plan.row_sums().iter().zip(mu.weights()) {
            assert!((s - w).abs() <= 1e-10);
        }
        for (s, w) in plan.col_sums().iter().zip(nu.weights()) {
            assert!((s - w).abs() <= 1e-10);
        }
        if let Some(g) = plan.duality_gap {
            assert!(g.abs() <= 1e-9 && plan.min_reduced_cost.unwrap() >= -1e-9);
        }
    }

    #[test]
    fn small_examples() {
        let (a, b) = (line(&[0.0], None), line(&[1.0], None));
        assert_eq!(w2_squared(&a, &b).unwrap().0, 1.0);
        assert_eq!(w2_squared_lp(&a, &b).unwrap().0, 1.0);
        let (a, b) = (line(&[0.0, 1.0], None), line(&[0.0, 2.0], None));
        // Vertex couplings: 0→0, 1→2 costs (0+1)/2; 0→2, 1→0 costs (4+1)/2.
        let (w, plan) = w2_squared_lp(&a, &b).unwrap();
        assert!((w - 0.5).abs() < 1e-15);
        check_plan(&plan, &a, &b);
        assert!((w2_squared(&a, &b).unwrap().0 - 0.5).abs() < 1e-15);
        let (w, _) = w2_squared_lp(&a, &a).unwrap();
        assert_eq!(w, 0.0);
    }

    #[test]
    fn omega_examples() {
        let (a, b) = (line(&[0.0, 1.0, 3.0], None), line(&[0.5, 2.0], None));
        let zero = |_: &[f64], _: &[f64]| 0.0;
        assert_eq!(w_omega(&a, &b, &zero).unwrap().0, 0.0);
        let d2 = |x: &[f64], y: &[f64]| (x[0] - y[0]).powi(2);
        assert!((w_omega(&a, &b, &d2).unwrap().0 - w2_squared(&a, &b).unwrap().0).abs() < 1e-10);
        let lpa = |x: &[f64], y: &[f64]| omega_lpa((x[0] - y[0]).abs(), 1.5, 1.0);
        let (w, _) = w_omega(&line(&[0.0], None), &line(&[4.0], None), &lpa).unwrap();
        assert!((w - 31.0 / 6.0).abs() < 1e-12);
        let neg = |_: &[f64], _: &[f64]| -1.0;
        assert!(w_omega(&a, &b, &neg).is_err());
    }

    #[test]
    fn lp_matches_monotone_on_random_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (m, n) = (rng.random_range(1..15), rng.random_range(1..15));
            let pa: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let pb: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let wa: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
            let wb: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let (a, b) = (line(&pa, Some(&wa)), line(&pb, Some(&wb)));
            let (lp, plan) = w2_squared_lp(&a, &b).unwrap();
            check_plan(&plan, &a, &b);
            let mono = monotone_coupling_1d(&a, &b, |x, y| (x - y) * (x - y)).unwrap();
            check_plan(&mono, &a, &b);
            assert!((lp - mono.objective).abs() <= 1e-10, "{lp} {}", mono.objective);
        }
    }

    #[test]
    fn degenerate_square_instance() {
        // Uniform marginals on equal-size grids give a fully degenerate start.
        let g = Geometry::Euclidean(2);
        let pts: Vec<Vec<f64>> = (0..16).map(|k| vec![(k % 4) as f64, (k / 4) as f64]).collect();
        let mut shuffled = pts.clone();
        shuffled.reverse();
        let a = DiscreteMeasure::uniform(g, pts).unwrap();
        let b = DiscreteMeasure::uniform(g, shuffled).unwrap();
        let (w, plan) = w2_squared_lp(&a, &b).unwrap();
        assert!(w.abs() < 1e-12);
        check_plan(&plan, &a, &b);
    }

    #[test]
    fn too_large_is_rejected() {
        let pts: Vec<f64> = (0..1001).map(|k| k as f64).collect();
        let big = line(&pts, None);
        let lpa = |_: &[f64], _: &[f64]| 1.0;
        assert!(matches!(w_omega(&big, &big, &lpa), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn csv_triplets() {
        let (a, b) = (line(&[0.0, 1.0], None), line(&[0.0, 2.0], None));
        let (_, plan) = w2_squared_lp(&a, &b).unwrap();
        let mut out = Vec::new();
        plan.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("i,j,weight\n0,0,5e-1\n1,1,5e-1"));
    }

    #[test]
    fn ti_probe_trivial_cases() {
        let nu = line(&[-1.0, 0.0, 1.0], Some(&[0.25, 0.5, 0.25]));
        let r = ti_probe(&nu, 1.0, TiForm::Talagrand, 1, 0).unwrap();
        assert_eq!(r.max_violation, 0.0);
        let r = ti_probe(&nu, 0.0, TiForm::Talagrand, 20, 0).unwrap();
        assert!(r.max_violation > 0.0);
    }
}
