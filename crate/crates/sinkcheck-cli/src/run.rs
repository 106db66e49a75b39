//! The `run` subcommand: one Sinkhorn pipeline per (instance, ε) cell plus
//! the standalone checks, with CSV artifacts and a plain-text report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sinkcheck::costs::{CostModel, Geometry};
use sinkcheck::diagnostics::{
    conditional_kl_check, entropy_difference_identity, estimate_lambda, gradient_identity_residual,
    hessian_identity_residual, stability_gap, ProbeSpec, GRADIENT_FD_STEP, HESSIAN_FD_STEP,
};
use sinkcheck::measures::{ti_constant, DiscreteMeasure};
use sinkcheck::numerics::{lambda_max, symmetric_norm};
use sinkcheck::rate_theory::{
    binfty_residual, contraction_main, gaussian_limits, gaussian_recursion, polynomial_bound, rate_catalog,
    sequence_current_decrement, sequence_previous_decrement, RateCertificate, Setting, Variant,
};
use sinkcheck::sinkhorn::{solve_reference, EotProblem, PlanKind, SinkhornState, REFERENCE_MAX_ITER, REFERENCE_TOL};

use crate::config::{matrix, CheckId, ExperimentConfig, InstanceConfig};
use crate::plot;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub scope: String,
    pub check: &'static str,
    pub value: f64,
    pub tolerance: f64,
    /// Hard checks decide the exit status; soft ones only warn.
    pub hard: bool,
    pub passed: bool,
    pub note: String,
}

impl CheckResult {
    fn new(scope: &str, check: &'static str, value: f64, tolerance: f64, passed: bool) -> Self {
        CheckResult { scope: scope.to_string(), check, value, tolerance, hard: true, passed, note: String::new() }
    }

    fn soft(mut self) -> Self {
        self.hard = false;
        self
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    fn status(&self) -> &'static str {
        match (self.passed, self.hard) {
            (true, _) => "pass",
            (false, true) => "FAIL",
            (false, false) => "warn",
        }
    }

    fn failure(scope: &str, check: &'static str, err: impl std::fmt::Display) -> Self {
        CheckResult::new(scope, check, f64::NAN, f64::NAN, false).note(format!("error: {err}"))
    }
}

/// Everything a run produced.
pub struct RunReport {
    pub checks: Vec<CheckResult>,
    pub out: PathBuf,
}

impl RunReport {
    pub fn all_hard_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.hard)
    }
}

fn header(config: &ExperimentConfig, what: &str) -> String {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    format!(
        "# sinkcheck {} {what} for {:?}, seed {}, generated at unix time {stamp}\n",
        env!("CARGO_PKG_VERSION"),
        config.name,
        config.seed
    )
}

fn csv_text(comment: &str, head: &[&str], rows: &[Vec<String>]) -> std::io::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(head)?;
    for r in rows {
        w.write_record(r)?;
    }
    let body = w.into_inner().map_err(|e| e.into_error())?;
    Ok(format!("{comment}{}", String::from_utf8_lossy(&body)))
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

/// Writes `files` under `dir` through a sibling temporary directory and a
/// rename, so a cell directory is either complete or absent.
fn write_atomically(dir: &Path, files: &[(String, String)]) -> std::io::Result<()> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = parent.join(format!(".{name}.tmp"));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    for (file, text) in files {
        std::fs::write(tmp.join(file), text)?;
    }
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&tmp, dir)
}

fn write_file_atomically(path: &Path, text: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)
}

/// One row of a cell trace.
struct TraceLine {
    n: usize,
    kl_nn: f64,
    kl_n1n: f64,
    kl_rho_wrong: f64,
    kl_nu_wrong: f64,
    marginal_tv: f64,
    lambda_hat: f64,
}

/// Per-cell summary for `summary.csv`.
struct CellSummary {
    instance: String,
    epsilon: f64,
    iterations: usize,
    reference_converged: bool,
    final_kl: f64,
    empirical_ratio: f64,
    lambda_hat: f64,
    theorem_rate: f64,
    certificate: Option<RateCertificate>,
    status: &'static str,
}

struct CellOutput {
    checks: Vec<CheckResult>,
    summary: CellSummary,
}

fn cell_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(index as u64 + 1))
}

/// The τ used by rate checks: explicit, else the closed form for ν's model.
pub fn tau_for(inst: &InstanceConfig) -> Option<f64> {
    if let Some(t) = inst.rate.as_ref().and_then(|r| r.tau) {
        return Some(t);
    }
    let model = inst.nu.model()?.build().ok()?;
    ti_constant(&model).ok()
}

fn bbox_is_degenerate(nu: &DiscreteMeasure) -> bool {
    !nu.geometry().is_sphere() && nu.bounding_box().iter().any(|(lo, hi)| hi - lo < 1e-2)
}

fn random_query(nu: &DiscreteMeasure, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match nu.geometry() {
        Geometry::Sphere(d) => {
            let v: Vec<f64> = (0..=d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-300);
            v.iter().map(|a| a / n).collect()
        }
        Geometry::Euclidean(_) => nu
            .bounding_box()
            .iter()
            .map(|(lo, hi)| {
                let pad = 0.1 * (hi - lo);
                rng.random_range(lo + pad..=hi - pad)
            })
            .collect(),
    }
}

fn run_cell(config: &ExperimentConfig, inst: &InstanceConfig, eps: f64, seed: u64, dir: &Path) -> CellOutput {
    let scope = format!("{}/eps={eps}", inst.name);
    let mut checks = Vec::new();
    let mut summary = CellSummary {
        instance: inst.name.clone(),
        epsilon: eps,
        iterations: 0,
        reference_converged: false,
        final_kl: f64::NAN,
        empirical_ratio: f64::NAN,
        lambda_hat: f64::NAN,
        theorem_rate: f64::NAN,
        certificate: None,
        status: "pass",
    };
    let tol = &config.tolerances;
    let setup = (|| -> Result<_, String> {
        let rho = inst.rho.build().map_err(|e| e.to_string())?;
        let nu = inst.nu.build().map_err(|e| e.to_string())?;
        let cost = inst.cost.build().map_err(|e| e.to_string())?;
        let problem = EotProblem::new(rho.clone(), nu.clone(), cost.clone(), eps).map_err(|e| e.to_string())?;
        Ok((rho, nu, cost, problem))
    })();
    let (rho, nu, cost, problem) = match setup {
        Ok(v) => v,
        Err(e) => {
            checks.push(CheckResult::failure(&scope, "setup", e));
            summary.status = "FAIL";
            return CellOutput { checks, summary };
        }
    };

    let reference = solve_reference(&problem, REFERENCE_TOL, REFERENCE_MAX_ITER);
    summary.reference_converged = reference.converged;
    checks.push(
        CheckResult::new(&scope, "reference", reference.free_marginal_error, REFERENCE_TOL, reference.converged)
            .soft()
            .note(format!("{} iterations", reference.iterations)),
    );
    let reference_state = reference.state.clone();
    let reference = reference.plan();

    let probe_seed = config.probe.seed.unwrap_or(seed);
    let spec = ProbeSpec { samples: config.probe.samples, seed: probe_seed, ..ProbeSpec::default() };
    let want_lambda = config.has(CheckId::Rate) || config.has(CheckId::ConditionalKl);

    // Sinkhorn run with per-step audits.
    let mut rows = Vec::new();
    let mut chain_slack = f64::INFINITY;
    let mut identity_gap = 0.0_f64;
    let mut marginal_tv = 0.0_f64;
    let mut kl_violation = f64::NEG_INFINITY;
    let mut lambda_run = 0.0_f64;
    let mut errors: Vec<(&'static str, String)> = Vec::new();
    let mut state = SinkhornState::new(problem.clone());
    let audit = (|| -> sinkcheck::Result<()> {
        let mut full = state.plan(PlanKind::Full)?;
        let mut kl_nn = reference.kl(&full)?;
        loop {
            let mut lambda_hat = f64::NAN;
            if want_lambda {
                match estimate_lambda(&state, &spec) {
                    Ok(est) => {
                        lambda_hat = est.lambda_hat;
                        lambda_run = lambda_run.max(est.lambda_hat);
                        if config.has(CheckId::ConditionalKl) {
                            let check = conditional_kl_check(&state, est.lambda_hat + 1e-6, config.probe.pairs, probe_seed)?;
                            kl_violation = kl_violation.max(check.worst_violation);
                        }
                    }
                    Err(e) => errors.push(("lambda", e.to_string())),
                }
            }
            let half = state.plan(PlanKind::HalfNext)?;
            let kl_half = reference.kl(&half)?;
            let (nu_wrong, rho_wrong) = state.wrong_marginals()?;
            let tv = |a: &[f64], b: &[f64]| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
            marginal_tv = marginal_tv
                .max(tv(rho_wrong.weights(), &full.row_marginal()))
                .max(tv(nu_wrong.weights(), &half.col_marginal()));
            let (kr, kn) = state.wrong_marginal_kls();
            rows.push(TraceLine {
                n: state.iteration(),
                kl_nn,
                kl_n1n: kl_half,
                kl_rho_wrong: kr,
                kl_nu_wrong: kn,
                marginal_tv: state.free_marginal_error(),
                lambda_hat,
            });
            if kl_nn < tol.stop_kl || state.iteration() >= config.iterations {
                return Ok(());
            }
            let prev = state.clone();
            state.step();
            full = state.plan(PlanKind::Full)?;
            let kl_next = reference.kl(&full)?;
            chain_slack = chain_slack.min(kl_nn - kl_half).min(kl_half - kl_next);
            if prev.iteration() >= 1 && config.has(CheckId::Identity) {
                let (lhs, rhs) = entropy_difference_identity(&prev, &state, &reference)?;
                identity_gap = identity_gap.max((lhs - rhs).abs());
            }
            kl_nn = kl_next;
        }
    })();
    if let Err(e) = audit {
        checks.push(CheckResult::failure(&scope, "sinkhorn", e));
    }
    summary.iterations = state.iteration();
    summary.final_kl = rows.last().map_or(f64::NAN, |r| r.kl_nn);
    for (what, e) in errors.iter().take(1) {
        checks.push(CheckResult::failure(&scope, "lambda", format!("{what}: {e}")));
    }

    if config.has(CheckId::Monotonicity) {
        let slack = if chain_slack.is_finite() { chain_slack } else { 0.0 };
        checks.push(
            CheckResult::new(&scope, "monotonicity", slack, tol.chain_slack, slack >= -tol.chain_slack)
                .note("min slack of KL(π*|π^{n+1,n+1}) ≤ KL(π*|π^{n+1,n}) ≤ KL(π*|π^{n,n})"),
        );
    }
    if config.has(CheckId::Identity) {
        checks.push(
            CheckResult::new(&scope, "identity", identity_gap, tol.identity, identity_gap <= tol.identity)
                .note("max |lhs - rhs| of the entropy-difference identity"),
        );
        checks.push(
            CheckResult::new(&scope, "wrong-marginals", marginal_tv, tol.marginal_tv, marginal_tv <= tol.marginal_tv)
                .note("max TV between wrong marginals and plan sums"),
        );
    }
    if config.has(CheckId::ConditionalKl) {
        let v = if kl_violation.is_finite() { kl_violation } else { 0.0 };
        checks.push(
            CheckResult::new(&scope, "conditional-kl", v, tol.conditional_kl, v <= tol.conditional_kl)
                .note(format!("{} pairs per iterate, λ = Λ̂ₙ + 1e-6", config.probe.pairs)),
        );
    }
    if config.has(CheckId::Rate) {
        rate_checks(config, inst, eps, &rows, lambda_run, &scope, &mut checks, &mut summary);
    }
    if config.has(CheckId::Hessian) {
        hessian_checks(config, &state, &nu, seed, &scope, &mut checks);
    }
    if config.has(CheckId::Stability) {
        checks.push(stability_check(config, inst, &rho, &nu, &cost, eps, &reference_state, &spec, &scope));
    }

    if checks.iter().any(|c| !c.passed && c.hard) {
        summary.status = "FAIL";
    } else if checks.iter().any(|c| !c.passed) {
        summary.status = "warn";
    }

    let trace = trace_csv(config, &rows);
    let cell_checks = checks_csv(config, &checks);
    let svg = match &trace {
        Ok(text) => plot::kl_svg(text, predicted_envelope(&summary), &scope),
        Err(e) => Err(e.to_string()),
    };
    let mut files = Vec::new();
    match (trace, cell_checks) {
        (Ok(t), Ok(c)) => {
            files.push(("trace.csv".to_string(), t));
            files.push(("checks.csv".to_string(), c));
        }
        (Err(e), _) | (_, Err(e)) => checks.push(CheckResult::failure(&scope, "artifacts", e)),
    }
    files.push(("report.txt".to_string(), report_text(&checks)));
    if let Ok(svg) = svg {
        files.push(("kl.svg".to_string(), svg));
    }
    if let Err(e) = write_atomically(dir, &files) {
        checks.push(CheckResult::failure(&scope, "artifacts", e));
        summary.status = "FAIL";
    }
    CellOutput { checks, summary }
}

fn predicted_envelope(summary: &CellSummary) -> Option<f64> {
    summary.certificate.as_ref().map(|c| c.contraction).or(Some(summary.theorem_rate)).filter(|r| r.is_finite())
}

#[allow(clippy::too_many_arguments)]
fn rate_checks(
    config: &ExperimentConfig,
    inst: &InstanceConfig,
    eps: f64,
    rows: &[TraceLine],
    lambda_run: f64,
    scope: &str,
    checks: &mut Vec<CheckResult>,
    summary: &mut CellSummary,
) {
    let tol = &config.tolerances;
    let mut worst = f64::NAN;
    for w in rows.windows(2).skip(2) {
        if w[0].kl_nn < tol.stop_kl || w[0].kl_nn <= 0.0 {
            break;
        }
        let r = w[1].kl_nn / w[0].kl_nn;
        worst = if worst.is_nan() { r } else { worst.max(r) };
    }
    summary.empirical_ratio = worst;
    summary.lambda_hat = lambda_run;
    let Some(tau) = tau_for(inst) else {
        checks.push(
            CheckResult::new(scope, "rate", worst, f64::NAN, false)
                .soft()
                .note("no τ: give rate.tau or a ν model with a closed-form transport constant"),
        );
        return;
    };
    let observed = if worst.is_nan() { 0.0 } else { worst };
    if lambda_run > 0.0 {
        if let Ok(rate) = contraction_main(eps, tau, lambda_run + tol.lambda_margin, Variant::I) {
            summary.theorem_rate = rate;
            checks.push(
                CheckResult::new(scope, "rate-theorem", observed, rate + tol.rate_margin, observed <= rate + tol.rate_margin)
                    .soft()
                    .note(format!("max KL ratio for n ≥ 2 vs variant (i) at τ = {tau}, Λ̂ = {lambda_run:e} (sampled, not certified)")),
            );
        }
    }
    if let Some(rate) = &inst.rate {
        let cert = Setting::from_params(&rate.setting, &rate.params).and_then(|s| rate_catalog(&s, tau, eps));
        match cert {
            Ok(cert) => {
                let bound = cert.contraction + tol.rate_margin;
                let mut result = CheckResult::new(scope, "rate-catalog", observed, bound, observed <= bound)
                    .note(format!("{} {}", cert.setting, cert.formula));
                if !(cert.certified && cert.threshold_ok) {
                    result = result.soft().note(format!(
                        "{} {}; soft: threshold_ok = {}, certified = {}",
                        cert.setting, cert.formula, cert.threshold_ok, cert.certified
                    ));
                }
                checks.push(result);
                summary.certificate = Some(cert);
            }
            Err(e) => checks.push(CheckResult::failure(scope, "rate-catalog", e)),
        }
    }
}

fn hessian_checks(
    config: &ExperimentConfig,
    state: &SinkhornState,
    nu: &DiscreteMeasure,
    seed: u64,
    scope: &str,
    checks: &mut Vec<CheckResult>,
) {
    let tol = &config.tolerances;
    if bbox_is_degenerate(nu) {
        checks.push(CheckResult::new(scope, "hessian", 0.0, tol.hessian, true).note("ν has no interior; nothing to probe"));
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4e55);
    let mut hess = 0.0_f64;
    let mut grad = 0.0_f64;
    let result = (|| -> sinkcheck::Result<()> {
        for _ in 0..config.probe.hessian_points {
            hess = hess.max(hessian_identity_residual(state, &random_query(nu, &mut rng), HESSIAN_FD_STEP)?.norm);
        }
        for _ in 0..config.probe.gradient_points {
            grad = grad.max(gradient_identity_residual(state, &random_query(nu, &mut rng), GRADIENT_FD_STEP)?);
        }
        Ok(())
    })();
    match result {
        Ok(()) => {
            checks.push(
                CheckResult::new(scope, "hessian", hess, tol.hessian, hess <= tol.hessian)
                    .note(format!("{} query points, final iterate", config.probe.hessian_points)),
            );
            checks.push(
                CheckResult::new(scope, "gradient", grad, tol.gradient, grad <= tol.gradient)
                    .note(format!("{} query points, final iterate", config.probe.gradient_points)),
            );
        }
        Err(e) => checks.push(CheckResult::failure(scope, "hessian", e)),
    }
}

/// `ν·e^{s·g}` with `KL(μ|ν)` bisected onto `target`; `None` if the family
/// cannot reach it.
fn reweight_to_kl(nu: &DiscreteMeasure, g: &[f64], target: f64) -> sinkcheck::Result<Option<DiscreteMeasure>> {
    let at = |s: f64| -> sinkcheck::Result<(f64, DiscreteMeasure)> {
        let mu = nu.reweighted(&g.iter().map(|v| s * v).collect::<Vec<_>>())?;
        Ok((mu.kl(nu)?, mu))
    };
    let mut hi = 1.0;
    let mut doublings = 0;
    while at(hi)?.0 < target {
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return Ok(None);
        }
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if at(mid)?.0 < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(at(0.5 * (lo + hi))?.1))
}

#[allow(clippy::too_many_arguments)]
fn stability_check(
    config: &ExperimentConfig,
    inst: &InstanceConfig,
    rho: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &CostModel,
    eps: f64,
    reference: &SinkhornState,
    spec: &ProbeSpec,
    scope: &str,
) -> CheckResult {
    let tol = config.tolerances.stability;
    let lambda = match estimate_lambda(reference, spec) {
        Ok(e) => e.lambda_hat + 1e-6,
        Err(e) => return CheckResult::failure(scope, "stability", e),
    };
    let center = nu.mean();
    let families: [(&str, Vec<f64>); 2] = [
        ("tilt", nu.points().map(|p| p.iter().sum::<f64>()).collect()),
        ("gaussian", nu.points().map(|p| -p.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).collect()),
    ];
    let mut worst = f64::INFINITY;
    let mut tested = 0;
    for (_, g) in &families {
        for &target in &inst.stability_targets {
            let mu = match reweight_to_kl(nu, g, target) {
                Ok(Some(mu)) => mu,
                Ok(None) => continue,
                Err(e) => return CheckResult::failure(scope, "stability", e),
            };
            match stability_gap(rho, nu, &mu, cost, eps, lambda, None) {
                Ok(gap) => worst = worst.min(gap.slack),
                Err(e) => return CheckResult::failure(scope, "stability", e),
            }
            tested += 1;
        }
    }
    if tested == 0 {
        return CheckResult::new(scope, "stability", 0.0, tol, true).note("no perturbation reaches the KL targets; μ = ν only");
    }
    CheckResult::new(scope, "stability", worst, tol, worst >= -tol)
        .note(format!("min slack over {tested} reweightings, λ = Λ̂ + 1e-6 at the optimum"))
}

fn trace_csv(config: &ExperimentConfig, rows: &[TraceLine]) -> std::io::Result<String> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                num(r.kl_nn),
                num(r.kl_n1n),
                num(r.kl_rho_wrong),
                num(r.kl_nu_wrong),
                num(r.marginal_tv),
                num(r.lambda_hat),
            ]
        })
        .collect();
    csv_text(
        &header(config, "trace"),
        &["n", "kl_plan_nn", "kl_plan_n1n", "kl_rho_wrong", "kl_nu_wrong", "marginal_tv_error", "lambda_hat"],
        &body,
    )
}

fn checks_csv(config: &ExperimentConfig, checks: &[CheckResult]) -> std::io::Result<String> {
    let body: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            vec![
                c.scope.clone(),
                c.check.to_string(),
                num(c.value),
                num(c.tolerance),
                if c.hard { "hard" } else { "soft" }.to_string(),
                c.status().to_string(),
                c.note.clone(),
            ]
        })
        .collect();
    csv_text(&header(config, "checks"), &["scope", "check", "value", "tolerance", "kind", "status", "note"], &body)
}

fn report_text(checks: &[CheckResult]) -> String {
    let mut s = String::new();
    for c in checks {
        let _ = writeln!(
            s,
            "{:<5} {:<28} {:<16} value {:>12.4e}  tol {:>10.2e}  {}",
            c.status(),
            c.scope,
            c.check,
            c.value,
            c.tolerance,
            c.note
        );
    }
    s
}

fn gaussian_check(config: &ExperimentConfig, out: &Path) -> Vec<CheckResult> {
    let g = &config.gaussian;
    let tol = &config.tolerances;
    let scope = "gaussian";
    let result = (|| -> Result<Vec<CheckResult>, String> {
        let sigma = matrix(&g.sigma).map_err(|e| e.to_string())?;
        let d = sigma.nrows();
        let seq = gaussian_recursion(&sigma, g.alpha, g.beta, g.epsilon, &DMatrix::zeros(d, d), g.steps)
            .map_err(|e| e.to_string())?;
        let lim = gaussian_limits(&sigma, g.alpha, g.beta, g.epsilon).map_err(|e| e.to_string())?;
        let residual = binfty_residual(&sigma, g.alpha, g.beta, g.epsilon, &lim.b).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<String>> = seq
            .iter()
            .enumerate()
            .map(|(n, p)| vec![n.to_string(), num(symmetric_norm(&(&p.a - &lim.a))), num(symmetric_norm(&(&p.b - &lim.b)))])
            .collect();
        let text = csv_text(&header(config, "gaussian recursion"), &["n", "a_gap", "b_gap"], &rows).map_err(|e| e.to_string())?;
        write_file_atomically(&out.join("gaussian_recursion.csv"), &text).map_err(|e| e.to_string())?;
        let gap = symmetric_norm(&(&seq[g.steps].a - &lim.a));
        Ok(vec![
            CheckResult::new(scope, "gaussian-recursion", gap, tol.gaussian, gap <= tol.gaussian)
                .note(format!("‖A_{} - A∞‖ from A₀ = 0", g.steps)),
            CheckResult::new(scope, "fixed-point", residual, tol.fixed_point, residual <= tol.fixed_point)
                .note("B∞ fixed-point residual"),
        ])
    })();
    result.unwrap_or_else(|e| vec![CheckResult::failure(scope, "gaussian-recursion", e)])
}

fn polynomial_check(config: &ExperimentConfig, out: &Path) -> Vec<CheckResult> {
    let p = &config.polynomial;
    let tol = &config.tolerances;
    let scope = "polynomial";
    let result = (|| -> Result<Vec<CheckResult>, String> {
        let prev = sequence_previous_decrement(p.alpha, p.c, p.a0, p.steps);
        let cur = sequence_current_decrement(p.alpha, p.c, p.a0, p.steps);
        let e = 1.0 / (p.alpha - 1.0);
        let cap = 2.0 * p.c.powf(e) / (p.alpha - 1.0).powf(e);
        let mut slack = f64::INFINITY;
        let mut envelope = 0.0_f64;
        let mut rows = Vec::with_capacity(prev.len());
        for (n, (a, b)) in prev.iter().zip(&cur).enumerate() {
            let bound = polynomial_bound(p.alpha, p.c, p.a0, n as u64).map_err(|e| e.to_string())?;
            slack = slack.min(bound - a);
            if n >= 100 {
                envelope = envelope.max(b * (n as f64).powf(e) / cap);
            }
            rows.push(vec![n.to_string(), num(*a), num(bound), num(*b)]);
        }
        let text = csv_text(&header(config, "polynomial"), &["n", "a_previous_decrement", "bound", "a_current_decrement"], &rows)
            .map_err(|e| e.to_string())?;
        write_file_atomically(&out.join("polynomial.csv"), &text).map_err(|e| e.to_string())?;
        Ok(vec![
            CheckResult::new(scope, "polynomial", slack, tol.polynomial, slack >= -tol.polynomial)
                .note("min slack of the bound, decrement measured at n-1"),
            CheckResult::new(scope, "polynomial-envelope", envelope, 1.0, envelope <= 1.0)
                .note("max aₙn^{1/(α-1)} / (2C^{1/(α-1)}/(α-1)^{1/(α-1)}) for n ≥ 100, decrement at n"),
        ])
    })();
    result.unwrap_or_else(|e| vec![CheckResult::failure(scope, "polynomial", e)])
}

fn sphere_check(config: &ExperimentConfig, seed: u64, out: &Path) -> Vec<CheckResult> {
    let tol = &config.tolerances;
    let scope = "sphere";
    let result = (|| -> Result<Vec<CheckResult>, String> {
        let geometry = Geometry::Sphere(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f3e);
        let costs = [CostModel::SphereRegular, CostModel::sphere_delta(config.sphere.delta).map_err(|e| e.to_string())?];
        let mut rows = Vec::new();
        let (mut grad_err, mut hess_err) = (0.0_f64, 0.0_f64);
        let (mut lo, mut hi) = (0.0_f64, 0.0_f64);
        for cost in &costs {
            let name = if *cost == CostModel::SphereRegular { "sphere-regular" } else { "sphere-delta" };
            for k in 0..config.sphere.pairs {
                let mut point = || {
                    let v = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
                    v.normalize().as_slice().to_vec()
                };
                let (x, y) = (point(), point());
                let (g_rel, h_rel) = sphere_errors(cost, geometry, &x, &y).map_err(|e| e.to_string())?;
                grad_err = grad_err.max(g_rel);
                hess_err = hess_err.max(h_rel);
                if *cost == CostModel::SphereRegular {
                    let h = cost.hess2(&x, &y).map_err(|e| e.to_string())?;
                    hi = hi.max(lambda_max(&h));
                    lo = lo.min(-lambda_max(&(-h)));
                }
                rows.push(vec![name.to_string(), k.to_string(), num(g_rel), num(h_rel)]);
            }
        }
        let text = csv_text(&header(config, "sphere derivatives"), &["cost", "pair", "gradient_rel_err", "hessian_rel_err"], &rows)
            .map_err(|e| e.to_string())?;
        write_file_atomically(&out.join("sphere_derivatives.csv"), &text).map_err(|e| e.to_string())?;
        let spread = (lo + 1.0).min(1.0 - hi);
        Ok(vec![
            CheckResult::new(scope, "sphere-gradient", grad_err, tol.sphere_gradient, grad_err <= tol.sphere_gradient),
            CheckResult::new(scope, "sphere-hessian", hess_err, tol.sphere_hessian, hess_err <= tol.sphere_hessian),
            CheckResult::new(scope, "sphere-spectrum", spread, -1e-8, spread >= -1e-8)
                .note(format!("SphereRegular Hessian spectrum within [{lo:.4}, {hi:.4}]")),
        ])
    })();
    result.unwrap_or_else(|e| vec![CheckResult::failure(scope, "sphere-derivatives", e)])
}

/// Relative gradient and Hessian errors against geodesic differences in an
/// orthonormal tangent frame at `y`.
fn sphere_errors(cost: &CostModel, geometry: Geometry, x: &[f64], y: &[f64]) -> sinkcheck::Result<(f64, f64)> {
    let frame = geometry.tangent_basis(y);
    let along = |u: &DVector<f64>, t: f64| -> sinkcheck::Result<f64> {
        cost.eval(x, geometry.exp_map(y, u.as_slice(), t)?.as_slice())
    };
    let second = |u: &DVector<f64>| -> sinkcheck::Result<f64> {
        let s = 1e-3;
        Ok((along(u, s)? - 2.0 * along(u, 0.0)? + along(u, -s)?) / (s * s))
    };
    let g = cost.grad2(x, y)?;
    let h = cost.hess2(x, y)?;
    let k = frame.ncols();
    let mut fd = DMatrix::zeros(k, k);
    let mut g_err = 0.0_f64;
    for a in 0..k {
        let u = frame.column(a).into_owned();
        let d = (along(&u, 1e-5)? - along(&u, -1e-5)?) / 2e-5;
        g_err = g_err.max((g.dot(&u) - d).abs() / g.norm().max(1.0));
        fd[(a, a)] = second(&u)?;
        for b in a + 1..k {
            let v = frame.column(b).into_owned();
            let off = 0.5 * (second(&(&u + &v).normalize())? - second(&(&u - &v).normalize())?);
            fd[(a, b)] = off;
            fd[(b, a)] = off;
        }
    }
    let formula = frame.transpose() * h * &frame;
    let h_err = (fd - &formula).norm() / formula.norm().max(1.0);
    Ok((g_err, h_err))
}

fn summary_csv(config: &ExperimentConfig, cells: &[CellSummary]) -> std::io::Result<String> {
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            let (setting, rate, ok, certified) = match &c.certificate {
                Some(cert) => (cert.setting.to_string(), num(cert.contraction), cert.threshold_ok.to_string(), cert.certified.to_string()),
                None => (String::new(), String::new(), String::new(), String::new()),
            };
            vec![
                c.instance.clone(),
                num(c.epsilon),
                c.iterations.to_string(),
                c.reference_converged.to_string(),
                num(c.final_kl),
                num(c.empirical_ratio),
                num(c.lambda_hat),
                num(c.theorem_rate),
                setting,
                rate,
                ok,
                certified,
                c.status.to_string(),
            ]
        })
        .collect();
    csv_text(
        &header(config, "summary"),
        &[
            "instance",
            "epsilon",
            "iterations",
            "reference_converged",
            "final_kl",
            "empirical_ratio",
            "lambda_hat",
            "theorem_rate",
            "catalog_setting",
            "catalog_rate",
            "threshold_ok",
            "certified",
            "status",
        ],
        &rows,
    )
}

/// Runs every requested check and writes all artifacts under `out`.
pub fn run(config: &ExperimentConfig, out: &Path) -> std::io::Result<RunReport> {
    std::fs::create_dir_all(out)?;
    let cells: Vec<(usize, &InstanceConfig, f64)> = if config.checks.iter().any(|c| c.per_cell()) {
        config
            .instances
            .iter()
            .flat_map(|inst| config.epsilons.iter().map(move |&e| (inst, e)))
            .enumerate()
            .map(|(k, (inst, e))| (k, inst, e))
            .collect()
    } else {
        Vec::new()
    };
    let outputs: Vec<CellOutput> = cells
        .par_iter()
        .map(|&(k, inst, eps)| {
            let dir = out.join(&inst.name).join(format!("eps_{eps}"));
            run_cell(config, inst, eps, cell_seed(config.seed, k), &dir)
        })
        .collect();

    let mut checks = Vec::new();
    let mut summaries = Vec::new();
    for o in outputs {
        checks.extend(o.checks);
        summaries.push(o.summary);
    }
    if config.has(CheckId::GaussianRecursion) {
        checks.extend(gaussian_check(config, out));
    }
    if config.has(CheckId::Polynomial) {
        checks.extend(polynomial_check(config, out));
    }
    if config.has(CheckId::SphereDerivatives) {
        checks.extend(sphere_check(config, config.probe.seed.unwrap_or(config.seed), out));
    }
    if !summaries.is_empty() {
        write_file_atomically(&out.join("summary.csv"), &summary_csv(config, &summaries)?)?;
    }
    write_file_atomically(&out.join("checks.csv"), &checks_csv(config, &checks)?)?;
    write_file_atomically(&out.join("report.txt"), &report_text(&checks))?;
    Ok(RunReport { checks, out: out.to_path_buf() })
}

/// One line per check plus a verdict, for the terminal.
pub fn print_report(report: &RunReport) {
    print!("{}", report_text(&report.checks));
    let hard_failed = report.checks.iter().filter(|c| c.hard && !c.passed).count();
    let warned = report.checks.iter().filter(|c| !c.hard && !c.passed).count();
    println!(
        "{} checks, {hard_failed} hard failures, {warned} warnings; artifacts in {}",
        report.checks.len(),
        report.out.display()
    );
}
