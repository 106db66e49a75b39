//! End-to-end acceptance criteria. Each criterion prints one line with its
//! verdict, the measured worst case and its wall time; the test fails if any
//! criterion fails.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sinkcheck::costs::{CostModel, Geometry};
use sinkcheck::diagnostics::{
    conditional_kl_check, entropy_difference_identity, estimate_lambda, gradient_identity_residual,
    hessian_identity_residual, stability_gap, ProbeSpec, GRADIENT_FD_STEP, HESSIAN_FD_STEP,
};
use sinkcheck::exact_ot::{w2_squared, w2_squared_lp};
use sinkcheck::measures::{build_grid_measure, ti_constant, DiscreteMeasure, LogDensityModel};
use sinkcheck::numerics::{lambda_max, linear_fit};
use sinkcheck::rate_theory::{
    binfty_residual, contraction_main, gaussian_limits, gaussian_recursion, polynomial_bound,
    sequence_current_decrement, sequence_previous_decrement, Variant,
};
use sinkcheck::sinkhorn::{
    precise_kl_trace, solve_reference, EotProblem, PlanKind, SinkhornState, REFERENCE_MAX_ITER, REFERENCE_TOL,
};
use sinkcheck::Result;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Worst values seen along one Sinkhorn run.
#[derive(Default)]
struct RunAudit {
    iterations: usize,
    chain_slack: f64,
    entropy_gap: f64,
    marginal_tv: f64,
}

/// Runs until `KL(π*|π^{n,n}) < 1e-12` or `max_iter`, checking the
/// monotonicity chain, the entropy-difference identity and the wrong
/// marginals at every step. `visit` sees every state.
fn audit_run(
    problem: &Arc<EotProblem>,
    max_iter: usize,
    mut visit: impl FnMut(&SinkhornState) -> Result<()>,
) -> Result<RunAudit> {
    let reference = solve_reference(problem, REFERENCE_TOL, REFERENCE_MAX_ITER);
    assert!(reference.converged, "reference solve did not converge");
    let reference = reference.plan();
    let mut state = SinkhornState::new(problem.clone());
    let mut full = state.plan(PlanKind::Full)?;
    let mut kl_nn = reference.kl(&full)?;
    let mut audit = RunAudit { chain_slack: f64::INFINITY, ..RunAudit::default() };
    loop {
        visit(&state)?;
        let half = state.plan(PlanKind::HalfNext)?;
        let kl_half = reference.kl(&half)?;
        let (nu_wrong, rho_wrong) = state.wrong_marginals()?;
        audit.marginal_tv = audit
            .marginal_tv
            .max(tv(rho_wrong.weights(), &full.row_marginal()))
            .max(tv(nu_wrong.weights(), &half.col_marginal()));
        let prev = state.clone();
        state.step();
        full = state.plan(PlanKind::Full)?;
        let kl_next = reference.kl(&full)?;
        audit.chain_slack = audit.chain_slack.min(kl_nn - kl_half).min(kl_half - kl_next);
        if prev.iteration() >= 1 {
            let (lhs, rhs) = entropy_difference_identity(&prev, &state, &reference)?;
            audit.entropy_gap = audit.entropy_gap.max((lhs - rhs).abs());
        }
        kl_nn = kl_next;
        audit.iterations = state.iteration();
        if kl_nn < 1e-12 || state.iteration() >= max_iter {
            return Ok(audit);
        }
    }
}

fn square(lo: f64, hi: f64) -> Vec<(f64, f64)> {
    vec![(lo, hi), (lo, hi)]
}

fn grid(model: &LogDensityModel, half_width: f64, res: usize) -> DiscreteMeasure {
    build_grid_measure(model, &square(-half_width, half_width), &[res, res]).unwrap()
}

/// The ten seeded instances of the monotonicity suite.
fn monotonicity_suite() -> Vec<Arc<EotProblem>> {
    let mut out = Vec::new();
    for k in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k);
        let res = rng.random_range(10..=14);
        let shift = |rng: &mut ChaCha8Rng| vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let rho = match k % 5 {
            0 => LogDensityModel::gaussian(1.0, shift(&mut rng)),
            1 => LogDensityModel::quartic(0.5, 0.3, shift(&mut rng)),
            2 => LogDensityModel::double_well(1.0),
            3 => LogDensityModel::gaussian(2.0, shift(&mut rng)),
            _ => LogDensityModel::heavy_rho(3.0, 0.1),
        }
        .unwrap();
        let nu = match k % 3 {
            0 => LogDensityModel::gaussian(1.0, shift(&mut rng)).unwrap(),
            1 => LogDensityModel::quartic(1.0, 0.2, shift(&mut rng)).unwrap(),
            _ => LogDensityModel::uniform(),
        };
        let cost = if k % 2 == 0 { CostModel::HalfSquaredEuclidean } else { CostModel::stvs(0.5).unwrap() };
        let eps = if k < 5 { 0.25 } else { 1.0 };
        let problem = EotProblem::new(grid(&rho, 2.5, res), grid(&nu, 2.0, res), cost, eps).unwrap();
        out.push(problem);
    }
    out
}

/// Criteria 1 and 7 share the runs of the monotonicity suite.
struct SuiteRuns {
    chain_slack: f64,
    entropy_gap: f64,
    marginal_tv: f64,
    iterations: Vec<usize>,
}

fn run_monotonicity_suite() -> Result<SuiteRuns> {
    let mut out = SuiteRuns { chain_slack: f64::INFINITY, entropy_gap: 0.0, marginal_tv: 0.0, iterations: vec![] };
    for problem in monotonicity_suite() {
        let a = audit_run(&problem, 400, |_| Ok(()))?;
        out.chain_slack = out.chain_slack.min(a.chain_slack);
        out.entropy_gap = out.entropy_gap.max(a.entropy_gap);
        out.marginal_tv = out.marginal_tv.max(a.marginal_tv);
        out.iterations.push(a.iterations);
    }
    Ok(out)
}

/// Results of the log-concave rate suite, shared by criteria 2, 5 and 7.
struct EnvelopeRuns {
    worst_excess: f64,
    ratios: Vec<(f64, f64, f64)>,
    kl_violation: f64,
    entropy_gap: f64,
    marginal_tv: f64,
}

fn run_envelope_suite() -> Result<EnvelopeRuns> {
    let rho_model = LogDensityModel::gaussian(1.0, vec![0.0, 0.0])?;
    let nu_model = LogDensityModel::gaussian(1.0, vec![0.6, -0.4])?;
    let tau = ti_constant(&nu_model)?;
    let rho = build_grid_measure(&rho_model, &square(-3.0, 3.0), &[21, 21])?;
    let nu = build_grid_measure(&nu_model, &square(-3.0, 3.0), &[21, 21])?;
    let mut out =
        EnvelopeRuns { worst_excess: f64::NEG_INFINITY, ratios: vec![], kl_violation: f64::NEG_INFINITY, entropy_gap: 0.0, marginal_tv: 0.0 };
    for (k, eps) in [0.5, 1.0].into_iter().enumerate() {
        let problem = EotProblem::new(rho.clone(), nu.clone(), CostModel::HalfSquaredEuclidean, eps)?;
        let mut lambda_hat = 0.0_f64;
        let spec = ProbeSpec { samples: 120, ..ProbeSpec::default() };
        let audit = audit_run(&problem, 200, |state| {
            let est = estimate_lambda(state, &spec)?;
            lambda_hat = lambda_hat.max(est.lambda_hat);
            let check = conditional_kl_check(state, est.lambda_hat + 1e-6, 200, 77 + k as u64)?;
            out.kl_violation = out.kl_violation.max(check.worst_violation);
            Ok(())
        })?;
        out.entropy_gap = out.entropy_gap.max(audit.entropy_gap);
        out.marginal_tv = out.marginal_tv.max(audit.marginal_tv);
        let rate = contraction_main(eps, tau, lambda_hat + 1e-3, Variant::I)?;
        let kl = precise_kl_trace(&problem, None, audit.iterations + 5, 2000)?.kl_plan_nn;
        let mut worst = 0.0_f64;
        for n in 2..kl.len() - 1 {
            if kl[n] < 1e-12 {
                break;
            }
            worst = worst.max(kl[n + 1] / kl[n]);
        }
        out.worst_excess = out.worst_excess.max(worst - rate - 0.05);
        out.ratios.push((eps, worst, rate));
    }
    Ok(out)
}

fn criterion_3() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_gap = 0.0_f64;
    let mut worst_residual = 0.0_f64;
    let mut failures = 0;
    for _ in 0..20 {
        let d = rng.random_range(1..=4);
        let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let eig: Vec<f64> = (0..d).map(|_| rng.random_range(0.25..4.0)).collect();
        let sigma = &q * DMatrix::from_diagonal(&DVector::from_vec(eig)) * q.transpose();
        let sigma = 0.5 * (&sigma + sigma.transpose());
        let alpha = rng.random_range(0.25..4.0);
        let beta = rng.random_range(0.25..4.0);
        let eps = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let seq = gaussian_recursion(&sigma, alpha, beta, eps, &DMatrix::zeros(d, d), 200)?;
        let lim = gaussian_limits(&sigma, alpha, beta, eps)?;
        let gap = sinkcheck::numerics::symmetric_norm(&(&seq[200].a - &lim.a));
        let residual = binfty_residual(&sigma, alpha, beta, eps, &lim.b)?;
        if gap > 1e-8 || residual > 1e-12 {
            failures += 1;
        }
        worst_gap = worst_gap.max(gap);
        worst_residual = worst_residual.max(residual);
    }
    let id = DMatrix::identity(2, 2);
    let seq = gaussian_recursion(&id, 1.0, 1.0, 2.0, &DMatrix::zeros(2, 2), 200)?;
    let scalar = (&seq[200].a - &id * (2f64.sqrt() - 1.0)).amax();
    verdict(
        failures == 0 && scalar <= 1e-10,
        format!("{failures}/20 draws fail; max ‖A₂₀₀-A∞‖ {worst_gap:.2e}, max residual {worst_residual:.2e}, ε=2 case {scalar:.2e}"),
    )
}

fn criterion_4() -> Result<Verdict> {
    let instances = [
        (
            CostModel::HalfSquaredEuclidean,
            LogDensityModel::gaussian(1.0, vec![0.0, 0.0])?,
            LogDensityModel::quartic(1.0, 0.3, vec![0.2, -0.1])?,
        ),
        (
            CostModel::anisotropic(DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 0.7]))?,
            LogDensityModel::quartic(0.5, 0.2, vec![0.0, 0.3])?,
            LogDensityModel::gaussian(2.0, vec![-0.3, 0.0])?,
        ),
        (CostModel::pcost(1.5)?, LogDensityModel::double_well(1.0)?, LogDensityModel::uniform()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut hess, mut grad) = (0.0_f64, 0.0_f64);
    for (cost, rho_model, nu_model) in instances {
        let rho = grid(&rho_model, 2.5, 15);
        let nu = grid(&nu_model, 2.0, 15);
        let problem = EotProblem::new(rho, nu, cost, 0.5)?;
        let mut state = SinkhornState::new(problem);
        state.run(5);
        let interior = |rng: &mut ChaCha8Rng| vec![rng.random_range(-1.8..1.8), rng.random_range(-1.8..1.8)];
        for _ in 0..20 {
            hess = hess.max(hessian_identity_residual(&state, &interior(&mut rng), HESSIAN_FD_STEP)?.norm);
        }
        for _ in 0..50 {
            grad = grad.max(gradient_identity_residual(&state, &interior(&mut rng), GRADIENT_FD_STEP)?);
        }
    }
    verdict(hess <= 1e-4 && grad <= 1e-6, format!("max Hessian residual {hess:.2e}, max gradient residual {grad:.2e}"))
}

fn criterion_6() -> Result<Verdict> {
    let rho = grid(&LogDensityModel::gaussian(1.0, vec![0.0, 0.0])?, 2.5, 9);
    let nu = grid(&LogDensityModel::quartic(1.0, 0.2, vec![0.3, 0.0])?, 2.0, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noise: Vec<f64> = (0..nu.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    type Family = Box<dyn Fn(&[f64]) -> f64>;
    let families: [(&str, Family); 5] = [
        ("tilt", Box::new(|p| p[0] + 0.5 * p[1])),
        ("gaussian", Box::new(|p| -(p[0] * p[0] + p[1] * p[1]))),
        ("bump", Box::new(|p| (-(p[0] - 0.8).powi(2) - (p[1] + 0.5).powi(2)).exp())),
        ("radial", Box::new(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())),
        ("noise", Box::new(|_| 0.0)),
    ];
    let mut worst = f64::INFINITY;
    let mut count = 0;
    for eps in [0.5, 1.0] {
        let cost = CostModel::HalfSquaredEuclidean;
        let problem = EotProblem::new(rho.clone(), nu.clone(), cost.clone(), eps)?;
        let state = solve_reference(&problem, REFERENCE_TOL, REFERENCE_MAX_ITER).state;
        let lambda = estimate_lambda(&state, &ProbeSpec::default())?.lambda_hat + 1e-6;
        for (name, f) in &families {
            let base: Vec<f64> = if *name == "noise" { noise.clone() } else { nu.points().map(f).collect() };
            for target in [1e-4, 1e-2, 1e-1] {
                let mu = reweight_to_kl(&nu, &base, target)?;
                let kl = mu.kl(&nu)?;
                assert!((1e-4 * 0.99..=1e-1 * 1.01).contains(&kl), "{name}: KL {kl}");
                let gap = stability_gap(&rho, &nu, &mu, &cost, eps, lambda, None)?;
                worst = worst.min(gap.slack);
                count += 1;
            }
        }
    }
    verdict(worst >= -1e-8, format!("{count} perturbations, min slack {worst:.3e}"))
}

/// `ν·e^{s·g}` with `s > 0` chosen by bisection so that `KL(μ|ν) = target`.
fn reweight_to_kl(nu: &DiscreteMeasure, g: &[f64], target: f64) -> Result<DiscreteMeasure> {
    let at = |s: f64| -> Result<(f64, DiscreteMeasure)> {
        let mu = nu.reweighted(&g.iter().map(|v| s * v).collect::<Vec<_>>())?;
        Ok((mu.kl(nu)?, mu))
    };
    let mut hi = 1.0;
    while at(hi)?.0 < target {
        hi *= 2.0;
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
    Ok(at(0.5 * (lo + hi))?.1)
}

fn criterion_8() -> Result<Verdict> {
    let geometry = Geometry::Sphere(2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sphere = |rng: &mut ChaCha8Rng| {
        let v = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
        v.normalize().as_slice().to_vec()
    };
    let (mut grad_err, mut hess_err, mut eig_range) = (0.0_f64, 0.0_f64, (0.0_f64, 0.0_f64));
    for cost in [CostModel::SphereRegular, CostModel::sphere_delta(0.9)?] {
        for _ in 0..100 {
            let (x, y) = (sphere(&mut rng), sphere(&mut rng));
            let frame = geometry.tangent_basis(&y);
            let along = |u: &DVector<f64>, t: f64| -> f64 {
                cost.eval(&x, geometry.exp_map(&y, u.as_slice(), t).unwrap().as_slice()).unwrap()
            };
            let g = cost.grad2(&x, &y)?;
            let h = cost.hess2(&x, &y)?;
            let second = |u: &DVector<f64>| {
                let s = 1e-3;
                (along(u, s) - 2.0 * along(u, 0.0) + along(u, -s)) / (s * s)
            };
            let mut fd_h = DMatrix::zeros(2, 2);
            for a in 0..2 {
                let u = frame.column(a).into_owned();
                let fd = (along(&u, 1e-5) - along(&u, -1e-5)) / 2e-5;
                grad_err = grad_err.max((g.dot(&u) - fd).abs() / g.norm().max(1.0));
                fd_h[(a, a)] = second(&u);
                for b in a + 1..2 {
                    let v = frame.column(b).into_owned();
                    let (plus, minus) = ((&u + &v).normalize(), (&u - &v).normalize());
                    // Polarization with unit directions: the quadratic form
                    // scales by |u ± v|² = 2.
                    let off = 0.5 * (second(&plus) - second(&minus));
                    fd_h[(a, b)] = off;
                    fd_h[(b, a)] = off;
                }
            }
            let formula = frame.transpose() * &h * &frame;
            let scale = formula.norm().max(1.0);
            hess_err = hess_err.max((fd_h - &formula).norm() / scale);
            if cost == CostModel::SphereRegular {
                eig_range.1 = eig_range.1.max(lambda_max(&h));
                eig_range.0 = eig_range.0.min(-lambda_max(&(-&h)));
            }
        }
    }
    let eig_ok = eig_range.0 >= -1.0 - 1e-8 && eig_range.1 <= 1.0 + 1e-8;
    verdict(
        grad_err <= 1e-5 && hess_err <= 1e-4 && eig_ok,
        format!(
            "gradient rel err {grad_err:.2e}, Hessian rel err {hess_err:.2e}, SphereRegular spectrum [{:.3}, {:.3}]",
            eig_range.0, eig_range.1
        ),
    )
}

fn criterion_9() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut slack = f64::INFINITY;
    let mut envelope = 0.0_f64;
    for _ in 0..20 {
        let alpha: f64 = rng.random_range(1.5..4.0);
        let c: f64 = rng.random_range(0.5..4.0);
        // a₀ ≤ C^{1/(α-1)} keeps the n-1 sequence positive.
        let a0 = rng.random_range(0.05..1.0) * c.powf(1.0 / (alpha - 1.0));
        let seq = sequence_previous_decrement(alpha, c, a0, 10_000);
        for (k, a) in seq.iter().enumerate() {
            slack = slack.min(polynomial_bound(alpha, c, a0, k as u64)? - a);
        }
        let seq = sequence_current_decrement(alpha, c, a0, 10_000);
        let e = 1.0 / (alpha - 1.0);
        let cap = 2.0 * c.powf(e) / (alpha - 1.0).powf(e);
        for (n, a) in seq.iter().enumerate().skip(100) {
            envelope = envelope.max(a * (n as f64).powf(e) / cap);
        }
    }
    let a1 = sequence_current_decrement(2.0, 1.0, 1.0, 1)[1];
    let counter = (a1 - (5f64.sqrt() - 1.0) / 2.0).abs() < 1e-14 && a1 > polynomial_bound(2.0, 1.0, 1.0, 1)?;
    verdict(
        slack >= -1e-10 && envelope <= 1.0 && counter,
        format!("min slack {slack:.2e}; as-stated envelope ratio {envelope:.3}; a₁ = {a1:.12} vs bound 0.5"),
    )
}

fn criterion_10() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut gap = 0.0_f64;
    for _ in 0..20 {
        let (m, n) = (rng.random_range(2..30), rng.random_range(2..30));
        let cloud = |k: usize, rng: &mut ChaCha8Rng| {
            let pts = (0..k).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
            let w = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            DiscreteMeasure::new(Geometry::Euclidean(2), pts, w).unwrap()
        };
        let (mu, nu) = (cloud(m, &mut rng), cloud(n, &mut rng));
        let (_, plan) = w2_squared_lp(&mu, &nu)?;
        gap = gap.max(plan.duality_gap.unwrap_or(f64::INFINITY).abs());
    }
    let mut agree = 0.0_f64;
    for _ in 0..100 {
        let (m, n) = (rng.random_range(1..25), rng.random_range(1..25));
        let line = |k: usize, rng: &mut ChaCha8Rng| {
            let pts = (0..k).map(|_| vec![rng.random_range(-3.0..3.0)]).collect();
            let w = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            DiscreteMeasure::new(Geometry::Euclidean(1), pts, w).unwrap()
        };
        let (mu, nu) = (line(m, &mut rng), line(n, &mut rng));
        let lp = w2_squared_lp(&mu, &nu)?.0;
        let fast = w2_squared(&mu, &nu)?.0;
        agree = agree.max((lp - fast).abs());
        gap = gap.max(w2_squared_lp(&mu, &nu)?.1.duality_gap.unwrap_or(f64::INFINITY).abs());
    }
    verdict(gap <= 1e-9 && agree <= 1e-10, format!("max duality gap {gap:.2e}, max 1D disagreement {agree:.2e}"))
}

fn criterion_11() -> Result<Verdict> {
    let rho = build_grid_measure(&LogDensityModel::heavy_rho(3.0, 0.1)?, &[(-3.0, 3.0)], &[201])?;
    let nu = build_grid_measure(&LogDensityModel::heavy_nu(1.5)?, &[(-15.0, 15.0)], &[401])?;
    let mut fits = Vec::new();
    let mut pass = true;
    for eps in [0.5, 1.0] {
        let problem = EotProblem::new(rho.clone(), nu.clone(), CostModel::HalfSquaredEuclidean, eps)?;
        let kl = precise_kl_trace(&problem, None, 30, 100_000)?.kl_plan_nn;
        let n: Vec<f64> = (3..=30).map(|k| k as f64).collect();
        let logs: Vec<f64> = (3..=30).map(|k| kl[k].ln()).collect();
        let ok = logs.iter().all(|v| v.is_finite());
        let fit = linear_fit(&n, &logs)?;
        pass &= ok && fit.slope < 0.0 && fit.r_squared >= 0.95;
        fits.push(format!("ε={eps}: slope {:.4}, R² {:.5}", fit.slope, fit.r_squared));
    }
    verdict(pass, fits.join("; "))
}

fn timed(id: u32, budget: Option<f64>, f: impl FnOnce() -> Result<Verdict>) -> bool {
    let start = Instant::now();
    let outcome = f();
    let secs = start.elapsed().as_secs_f64();
    let within = budget.is_none_or(|b| secs <= b);
    let (pass, detail) = match outcome {
        Ok(v) => (v.pass && within, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let budget = budget.map_or(String::new(), |b| format!(" / {b:.0}s"));
    eprintln!(
        "criterion {id:>2}: {} | {detail} | {secs:.2}s{budget}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();

    let mut suite = None;
    results.push(timed(1, Some(60.0), || {
        let s = run_monotonicity_suite()?;
        let d = format!("min chain slack {:.2e} over iterations {:?}", s.chain_slack, s.iterations);
        let pass = s.chain_slack >= -1e-9;
        suite = Some(s);
        verdict(pass, d)
    }));

    let mut envelope = None;
    results.push(timed(2, Some(120.0), || {
        let e = run_envelope_suite()?;
        let rows: Vec<String> =
            e.ratios.iter().map(|(eps, r, c)| format!("ε={eps}: max ratio {r:.4} vs rate {c:.4}")).collect();
        let pass = e.worst_excess <= 0.0;
        let d = rows.join("; ");
        envelope = Some(e);
        verdict(pass, d)
    }));

    results.push(timed(3, Some(5.0), criterion_3));
    results.push(timed(4, Some(60.0), criterion_4));

    results.push(timed(5, None, || match &envelope {
        Some(e) => verdict(e.kl_violation <= 1e-8, format!("max violation {:.2e}", e.kl_violation)),
        None => verdict(false, "criterion 2 runs unavailable".into()),
    }));

    results.push(timed(6, Some(120.0), criterion_6));

    results.push(timed(7, None, || match (&suite, &envelope) {
        (Some(s), Some(e)) => {
            let gap = s.entropy_gap.max(e.entropy_gap);
            let tv = s.marginal_tv.max(e.marginal_tv);
            verdict(gap <= 1e-8 && tv <= 1e-10, format!("max |lhs-rhs| {gap:.2e}, max wrong-marginal TV {tv:.2e}"))
        }
        _ => verdict(false, "runs of criteria 1-2 unavailable".into()),
    }));

    results.push(timed(8, Some(10.0), criterion_8));
    results.push(timed(9, Some(10.0), criterion_9));
    results.push(timed(10, Some(30.0), criterion_10));
    results.push(timed(11, Some(60.0), criterion_11));

    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
