//! Small numerical kernels shared across modules.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::{Error, Result};

/// Max-shifted log-sum-exp. Returns `-inf` for an empty input or when every
/// entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// Log-sum-exp of `f(k)` for `k in 0..n`, without allocating.
pub(crate) fn log_sum_exp_with(n: usize, f: impl Fn(usize) -> f64) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for k in 0..n {
        m = m.max(f(k));
    }
    if !m.is_finite() {
        return m;
    }
    let mut s = 0.0;
    for k in 0..n {
        s += (f(k) - m).exp();
    }
    m + s.ln()
}

/// `e^l (l - 1) + 1`, the KL integrand written against the second measure:
/// `Σ q h(log p/q) = Σ p log(p/q) - Σ p + Σ q`. Nonnegative, and accurate
/// for tiny `l` where the direct form cancels.
pub fn bregman_h(l: f64) -> f64 {
    if l.abs() < 1e-2 {
        let l2 = l * l;
        l2 * (0.5 + l * (1.0 / 3.0 + l * (1.0 / 8.0 + l * (1.0 / 30.0 + l * (1.0 / 144.0 + l * (1.0 / 840.0 + l * (1.0 / 5760.0 + l / 45360.0)))))))
    } else {
        l.exp() * (l - 1.0) + 1.0
    }
}

/// One KL term given `log q` and `l = log p - log q`.
#[inline]
pub(crate) fn kl_term(log_q: f64, l: f64) -> f64 {
    if log_q == f64::NEG_INFINITY {
        // q = 0: finite only if p = 0 too.
        return if l == f64::NEG_INFINITY || l.is_nan() { 0.0 } else { f64::INFINITY };
    }
    if l == f64::NEG_INFINITY {
        return log_q.exp();
    }
    if l.abs() < 1e-2 {
        log_q.exp() * bregman_h(l)
    } else {
        let p = (log_q + l).exp();
        p * (l - 1.0) + log_q.exp()
    }
}

/// KL(p|q) from aligned log weights. `-inf` marks a zero weight.
pub fn kl_log_weights(log_p: &[f64], log_q: &[f64]) -> Result<f64> {
    if log_p.len() != log_q.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} atoms against {}",
            log_p.len(),
            log_q.len()
        )));
    }
    let mut total = 0.0;
    for (&lp, &lq) in log_p.iter().zip(log_q) {
        if lp == f64::NEG_INFINITY {
            total += if lq == f64::NEG_INFINITY { 0.0 } else { lq.exp() };
            continue;
        }
        if lq == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        total += kl_term(lq, lp - lq);
    }
    Ok(total.max(0.0))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    if m.nrows() == 2 {
        let (a, b, c) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
        let mean = 0.5 * (a + c);
        let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        return mean + rad;
    }
    let sym = 0.5 * (m + m.transpose());
    SymmetricEigen::new(sym).eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Spectral norm of a symmetric matrix (largest absolute eigenvalue).
pub fn symmetric_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = 0.5 * (m + m.transpose());
    SymmetricEigen::new(sym).eigenvalues.iter().fold(0.0_f64, |acc, e| acc.max(e.abs()))
}

/// Ordinary least squares `y ≈ slope·x + intercept` with its R².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::ShapeMismatch("linear fit needs two equal series of length ≥ 2".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("degenerate abscissae".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LinearFit { slope, intercept, r_squared })
}
