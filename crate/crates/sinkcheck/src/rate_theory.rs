//! Closed-form convergence rates and thresholds, the Gaussian matrix
//! recursion with its limits, light-tail covariance bounds and the
//! polynomial-decay bounds.
//!
//! Every catalog entry is written as a gain `κ = num/(num + extra)` with
//! contraction `1 - κ`, and records the semiconcavity constant
//! `Λ = ε·extra/(τ·num)`, which is the `Λ` for which the main theorem's
//! rate reproduces the displayed one.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::numerics::symmetric_norm;
use crate::{Error, Result};

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

fn nonnegative(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::InvalidArgument(format!("{name} must be nonnegative and finite, got {v}")));
    }
    Ok(())
}

/// The two rates of the main convergence theorem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// `1 - min{τΛ,ε}/(min{τΛ,ε} + τΛ)`.
    I,
    /// `1 - ε/(ε + τΛ)`.
    II,
}

pub fn contraction_main(epsilon: f64, tau: f64, lambda: f64, variant: Variant) -> Result<f64> {
    positive("ε", epsilon)?;
    positive("τ", tau)?;
    positive("Λ", lambda)?;
    let tl = tau * lambda;
    Ok(match variant {
        Variant::I => {
            let m = tl.min(epsilon);
            1.0 - m / (m + tl)
        }
        Variant::II => 1.0 - epsilon / (epsilon + tl),
    })
}

/// One setting of the rate catalog with its parameters. `h_upper`/`h_lower`
/// are the Hessian bounds `H(c) ≥ h(c)` of the cost.
#[derive(Clone, Debug, PartialEq)]
pub enum Setting {
    /// Main theorem with a given `Λ`.
    Theorem { lambda: f64, variant: Variant },
    /// Anisotropic quadratic cost, `∇²U_ρ ⪰ α`, `∇²U_ν ⪯ β`.
    Anisotropic { sigma_norm: f64, alpha: f64, beta: f64 },
    /// Anisotropic quadratic cost, `∇²U_ρ ⪰ α` only.
    LogConcave { sigma_norm: f64, alpha: f64 },
    /// Quadratic cost, ρ weakly log-concave with parameters `(α, L)`.
    WeakLogConcave { alpha: f64, l: f64 },
    /// Light-tailed ρ, cost with Hessian bounds.
    LightTails { h_upper: f64, h_lower: f64, l: f64, r: f64, c: f64, delta: f64 },
    /// Light-tailed ρ, anisotropic quadratic cost.
    LightTailsQuadratic { sigma_norm: f64, l: f64, r: f64, c: f64, delta: f64 },
    /// Cost Lipschitz in `y` uniformly in `x`.
    LipschitzY { lip: f64, h_upper: f64, h_lower: f64 },
    /// Cost Lipschitz in `x` uniformly in `y`, ρ with log-Sobolev constant `c_rho`.
    LipschitzX { lip: f64, h_upper: f64, h_lower: f64, c_rho: f64 },
    /// Compactly supported ρ and constant `∇₂²c`; `g_norm = ‖∇₂c - Σy‖_∞`.
    CompactSupport { g_norm: f64 },
    /// Both marginals compactly supported.
    CompactBoth { grad_norm: f64, h_upper: f64, h_lower: f64 },
    /// `c(x,y) = 1 - ⟨x,y⟩` on the sphere.
    SphereRegular,
    /// `c_δ(x,y) = arccos(δ⟨x,y⟩)²` on the sphere.
    SphereDelta { delta: f64 },
    /// Heavy-tailed pair with a user-supplied, non-certified constant `K`.
    HeavyTail { k: f64 },
}

/// One catalog row: tag, required parameters and the displayed rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CatalogEntry {
    pub tag: &'static str,
    pub params: &'static [&'static str],
    pub formula: &'static str,
}

const fn entry(tag: &'static str, params: &'static [&'static str], formula: &'static str) -> CatalogEntry {
    CatalogEntry { tag, params, formula }
}

/// Every setting accepted by [`Setting::from_params`].
pub const CATALOG: [CatalogEntry; 14] = [
    entry("theorem-i", &["lambda"], "1-min{τΛ,ε}/(min{τΛ,ε}+τΛ)"),
    entry("theorem-ii", &["lambda"], "1-ε/(ε+τΛ)"),
    entry("anisotropic", &["sigma_norm", "alpha", "beta"], "1-ε/(ε+τ‖Σ‖√(β/α))"),
    entry("log-concave", &["sigma_norm", "alpha"], "1-ε²α/(ε²α+τ‖Σ‖²)"),
    entry("weak-log-concave", &["alpha", "l"], "1-ε²α²/(ε²α²+τ(α+L))"),
    entry(
        "light-tails",
        &["h_upper", "h_lower", "l", "r", "c", "delta"],
        "1-ε^(2+2/δ)/(ε^(2+2/δ)+ε^(1+2/δ)τδH+2τH²(ε^(2/δ)+(L+2)²C^(-2/δ)(ε+2δH)^(2/δ))); δH = 0: 1-ε²/(ε²+2τH²(1+(L+2)²[R²∨C^(-2/δ)]))",
    ),
    entry("light-tails-quadratic", &["sigma_norm", "l", "r", "c", "delta"], "1-ε²/(ε²+2τ‖Σ‖²(1+(L+1)²[R²∨C^(-2/δ)]))"),
    entry("lipschitz-y", &["lip", "h_upper", "h_lower"], "1-ε²/(ε²+τε(H-h)+τLip²)"),
    entry("lipschitz-x", &["lip", "h_upper", "h_lower", "c_rho"], "1-ε⁴/(ε⁴+τε³(H-h)+2τH²C_ρ(ε²+4C_ρLip²))"),
    entry("compact", &["g_norm"], "1-ε²/(ε²+τ‖g‖²)"),
    entry("compact-both", &["grad_norm", "h_upper", "h_lower"], "1-ε²/(ε²+τε(H-h)+τ‖∇₂c‖²)"),
    entry("sphere-regular", &[], "1-ε²/(ε²+2τε+τ)"),
    entry("sphere-delta", &["delta"], "1-ε²/(ε²+2τε(δ²+2π/√(1-δ²))+4π²τ/(1-δ²))"),
    entry("heavy-tail", &["k"], "1-min{K,ε}/(min{K,ε}+K)"),
];

/// Looks up a catalog row by tag.
pub fn catalog_entry(tag: &str) -> Result<&'static CatalogEntry> {
    CATALOG.iter().find(|e| e.tag == tag).ok_or_else(|| Error::UnknownSetting(tag.to_string()))
}

impl Setting {
    pub fn tag(&self) -> &'static str {
        match self {
            Setting::Theorem { variant: Variant::I, .. } => "theorem-i",
            Setting::Theorem { variant: Variant::II, .. } => "theorem-ii",
            Setting::Anisotropic { .. } => "anisotropic",
            Setting::LogConcave { .. } => "log-concave",
            Setting::WeakLogConcave { .. } => "weak-log-concave",
            Setting::LightTails { .. } => "light-tails",
            Setting::LightTailsQuadratic { .. } => "light-tails-quadratic",
            Setting::LipschitzY { .. } => "lipschitz-y",
            Setting::LipschitzX { .. } => "lipschitz-x",
            Setting::CompactSupport { .. } => "compact",
            Setting::CompactBoth { .. } => "compact-both",
            Setting::SphereRegular => "sphere-regular",
            Setting::SphereDelta { .. } => "sphere-delta",
            Setting::HeavyTail { .. } => "heavy-tail",
        }
    }

    /// Builds a setting from its tag and named parameters.
    pub fn from_params(tag: &str, params: &BTreeMap<String, f64>) -> Result<Setting> {
        let entry = catalog_entry(tag)?;
        if let Some(k) = entry.params.iter().find(|k| !params.contains_key(**k)) {
            return Err(Error::MissingParameter(format!("{tag} needs {k}")));
        }
        let get = |k: &str| params.get(k).copied().ok_or_else(|| Error::MissingParameter(format!("{tag} needs {k}")));
        Ok(match tag {
            "theorem-i" => Setting::Theorem { lambda: get("lambda")?, variant: Variant::I },
            "theorem-ii" => Setting::Theorem { lambda: get("lambda")?, variant: Variant::II },
            "anisotropic" => Setting::Anisotropic { sigma_norm: get("sigma_norm")?, alpha: get("alpha")?, beta: get("beta")? },
            "log-concave" => Setting::LogConcave { sigma_norm: get("sigma_norm")?, alpha: get("alpha")? },
            "weak-log-concave" => Setting::WeakLogConcave { alpha: get("alpha")?, l: get("l")? },
            "light-tails" => Setting::LightTails {
                h_upper: get("h_upper")?,
                h_lower: get("h_lower")?,
                l: get("l")?,
                r: get("r")?,
                c: get("c")?,
                delta: get("delta")?,
            },
            "light-tails-quadratic" => Setting::LightTailsQuadratic {
                sigma_norm: get("sigma_norm")?,
                l: get("l")?,
                r: get("r")?,
                c: get("c")?,
                delta: get("delta")?,
            },
            "lipschitz-y" => Setting::LipschitzY { lip: get("lip")?, h_upper: get("h_upper")?, h_lower: get("h_lower")? },
            "lipschitz-x" => Setting::LipschitzX {
                lip: get("lip")?,
                h_upper: get("h_upper")?,
                h_lower: get("h_lower")?,
                c_rho: get("c_rho")?,
            },
            "compact" => Setting::CompactSupport { g_norm: get("g_norm")? },
            "compact-both" => {
                Setting::CompactBoth { grad_norm: get("grad_norm")?, h_upper: get("h_upper")?, h_lower: get("h_lower")? }
            }
            "sphere-regular" => Setting::SphereRegular,
            "sphere-delta" => Setting::SphereDelta { delta: get("delta")? },
            "heavy-tail" => Setting::HeavyTail { k: get("k")? },
            other => return Err(Error::UnknownSetting(other.to_string())),
        })
    }

    /// Parameter names and values, in the order used by catalog dumps.
    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Setting::Theorem { lambda, .. } => vec![("lambda", lambda)],
            Setting::Anisotropic { sigma_norm, alpha, beta } => {
                vec![("sigma_norm", sigma_norm), ("alpha", alpha), ("beta", beta)]
            }
            Setting::LogConcave { sigma_norm, alpha } => vec![("sigma_norm", sigma_norm), ("alpha", alpha)],
            Setting::WeakLogConcave { alpha, l } => vec![("alpha", alpha), ("l", l)],
            Setting::LightTails { h_upper, h_lower, l, r, c, delta } => vec![
                ("h_upper", h_upper),
                ("h_lower", h_lower),
                ("l", l),
                ("r", r),
                ("c", c),
                ("delta", delta),
            ],
            Setting::LightTailsQuadratic { sigma_norm, l, r, c, delta } => {
                vec![("sigma_norm", sigma_norm), ("l", l), ("r", r), ("c", c), ("delta", delta)]
            }
            Setting::LipschitzY { lip, h_upper, h_lower } => vec![("lip", lip), ("h_upper", h_upper), ("h_lower", h_lower)],
            Setting::LipschitzX { lip, h_upper, h_lower, c_rho } => {
                vec![("lip", lip), ("h_upper", h_upper), ("h_lower", h_lower), ("c_rho", c_rho)]
            }
            Setting::CompactSupport { g_norm } => vec![("g_norm", g_norm)],
            Setting::CompactBoth { grad_norm, h_upper, h_lower } => {
                vec![("grad_norm", grad_norm), ("h_upper", h_upper), ("h_lower", h_lower)]
            }
            Setting::SphereRegular => vec![],
            Setting::SphereDelta { delta } => vec![("delta", delta)],
            Setting::HeavyTail { k } => vec![("k", k)],
        }
    }
}

/// A rate evaluated for one setting at given `(τ, ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RateCertificate {
    pub setting: &'static str,
    pub formula: &'static str,
    pub lambda: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub contraction: f64,
    /// Largest `ε` for which the displayed rate is claimed.
    pub threshold: f64,
    pub threshold_ok: bool,
    /// False for entries whose constants are not computable.
    pub certified: bool,
}

fn hessian_gap(h_upper: f64, h_lower: f64) -> Result<f64> {
    if !(h_upper >= h_lower) || !h_upper.is_finite() || !h_lower.is_finite() {
        return Err(Error::InvalidArgument(format!("need H(c) ≥ h(c), got {h_upper} < {h_lower}")));
    }
    Ok(h_upper - h_lower)
}

/// Evaluates the displayed rate and ε-threshold of a setting.
pub fn rate_catalog(setting: &Setting, tau: f64, epsilon: f64) -> Result<RateCertificate> {
    positive("τ", tau)?;
    positive("ε", epsilon)?;
    let eps = epsilon;
    let mut certified = true;
    // (formula, num, extra, threshold): gain num/(num + extra).
    let (formula, num, extra, threshold) = match *setting {
        Setting::Theorem { lambda, variant } => {
            positive("Λ", lambda)?;
            let tl = tau * lambda;
            match variant {
                Variant::I => ("1-min{τΛ,ε}/(min{τΛ,ε}+τΛ)", tl.min(eps), tl, f64::INFINITY),
                Variant::II => ("1-ε/(ε+τΛ)", eps, tl, f64::INFINITY),
            }
        }
        Setting::Anisotropic { sigma_norm, alpha, beta } => {
            positive("‖Σ‖", sigma_norm)?;
            positive("α", alpha)?;
            positive("β", beta)?;
            let s = (beta / alpha).sqrt() * sigma_norm;
            ("1-ε/(ε+τ‖Σ‖√(β/α))", eps, tau * s, tau * s)
        }
        Setting::LogConcave { sigma_norm, alpha } => {
            positive("‖Σ‖", sigma_norm)?;
            positive("α", alpha)?;
            (
                "1-ε²α/(ε²α+τ‖Σ‖²)",
                eps * eps * alpha,
                tau * sigma_norm * sigma_norm,
                sigma_norm * (tau / alpha).sqrt(),
            )
        }
        Setting::WeakLogConcave { alpha, l } => {
            positive("α", alpha)?;
            nonnegative("L", l)?;
            (
                "1-ε²α²/(ε²α²+τ(α+L))",
                eps * eps * alpha * alpha,
                tau * (alpha + l),
                (tau * (alpha + l)).sqrt() / alpha,
            )
        }
        Setting::LightTails { h_upper, h_lower, l, r, c, delta } => {
            let dh = hessian_gap(h_upper, h_lower)?;
            nonnegative("L", l)?;
            nonnegative("R", r)?;
            positive("C", c)?;
            positive("δ", delta)?;
            let h2 = h_upper * h_upper;
            let cd = c.powf(-2.0 / delta);
            if dh == 0.0 {
                let k = r * r;
                let k = k.max(cd);
                (
                    "1-ε²/(ε²+2τH²(1+(L+2)²[R²∨C^{-2/δ}]))",
                    eps * eps,
                    2.0 * tau * h2 * (1.0 + (l + 2.0).powi(2) * k),
                    // Kept as displayed, with (L+2) not squared.
                    (2.0 * tau * h2 * (1.0 + (l + 2.0) * k)).sqrt(),
                )
            } else {
                let p = 2.0 / delta;
                let num = eps.powf(2.0 + p);
                let extra = eps.powf(1.0 + p) * tau * dh
                    + 2.0 * tau * h2 * (eps.powf(p) + (l + 2.0).powi(2) * cd * (eps + 2.0 * dh).powf(p));
                let tail = {
                    let denom = (r.powf(delta) * c - 1.0).max(0.0);
                    if denom == 0.0 {
                        f64::INFINITY
                    } else {
                        dh / denom
                    }
                };
                let power = (tau * dh + 2.0 * tau * h2 * (1.0 + (l + 2.0).powi(2) * cd * (1.0 + 2.0 * dh).powf(p)))
                    .powf(delta / (2.0 + 2.0 * delta));
                (
                    "1-ε^(2+2/δ)/(ε^(2+2/δ)+ε^(1+2/δ)τδH+2τH²(ε^(2/δ)+(L+2)²C^(-2/δ)(ε+2δH)^(2/δ)))",
                    num,
                    extra,
                    1.0_f64.min(tail).min(power),
                )
            }
        }
        Setting::LightTailsQuadratic { sigma_norm, l, r, c, delta } => {
            positive("‖Σ‖", sigma_norm)?;
            nonnegative("L", l)?;
            nonnegative("R", r)?;
            positive("C", c)?;
            positive("δ", delta)?;
            let k = 1.0 + (l + 1.0).powi(2) * (r * r).max(c.powf(-2.0 / delta));
            (
                "1-ε²/(ε²+2τ‖Σ‖²(1+(L+1)²[R²∨C^{-2/δ}]))",
                eps * eps,
                2.0 * tau * sigma_norm * sigma_norm * k,
                sigma_norm * (2.0 * tau * k).sqrt(),
            )
        }
        Setting::LipschitzY { lip, h_upper, h_lower } => {
            let dh = hessian_gap(h_upper, h_lower)?;
            nonnegative("Lip", lip)?;
            (
                "1-ε²/(ε²+τε(H-h)+τLip²)",
                eps * eps,
                tau * eps * dh + tau * lip * lip,
                0.5 * (tau * dh + (tau * tau * dh * dh + 4.0 * tau * lip * lip).sqrt()),
            )
        }
        Setting::LipschitzX { lip, h_upper, h_lower, c_rho } => {
            let dh = hessian_gap(h_upper, h_lower)?;
            nonnegative("Lip", lip)?;
            positive("C_ρ", c_rho)?;
            let h2 = h_upper * h_upper;
            (
                "1-ε⁴/(ε⁴+τε³(H-h)+2τH²C_ρ(ε²+4C_ρLip²))",
                eps.powi(4),
                tau * eps.powi(3) * dh + 2.0 * tau * h2 * c_rho * (eps * eps + 4.0 * c_rho * lip * lip),
                1.0_f64.min((tau * dh + 2.0 * tau * h2 * c_rho * (1.0 + 4.0 * c_rho * lip * lip)).powf(0.25)),
            )
        }
        Setting::CompactSupport { g_norm } => {
            nonnegative("‖g‖", g_norm)?;
            ("1-ε²/(ε²+τ‖g‖²)", eps * eps, tau * g_norm * g_norm, tau.sqrt() * g_norm)
        }
        Setting::CompactBoth { grad_norm, h_upper, h_lower } => {
            let dh = hessian_gap(h_upper, h_lower)?;
            nonnegative("‖∇₂c‖", grad_norm)?;
            (
                "1-ε²/(ε²+τε(H-h)+τ‖∇₂c‖²)",
                eps * eps,
                tau * eps * dh + tau * grad_norm * grad_norm,
                0.5 * (tau * dh + (tau * tau * dh * dh + 4.0 * tau * grad_norm * grad_norm).sqrt()),
            )
        }
        Setting::SphereRegular => ("1-ε²/(ε²+2τε+τ)", eps * eps, 2.0 * tau * eps + tau, tau + (tau + tau * tau).sqrt()),
        Setting::SphereDelta { delta } => {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(Error::InvalidArgument(format!("δ must lie in (0,1), got {delta}")));
            }
            let q = 1.0 - delta * delta;
            let a = delta * delta + 2.0 * PI / q.sqrt();
            let b = 4.0 * PI * PI * tau / q;
            (
                "1-ε²/(ε²+2τε(δ²+2π/√(1-δ²))+4π²τ/(1-δ²))",
                eps * eps,
                2.0 * tau * eps * a + b,
                tau * a + (tau * tau * a * a + b).sqrt(),
            )
        }
        Setting::HeavyTail { k } => {
            positive("K", k)?;
            certified = false;
            let m = k.min(eps);
            ("1-min{K,ε}/(min{K,ε}+K)", m, k, f64::INFINITY)
        }
    };
    let gain = num / (num + extra);
    if !gain.is_finite() {
        return Err(Error::InvalidArgument("rate is undefined for these parameters".into()));
    }
    Ok(RateCertificate {
        setting: setting.tag(),
        formula,
        lambda: eps * extra / (tau * num),
        tau,
        epsilon,
        contraction: 1.0 - gain,
        threshold,
        threshold_ok: epsilon <= threshold,
        certified,
    })
}

/// Iterates `(Aₙ, Bₙ)` of the Gaussian recursion.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixPair {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

fn check_spd(sigma: &DMatrix<f64>) -> Result<()> {
    if !sigma.is_square() || sigma.nrows() == 0 {
        return Err(Error::ShapeMismatch("Σ must be a nonempty square matrix".into()));
    }
    if (sigma - sigma.transpose()).norm() > 1e-12 * (1.0 + sigma.norm()) {
        return Err(Error::InvalidArgument("Σ must be symmetric".into()));
    }
    if sigma.clone().cholesky().is_none() {
        return Err(Error::InvalidArgument("Σ must be positive definite".into()));
    }
    Ok(())
}

fn commutator_norm(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a * b - b * a).norm()
}

/// Orthonormal basis diagonalizing both `Σ` and a commuting symmetric `A`,
/// with the two diagonals.
fn joint_eigenbasis(sigma: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, Vec<f64>)> {
    // A generic combination separates eigenspaces that Σ alone leaves
    // degenerate.
    let mix = 0.577_215_664_901_532_9;
    let eig = SymmetricEigen::new(sigma + a * mix);
    let q = eig.eigenvectors;
    let s = q.transpose() * sigma * &q;
    let t = q.transpose() * a * &q;
    let tol = 1e-9 * (1.0 + sigma.norm() + a.norm());
    let n = sigma.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j && (s[(i, j)].abs() > tol || t[(i, j)].abs() > tol) {
                return Err(Error::InvalidArgument("A₀ does not commute with Σ".into()));
            }
        }
    }
    Ok((q, s.diagonal().iter().copied().collect(), t.diagonal().iter().copied().collect()))
}

fn from_diagonal(q: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    let m = q * DMatrix::from_diagonal(&DVector::from_column_slice(d)) * q.transpose();
    0.5 * (&m + m.transpose())
}

/// `Bₙ = Σ(AₙΣ + εα)⁻¹`, `Aₙ₊₁ = Σ(BₙΣ + εβ)⁻¹` from `A₀`, returning
/// `(Aₙ, Bₙ)` for `n = 0..=steps`.
pub fn gaussian_recursion(
    sigma: &DMatrix<f64>,
    alpha: f64,
    beta: f64,
    epsilon: f64,
    a0: &DMatrix<f64>,
    steps: usize,
) -> Result<Vec<MatrixPair>> {
    check_spd(sigma)?;
    positive("α", alpha)?;
    positive("β", beta)?;
    nonnegative("ε", epsilon)?;
    if a0.shape() != sigma.shape() {
        return Err(Error::ShapeMismatch("A₀ and Σ differ in shape".into()));
    }
    if commutator_norm(a0, sigma) > 1e-10 * (1.0 + a0.norm() * sigma.norm()) {
        return Err(Error::InvalidArgument("A₀ does not commute with Σ".into()));
    }
    let (q, s, mut a) = joint_eigenbasis(sigma, a0)?;
    let mut out = Vec::with_capacity(steps + 1);
    for n in 0..=steps {
        let b: Vec<f64> = s
            .iter()
            .zip(&a)
            .map(|(si, ai)| {
                let d = ai * si + epsilon * alpha;
                if d == 0.0 {
                    Err(Error::Singular)
                } else {
                    Ok(si / d)
                }
            })
            .collect::<Result<_>>()?;
        out.push(MatrixPair { a: from_diagonal(&q, &a), b: from_diagonal(&q, &b) });
        if n == steps {
            break;
        }
        a = s
            .iter()
            .zip(&b)
            .map(|(si, bi)| {
                let d = bi * si + epsilon * beta;
                if d == 0.0 {
                    Err(Error::Singular)
                } else {
                    Ok(si / d)
                }
            })
            .collect::<Result<_>>()?;
    }
    Ok(out)
}

/// `√(x²/4 + y) - x/2` written as `y/(x/2 + √(x²/4 + y))`.
fn positive_root(x: f64, y: f64) -> f64 {
    let r = (0.25 * x * x + y).sqrt();
    if x >= 0.0 {
        y / (0.5 * x + r)
    } else {
        r - 0.5 * x
    }
}

/// Closed-form limits `(A_∞, B_∞)` computed in the eigenbasis of `Σ`.
pub fn gaussian_limits(sigma: &DMatrix<f64>, alpha: f64, beta: f64, epsilon: f64) -> Result<MatrixPair> {
    check_spd(sigma)?;
    positive("α", alpha)?;
    positive("β", beta)?;
    nonnegative("ε", epsilon)?;
    let eig = SymmetricEigen::new(sigma.clone());
    let q = eig.eigenvectors;
    let s: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let a: Vec<f64> = s.iter().map(|si| positive_root(epsilon * alpha / si, alpha / beta)).collect();
    let b: Vec<f64> = s.iter().map(|si| positive_root(epsilon * beta / si, beta / alpha)).collect();
    Ok(MatrixPair { a: from_diagonal(&q, &a), b: from_diagonal(&q, &b) })
}

/// Operator norm of `B - [(B + εβΣ⁻¹)⁻¹ + εαΣ⁻¹]⁻¹`, with plain matrix
/// inverses.
pub fn binfty_residual(sigma: &DMatrix<f64>, alpha: f64, beta: f64, epsilon: f64, b: &DMatrix<f64>) -> Result<f64> {
    check_spd(sigma)?;
    let inv = |m: DMatrix<f64>| m.try_inverse().ok_or(Error::Singular);
    let si = inv(sigma.clone())?;
    let inner = inv(b + &si * (epsilon * beta))?;
    let rhs = inv(inner + &si * (epsilon * alpha))?;
    Ok(symmetric_norm(&(b - rhs)))
}

/// `-Σ - εα/2 + (ε²α²/4 + (α/β)Σ²)^{1/2}`: a Hessian lower bound on `φ⁰`
/// under which the `ψⁿ` Hessian bound holds for every `n`.
pub fn warm_start_lower_bound(sigma: &DMatrix<f64>, alpha: f64, beta: f64, epsilon: f64) -> Result<DMatrix<f64>> {
    check_spd(sigma)?;
    positive("α", alpha)?;
    positive("β", beta)?;
    nonnegative("ε", epsilon)?;
    let eig = SymmetricEigen::new(sigma.clone());
    let q = eig.eigenvectors;
    let d: Vec<f64> =
        eig.eigenvalues.iter().map(|si| positive_root(epsilon * alpha, alpha / beta * si * si) - si).collect();
    Ok(from_diagonal(&q, &d))
}

/// Bound on `sup_y ‖Cov(∇₂c(X,y))‖` for light-tailed ρ. With `alpha` given,
/// evaluates the bound at that `α`; without, the simplified bound for
/// `α = ε + δ_H`.
#[allow(clippy::too_many_arguments)]
pub fn lighttail_cov_bound(
    h_upper: f64,
    h_lower: f64,
    l: f64,
    r: f64,
    c: f64,
    delta: f64,
    epsilon: f64,
    alpha: Option<f64>,
) -> Result<f64> {
    let dh = hessian_gap(h_upper, h_lower)?;
    nonnegative("L", l)?;
    nonnegative("R", r)?;
    positive("C", c)?;
    positive("δ", delta)?;
    positive("ε", epsilon)?;
    let h2 = h_upper * h_upper;
    let p = 2.0 / delta;
    Ok(match alpha {
        Some(a) => {
            positive("α", a)?;
            let spread = (r * r).max(((a + dh) / (epsilon * c)).powf(p));
            2.0 * h2 * (epsilon / a + (l * epsilon / a + (a + dh) / a).powi(2) * spread)
        }
        None => {
            let spread = (r * r).max(c.powf(-p) * (1.0 + 2.0 * dh / epsilon).powf(p));
            2.0 * h2 * (1.0 + (l + 2.0).powi(2) * spread)
        }
    })
}

/// `((k(α-1)/C) + a_start^{-(α-1)})^{-1/(α-1)}`, the bound on `a_{N+k}`.
pub fn polynomial_bound(alpha_exp: f64, c: f64, a_start: f64, k: u64) -> Result<f64> {
    if !(alpha_exp > 1.0) || !alpha_exp.is_finite() {
        return Err(Error::InvalidArgument(format!("exponent must exceed 1, got {alpha_exp}")));
    }
    positive("C", c)?;
    positive("a_N", a_start)?;
    let e = alpha_exp - 1.0;
    Ok((k as f64 * e / c + a_start.powf(-e)).powf(-1.0 / e))
}

/// The polynomial KL bound for `γ ∈ (0,1)`, with `k = n - N + 1`:
/// `k^{-γ/(1-γ)}((1-γ)/(γM^{1/γ}) + 1/(k·KL₀^{(1-γ)/γ}))^{-γ/(1-γ)}`.
pub fn polynomial_rate_theorem(gamma: f64, m: f64, kl_start: f64, k: u64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("γ must lie in (0,1), got {gamma}")));
    }
    positive("M", m)?;
    positive("KL", kl_start)?;
    let e = (1.0 - gamma) / gamma;
    let slope = (1.0 - gamma) / (gamma * m.powf(1.0 / gamma));
    Ok((k as f64 * slope + kl_start.powf(-e)).powf(-1.0 / e))
}

/// Sequence with `a_{n-1} - a_n = a_{n-1}^α / C` (floored at 0).
pub fn sequence_previous_decrement(alpha_exp: f64, c: f64, a0: f64, steps: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut a = a0;
    out.push(a);
    for _ in 0..steps {
        a = (a - a.powf(alpha_exp) / c).max(0.0);
        out.push(a);
    }
    out
}

/// Sequence with `a_{n-1} - a_n = a_n^α / C`, each step solved by a
/// safeguarded Newton iteration on `a + a^α/C = a_{n-1}`.
pub fn sequence_current_decrement(alpha_exp: f64, c: f64, a0: f64, steps: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut prev = a0;
    out.push(prev);
    for _ in 0..steps {
        let g = |a: f64| a + a.powf(alpha_exp) / c - prev;
        let (mut lo, mut hi) = (0.0, prev);
        let mut a = prev;
        for _ in 0..200 {
            let v = g(a);
            if v > 0.0 {
                hi = a;
            } else {
                lo = a;
            }
            let dv = 1.0 + alpha_exp * a.powf(alpha_exp - 1.0) / c;
            let mut next = a - v / dv;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - a).abs() <= 1e-16 * a.max(1e-300) {
                a = next;
                break;
            }
            a = next;
        }
        prev = a;
        out.push(prev);
    }
    out
}
