//! JSON experiment configuration. One file fixes a run, seeds included.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;
use sinkcheck::costs::{CostModel, Geometry};
use sinkcheck::measures::{build_grid_measure, fibonacci_sphere, DiscreteMeasure, LogDensityModel};
use sinkcheck::rate_theory::Setting;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckId {
    Monotonicity,
    Rate,
    Hessian,
    ConditionalKl,
    Stability,
    Identity,
    GaussianRecursion,
    SphereDerivatives,
    Polynomial,
}

impl CheckId {
    /// Checks that need a Sinkhorn run per (instance, ε) cell.
    pub fn per_cell(self) -> bool {
        !matches!(self, CheckId::GaussianRecursion | CheckId::SphereDerivatives | CheckId::Polynomial)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub epsilons: Vec<f64>,
    /// Sinkhorn iteration budget per cell.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    pub checks: Vec<CheckId>,
    #[serde(default)]
    pub instances: Vec<InstanceConfig>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub gaussian: GaussianConfig,
    #[serde(default)]
    pub polynomial: PolynomialConfig,
    #[serde(default)]
    pub sphere: SphereConfig,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_seed() -> u64 {
    2024
}

fn default_iterations() -> usize {
    500
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub stop_kl: f64,
    pub chain_slack: f64,
    pub identity: f64,
    pub marginal_tv: f64,
    pub hessian: f64,
    pub gradient: f64,
    pub conditional_kl: f64,
    pub stability: f64,
    pub rate_margin: f64,
    pub lambda_margin: f64,
    pub gaussian: f64,
    pub fixed_point: f64,
    pub polynomial: f64,
    pub sphere_gradient: f64,
    pub sphere_hessian: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            stop_kl: 1e-12,
            chain_slack: 1e-9,
            identity: 1e-8,
            marginal_tv: 1e-10,
            hessian: 1e-4,
            gradient: 1e-6,
            conditional_kl: 1e-8,
            stability: 1e-8,
            rate_margin: 0.05,
            lambda_margin: 1e-3,
            gaussian: 1e-8,
            fixed_point: 1e-12,
            polynomial: 1e-10,
            sphere_gradient: 1e-5,
            sphere_hessian: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Base points for the Λ̂ estimate.
    pub samples: usize,
    /// Pairs for the conditional-KL check.
    pub pairs: usize,
    /// Query points for the Hessian identity.
    pub hessian_points: usize,
    /// Query points for the gradient identity.
    pub gradient_points: usize,
    /// Overrides the run seed for probes only.
    pub seed: Option<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { samples: 120, pairs: 200, hessian_points: 20, gradient_points: 50, seed: None }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianConfig {
    /// Symmetric positive definite Σ, row by row.
    pub sigma: Vec<Vec<f64>>,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub steps: usize,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        GaussianConfig { sigma: vec![vec![1.0, 0.0], vec![0.0, 1.0]], alpha: 1.0, beta: 1.0, epsilon: 2.0, steps: 200 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolynomialConfig {
    pub alpha: f64,
    pub c: f64,
    pub a0: f64,
    pub steps: usize,
}

impl Default for PolynomialConfig {
    fn default() -> Self {
        PolynomialConfig { alpha: 2.0, c: 1.0, a0: 1.0, steps: 10_000 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SphereConfig {
    pub delta: f64,
    pub pairs: usize,
}

impl Default for SphereConfig {
    fn default() -> Self {
        SphereConfig { delta: 0.9, pairs: 100 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    pub name: String,
    pub rho: MarginalSpec,
    pub nu: MarginalSpec,
    pub cost: CostSpec,
    /// Catalog entry whose certificate the rate check compares against.
    #[serde(default)]
    pub rate: Option<RateSpec>,
    /// Target values of KL(μ|ν) for the stability perturbations.
    #[serde(default = "default_kl_targets")]
    pub stability_targets: Vec<f64>,
}

fn default_kl_targets() -> Vec<f64> {
    vec![1e-4, 1e-2, 1e-1]
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSpec {
    pub setting: String,
    /// τ of the transport inequality; defaults to the closed form for ν's model.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub enum MarginalSpec {
    /// `e^{-U}` on a regular grid.
    Grid { model: ModelSpec, bbox: Vec<(f64, f64)>, resolution: Vec<usize> },
    /// Explicit Euclidean atoms.
    Atoms { points: Vec<Vec<f64>>, weights: Vec<f64> },
    /// Uniform weights on a Fibonacci lattice of `S²`.
    Sphere { count: usize },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Gaussian { alpha: f64, mean: Vec<f64> },
    Quartic { alpha: f64, beta: f64, mean: Vec<f64> },
    DoubleWell { m: f64 },
    Uniform,
    HeavyRho { q: f64, delta: f64 },
    HeavyNu { p: f64 },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "kebab-case")]
pub enum CostSpec {
    Quadratic,
    Anisotropic { sigma: Vec<Vec<f64>> },
    SubspaceElastic { gamma: f64, a: Vec<Vec<f64>> },
    Stvs { gamma: f64 },
    Pcost { p: f64 },
    SphereRegular,
    SphereDelta { delta: f64 },
}

/// Configuration problems, reported before anything runs.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

pub fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(bad("matrix rows must be nonempty and of equal length"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl ModelSpec {
    pub fn build(&self) -> sinkcheck::Result<LogDensityModel> {
        match self {
            ModelSpec::Gaussian { alpha, mean } => LogDensityModel::gaussian(*alpha, mean.clone()),
            ModelSpec::Quartic { alpha, beta, mean } => LogDensityModel::quartic(*alpha, *beta, mean.clone()),
            ModelSpec::DoubleWell { m } => LogDensityModel::double_well(*m),
            ModelSpec::Uniform => Ok(LogDensityModel::uniform()),
            ModelSpec::HeavyRho { q, delta } => LogDensityModel::heavy_rho(*q, *delta),
            ModelSpec::HeavyNu { p } => LogDensityModel::heavy_nu(*p),
        }
    }
}

impl MarginalSpec {
    pub fn build(&self) -> Result<DiscreteMeasure, ConfigError> {
        let out = match self {
            MarginalSpec::Grid { model, bbox, resolution } => {
                build_grid_measure(&model.build().map_err(|e| bad(e.to_string()))?, bbox, resolution)
            }
            MarginalSpec::Atoms { points, weights } => {
                let d = points.first().map_or(0, Vec::len);
                DiscreteMeasure::new(Geometry::Euclidean(d), points.clone(), weights.clone())
            }
            MarginalSpec::Sphere { count } => DiscreteMeasure::uniform(Geometry::Sphere(2), fibonacci_sphere(*count)),
        };
        out.map_err(|e| bad(e.to_string()))
    }

    /// The model when the marginal is a discretized density.
    pub fn model(&self) -> Option<&ModelSpec> {
        match self {
            MarginalSpec::Grid { model, .. } => Some(model),
            _ => None,
        }
    }
}

impl CostSpec {
    pub fn build(&self) -> Result<CostModel, ConfigError> {
        let out = match self {
            CostSpec::Quadratic => Ok(CostModel::HalfSquaredEuclidean),
            CostSpec::Anisotropic { sigma } => CostModel::anisotropic(matrix(sigma)?),
            CostSpec::SubspaceElastic { gamma, a } => CostModel::subspace_elastic(*gamma, &matrix(a)?),
            CostSpec::Stvs { gamma } => CostModel::stvs(*gamma),
            CostSpec::Pcost { p } => CostModel::pcost(*p),
            CostSpec::SphereRegular => Ok(CostModel::SphereRegular),
            CostSpec::SphereDelta { delta } => CostModel::sphere_delta(*delta),
        };
        out.map_err(|e| bad(e.to_string()))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| bad(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn has(&self, check: CheckId) -> bool {
        self.checks.contains(&check)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.epsilons.is_empty() {
            return Err(bad("epsilons must be nonempty"));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(bad(format!("epsilon {e} is not positive")));
        }
        if self.checks.is_empty() {
            return Err(bad("no checks requested"));
        }
        if self.checks.iter().any(|c| c.per_cell()) && self.instances.is_empty() {
            return Err(bad("Sinkhorn checks need at least one instance"));
        }
        let mut names: Vec<&str> = self.instances.iter().map(|i| i.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad("instance names must be unique"));
        }
        for inst in &self.instances {
            if inst.name.is_empty() || !inst.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(bad(format!("instance name {:?} must be nonempty [A-Za-z0-9_-]", inst.name)));
            }
            let rho = inst.rho.build()?;
            let nu = inst.nu.build()?;
            let cost = inst.cost.build()?;
            cost.check_geometry(rho.geometry()).map_err(|e| bad(format!("{}: {e}", inst.name)))?;
            cost.check_geometry(nu.geometry()).map_err(|e| bad(format!("{}: {e}", inst.name)))?;
            if let Some(rate) = &inst.rate {
                Setting::from_params(&rate.setting, &rate.params).map_err(|e| bad(format!("{}: {e}", inst.name)))?;
            }
            if inst.stability_targets.iter().any(|t| t.is_nan() || *t <= 0.0) {
                return Err(bad(format!("{}: stability targets must be positive", inst.name)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_checks_and_empty_epsilons() {
        let base = r#"{"name":"x","epsilons":[1.0],"checks":["polynomial"]}"#;
        assert!(ExperimentConfig::parse(base).is_ok());
        assert!(ExperimentConfig::parse(&base.replace("polynomial", "nonsense")).is_err());
        assert!(ExperimentConfig::parse(&base.replace("[1.0]", "[]")).is_err());
        assert!(ExperimentConfig::parse(&base.replace("[1.0]", "[-1.0]")).is_err());
        assert!(ExperimentConfig::parse(&base.replace("polynomial", "rate")).is_err());
    }

    #[test]
    fn builds_instances() {
        let text = r#"{
            "name": "x", "epsilons": [0.5], "checks": ["monotonicity"],
            "instances": [{
                "name": "a",
                "rho": {"grid": {"model": {"kind": "gaussian", "alpha": 1.0, "mean": [0.0]}, "bbox": [[-2, 2]], "resolution": [5]}},
                "nu": {"atoms": {"points": [[0.0], [1.0]], "weights": [1, 3]}},
                "cost": {"kind": "quadratic"}
            }]
        }"#;
        let c = ExperimentConfig::parse(text).unwrap();
        let w = c.instances[0].nu.build().unwrap().weights().to_vec();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
        assert!(ExperimentConfig::parse(&text.replace("quadratic", "sphere-regular")).is_err());
    }
}
