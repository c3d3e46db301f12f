//! Run configuration: one TOML file fully determines a run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::ControlMode;
use crate::equilibria::{EstimateCase, EstimateOptions, FdSteps, ScanOptions};
use crate::expr::LaggedExpr;
use crate::stability::RegionSpec;
use crate::system::{Role, SystemBundle};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{field}: {message}")]
    Field { field: String, message: String },
}

fn field_err<T>(field: impl Into<String>, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Field {
        field: field.into(),
        message: message.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub expr: String,
    pub order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub f: ComponentSpec,
    pub f_tilde: Option<ComponentSpec>,
    pub g: Option<ComponentSpec>,
    pub g_tilde: Option<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub interval: [f64; 2],
    pub grid: usize,
    pub tol: f64,
    pub fd_rel: f64,
    pub fd_abs: f64,
    pub rank_tol: Option<f64>,
    pub base_tol: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let scan = ScanOptions::default();
        let fd = FdSteps::default();
        Self {
            interval: [scan.lo, scan.hi],
            grid: scan.grid,
            tol: scan.tol,
            fd_rel: fd.rel,
            fd_abs: fd.abs,
            rank_tol: None,
            base_tol: EstimateOptions::default().base_tol,
        }
    }
}

impl SolverSection {
    pub fn scan(&self) -> ScanOptions {
        ScanOptions {
            lo: self.interval[0],
            hi: self.interval[1],
            grid: self.grid,
            tol: self.tol,
        }
    }

    pub fn estimate(&self) -> EstimateOptions {
        EstimateOptions {
            fd: FdSteps {
                rel: self.fd_rel,
                abs: self.fd_abs,
            },
            rank_tol: self.rank_tol,
            base_tol: self.base_tol,
        }
    }
}

/// A scalar center is repeated across every coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Center {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSection {
    pub center: Option<Center>,
    pub radius: Option<f64>,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    pub r_excl: Option<f64>,
}

fn default_samples() -> usize {
    10_000
}

impl RegionSection {
    /// The region in `dim` coordinates.
    pub fn spec(&self, dim: usize) -> Result<RegionSpec, ConfigError> {
        let mut spec = match (&self.radius, &self.lo, &self.hi) {
            (Some(radius), None, None) => {
                let center = match &self.center {
                    None => vec![0.0; dim],
                    Some(Center::Scalar(c)) => vec![*c; dim],
                    Some(Center::Vector(v)) if v.len() == dim => v.clone(),
                    Some(Center::Vector(v)) => {
                        return field_err(
                            "region.center",
                            format!("has {} coordinates, the analysis needs {dim}", v.len()),
                        )
                    }
                };
                RegionSpec::ball(center, *radius, self.samples, self.seed)
            }
            (None, Some(lo), Some(hi)) => {
                if self.center.is_some() {
                    return field_err("region.center", "not used with lo/hi boxes");
                }
                for (name, v) in [("region.lo", lo), ("region.hi", hi)] {
                    if v.len() != dim {
                        return field_err(
                            name,
                            format!("has {} coordinates, the analysis needs {dim}", v.len()),
                        );
                    }
                }
                RegionSpec::boxed(lo.clone(), hi.clone(), self.samples, self.seed)
            }
            _ => return field_err("region", "give either radius or both lo and hi"),
        };
        if let Some(r) = self.r_excl {
            spec = spec.with_exclusion(r);
        }
        if let Err(e) = spec.validate() {
            return field_err("region", e.to_string());
        }
        Ok(spec)
    }

    /// First coordinate of the center, used as a default search hint.
    pub fn hint(&self) -> f64 {
        match (&self.center, &self.lo, &self.hi) {
            (Some(Center::Scalar(c)), _, _) => *c,
            (Some(Center::Vector(v)), _, _) => v.first().copied().unwrap_or(0.0),
            (None, Some(lo), Some(hi)) if !lo.is_empty() && !hi.is_empty() => 0.5 * (lo[0] + hi[0]),
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    pub mode: ControlMode,
    #[serde(default)]
    pub sigma: usize,
    #[serde(default)]
    pub sigma_tilde: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_denom_tol")]
    pub denom_tol: f64,
    /// Nominal-only offsets; `f~` at the relevant equilibrium when absent.
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// Hint for the uncontrolled perturbed equilibrium.
    pub x_0p: Option<f64>,
    /// Closed-loop equilibrium; found by refinement when absent.
    pub target: Option<f64>,
    #[serde(default = "default_rounds")]
    pub max_rounds: usize,
}

fn default_gamma() -> f64 {
    0.75
}

fn default_denom_tol() -> f64 {
    f64::MIN_POSITIVE
}

fn default_rounds() -> usize {
    20
}

impl ControlSection {
    pub fn max_delay(&self) -> usize {
        match self.mode {
            ControlMode::Combined => self.sigma.max(self.sigma_tilde),
            ControlMode::NominalOnly => self.sigma,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    /// All applicable cases when absent.
    pub cases: Option<Vec<EstimateCase>>,
    /// Restricts the base equilibria to the one nearest this value.
    pub base_hint: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Initial histories, most recent value first, each of length `m`.
    pub histories: Vec<Vec<f64>>,
    pub steps: usize,
    pub max_period: usize,
    pub window: usize,
    pub osc_tol: f64,
    /// Sampled starts used for closed-loop convergence checks.
    pub starts: usize,
    /// Distance to the target counted as converged at the last step.
    pub converge_tol: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            histories: Vec::new(),
            steps: 200,
            max_period: 8,
            window: 32,
            osc_tol: 1e-9,
            starts: 32,
            converge_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    pub report: String,
    pub trajectories: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: "stabkit-out".into(),
            report: "report.json".into(),
            trajectories: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub system: SystemSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub region: Option<RegionSection>,
    pub control: Option<ControlSection>,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl AnalysisConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Parses every expression with its declared order.
    pub fn bundle(&self) -> Result<SystemBundle, ConfigError> {
        let parse = |name: &str, spec: &ComponentSpec| {
            LaggedExpr::parse(&spec.expr, spec.order)
                .or_else(|e| field_err(format!("system.{name}.expr"), e.to_string()))
        };
        let mut bundle = SystemBundle::new(parse("f", &self.system.f)?);
        for (role, spec) in [
            (Role::FTilde, &self.system.f_tilde),
            (Role::G, &self.system.g),
            (Role::GTilde, &self.system.g_tilde),
        ] {
            if let Some(spec) = spec {
                bundle = bundle.with(role, parse(role.name(), spec)?);
            }
        }
        Ok(bundle)
    }

    /// Structural checks that need no numerics.
    pub fn validate(&self) -> Result<SystemBundle, ConfigError> {
        let bundle = self.bundle()?;
        let m = bundle.order();
        let s = &self.solver;
        if !(s.interval[0] < s.interval[1]) {
            return field_err("solver.interval", "needs lo < hi");
        }
        if s.grid < 2 {
            return field_err("solver.grid", "needs at least 2 points");
        }
        for (name, v) in [
            ("solver.tol", s.tol),
            ("solver.fd_rel", s.fd_rel),
            ("solver.fd_abs", s.fd_abs),
            ("solver.base_tol", s.base_tol),
        ] {
            if !(v > 0.0) {
                return field_err(name, "must be positive");
            }
        }
        if let Some(c) = &self.control {
            if bundle.component(Role::G).is_some() || bundle.component(Role::GTilde).is_some() {
                return field_err(
                    "control",
                    "controllers are synthesized; remove system.g and system.g_tilde",
                );
            }
            if !(0.0..=1.0).contains(&c.gamma) {
                return field_err("control.gamma", format!("must lie in [0, 1], got {}", c.gamma));
            }
            if !(c.denom_tol >= 0.0) {
                return field_err("control.denom_tol", "must be nonnegative");
            }
            if c.mode == ControlMode::NominalOnly
                && bundle.component_order(Role::FTilde) > bundle.component_order(Role::F)
            {
                return field_err(
                    "system.f_tilde.order",
                    "nominal-only control needs order(f_tilde) <= order(f)",
                );
            }
            if c.max_rounds == 0 {
                return field_err("control.max_rounds", "must be at least 1");
            }
        }
        if let Some(cases) = &self.estimate.cases {
            for case in cases {
                if let Err(e) = case.dimension(&bundle) {
                    return field_err("estimate.cases", e.to_string());
                }
            }
        }
        if let Some(r) = &self.region {
            r.spec(self.analysis_dim(&bundle))?;
        }
        for (i, h) in self.run.histories.iter().enumerate() {
            if h.len() != m {
                return field_err(
                    format!("run.histories[{i}]"),
                    format!("has {} values, the system order is {m}", h.len()),
                );
            }
        }
        if self.run.window < 2 * self.run.max_period {
            return field_err("run.window", "must be at least twice run.max_period");
        }
        Ok(bundle)
    }

    /// State dimension of the stability analysis: the system order, extended
    /// by the controller delays.
    pub fn analysis_dim(&self, bundle: &SystemBundle) -> usize {
        bundle.order() + self.control.as_ref().map_or(0, ControlSection::max_delay)
    }
}
