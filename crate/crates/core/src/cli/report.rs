//! Machine-readable report, trajectory CSV and report comparison.

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use super::config::AnalysisConfig;
use crate::control::{ConstraintReport, GainSchedule, ShiftBound, Smallness, StepRecord};
use crate::equilibria::{EquilibriumPoint, EstimateCase, LinearEstimate, OscillationPattern};
use crate::stability::{Classification, GrowthCertificate, StabilityVerdict};
use crate::system::{OrderReport, RunStatus};

pub const SCHEMA: &str = "stabkit-report/1";

#[derive(Debug, Clone, Serialize)]
pub struct VariantEquilibria {
    pub variant: String,
    pub points: Vec<EquilibriumPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateRecord {
    pub case: EstimateCase,
    pub estimate: LinearEstimate,
    /// Target equilibrium nearest the estimate, from the scan.
    pub target_equilibrium: Option<f64>,
    pub error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SkippedCase {
    pub case: EstimateCase,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateSummary {
    pub records: Vec<EstimateRecord>,
    pub skipped: Vec<SkippedCase>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryChecks {
    pub starts: usize,
    pub steps: usize,
    /// Runs whose last state lies within `converge_tol` of the equilibrium.
    pub converged: usize,
    /// Runs staying under `beta^n` times their initial distance.
    pub within_envelope: usize,
    pub max_fitted_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SoleSide {
    pub verdict: StabilityVerdict,
    pub certificate: GrowthCertificate,
}

#[derive(Debug, Clone, Serialize)]
pub struct Certification {
    pub uncontrolled_variant: String,
    pub controlled_variant: Option<String>,
    pub dimension: usize,
    pub samples: usize,
    /// Present when there is no controlled side to pair with.
    pub uncontrolled_only: Option<SoleSide>,
    pub classification: Option<Classification>,
    pub trajectory_checks: Option<TrajectoryChecks>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ControlledRun {
    pub history: Vec<f64>,
    pub status: RunStatus,
    pub final_value: Option<f64>,
    pub constraints: ConstraintReport,
    pub chain_violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Synthesis {
    pub schedule: GainSchedule,
    pub target_residual: f64,
    pub runs: Vec<ControlledRun>,
    pub constraint_violations: usize,
    pub smallness: Option<Smallness>,
    pub shift_bound: Option<ShiftBound>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationRecord {
    pub label: String,
    pub history: Vec<f64>,
    pub steps: usize,
    pub status: RunStatus,
    pub final_value: Option<f64>,
    pub oscillation: Option<OscillationPattern>,
    pub replay_deviation: Option<f64>,
    pub csv: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerdictLine {
    pub side: String,
    pub variant: String,
    pub verdict: StabilityVerdict,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub command: String,
    pub config: AnalysisConfig,
    pub order_compatibility: OrderReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equilibria: Option<Vec<VariantEquilibria>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimates: Option<EstimateSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certification: Option<Certification>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<Synthesis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulations: Option<Vec<SimulationRecord>>,
    pub verdicts: Vec<VerdictLine>,
    pub exit_code: i32,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// CSV text for a plain run: `n,x_n` from the initial value on.
pub fn scalar_csv(x0: f64, values: &[f64]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["n", "x_n"]).unwrap();
    w.write_record(["0".to_string(), x0.to_string()]).unwrap();
    for (i, v) in values.iter().enumerate() {
        w.write_record([(i + 1).to_string(), v.to_string()]).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// CSV text for a closed loop with gain columns; the initial row has none.
pub fn closed_loop_csv(x0: f64, records: &[StepRecord]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["n", "x_n", "lambda", "lambda_tilde", "bound"])
        .unwrap();
    w.write_record([
        "0".to_string(),
        x0.to_string(),
        String::new(),
        String::new(),
        String::new(),
    ])
    .unwrap();
    for (i, r) in records.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            r.value.to_string(),
            r.lambda.to_string(),
            r.lambda_tilde.to_string(),
            r.bound.to_string(),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("schema mismatch: {0} vs {1}")]
    SchemaMismatch(String, String),
    #[error("not a report: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Discrepancy {
    pub path: String,
    pub left: Value,
    pub right: Value,
}

/// Fields of two reports that differ; numbers within `tol` count as equal.
pub fn diff_reports(a: &Value, b: &Value, tol: f64) -> Result<Vec<Discrepancy>, DiffError> {
    let schema = |v: &Value| v.get("schema").and_then(Value::as_str).unwrap_or("").to_string();
    let (sa, sb) = (schema(a), schema(b));
    if sa != sb || sa.is_empty() {
        return Err(DiffError::SchemaMismatch(sa, sb));
    }
    let mut out = Vec::new();
    walk("", a, b, tol, &mut out);
    Ok(out)
}

pub fn diff_report_text(a: &str, b: &str, tol: f64) -> Result<Vec<Discrepancy>, DiffError> {
    diff_reports(&serde_json::from_str(a)?, &serde_json::from_str(b)?, tol)
}

fn walk(path: &str, a: &Value, b: &Value, tol: f64, out: &mut Vec<Discrepancy>) {
    let mut push = || {
        out.push(Discrepancy {
            path: if path.is_empty() { "/".into() } else { path.into() },
            left: a.clone(),
            right: b.clone(),
        })
    };
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
            if !(x == y || (x - y).abs() <= tol) {
                push();
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            for (k, va) in x {
                let p = format!("{path}/{k}");
                match y.get(k) {
                    Some(vb) => walk(&p, va, vb, tol, out),
                    None => out.push(Discrepancy {
                        path: p,
                        left: va.clone(),
                        right: Value::Null,
                    }),
                }
            }
            for (k, vb) in y {
                if !x.contains_key(k) {
                    out.push(Discrepancy {
                        path: format!("{path}/{k}"),
                        left: Value::Null,
                        right: vb.clone(),
                    });
                }
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (va, vb)) in x.iter().zip(y).enumerate() {
                walk(&format!("{path}/{i}"), va, vb, tol, out);
            }
        }
        _ if a == b => {}
        _ => push(),
    }
}
