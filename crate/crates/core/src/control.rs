//! Gain-scheduled feedback controllers and the closed loops they induce.
//!
//! The controllers are scaled, delayed copies of the plant parts:
//! `g_n = lambda_n f(X_{n-1-sigma})` and `g~_n = lambda~_n f~(X_{n-1-sigma~})`.
//! Gains are recomputed from the current history at every step.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibria::{check_equilibrium, find_equilibria, nearest, EquilibriumError, ScanOptions};
use crate::expr::EvalError;
use crate::stability::{sample_region, RegionSpec, StabilityError};
use crate::system::{ComponentSet, Recursion, Role, RunStatus, SystemBundle, SystemError, VectorMap};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("order hypothesis violated: {0}")]
    OrderHypothesis(String),
    #[error("bundle already defines {0}; controllers are synthesized from f and f_tilde")]
    ControllerPresent(&'static str),
    #[error("gain fraction must lie in [0, 1], got {0}")]
    InvalidGamma(f64),
    #[error("denominator tolerance must be nonnegative, got {0}")]
    InvalidDenomTol(f64),
    #[error("{which} = {value} is not an equilibrium (residual {residual:e})")]
    NotAnEquilibrium {
        which: &'static str,
        value: f64,
        residual: f64,
    },
    #[error("closed loop has no equilibrium in the scan interval (round {round})")]
    NoClosedLoopEquilibrium { round: usize },
    #[error("closed-loop target did not settle after {rounds} rounds (last move {last_move:e})")]
    TargetNotConverged { rounds: usize, last_move: f64 },
    #[error("initial history has {got} entries, closed loop needs {expected}")]
    HistoryLength { expected: usize, got: usize },
    #[error("evaluation failed at step {step}: {source}")]
    Eval { step: usize, source: EvalError },
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Nominal plus incremental controller, both gains active.
    Combined,
    /// Nominal controller only; the incremental one is identically zero.
    NominalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainSchedule {
    pub mode: ControlMode,
    pub sigma: usize,
    pub sigma_tilde: usize,
    pub gamma: f64,
    pub denom_tol: f64,
    /// Uncontrolled perturbed equilibrium; the sign rules refer to it.
    pub sign_reference: f64,
    /// Closed-loop equilibrium the magnitude rule aims at.
    pub target: f64,
    /// Offset `a` of the nominal-only magnitude rule.
    pub a: f64,
    /// Offset `b` of the nominal-only smallness check.
    pub b: f64,
    /// Rounds of target refinement used, 0 when the target was given.
    pub target_rounds: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisOptions {
    pub sigma: usize,
    pub sigma_tilde: usize,
    pub gamma: f64,
    pub denom_tol: f64,
    /// Equilibrium scan used to locate closed-loop targets.
    pub scan: ScanOptions,
    /// Residual accepted when checking the given equilibria.
    pub eq_tol: f64,
    pub max_rounds: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            sigma: 0,
            sigma_tilde: 0,
            gamma: 0.75,
            // gains vanish only where the delayed terms do
            denom_tol: f64::MIN_POSITIVE,
            scan: ScanOptions::default(),
            eq_tol: 1e-9,
            max_rounds: 20,
        }
    }
}

/// Offsets of the nominal-only rule. `None` picks `f~` at the relevant
/// equilibrium: `a = f~(X_c)`, `b = f~(X_0p)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Offsets {
    pub a: Option<f64>,
    pub b: Option<f64>,
}

/// Gains and ingredients of one closed-loop step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub value: f64,
    pub f: f64,
    pub f_tilde: f64,
    pub f_delayed: f64,
    pub f_tilde_delayed: f64,
    pub lambda: f64,
    pub lambda_tilde: f64,
    /// Admissible gain magnitude before scaling by `gamma`; 0 on degenerate steps.
    pub bound: f64,
    /// The delayed terms were too small and both gains were zeroed.
    pub degenerate: bool,
}

impl StepRecord {
    /// `|h - target| - |f + f~ - sign_reference|`; nonpositive when the
    /// controller does not push the state further than the open loop.
    pub fn chain_gap(&self, schedule: &GainSchedule) -> f64 {
        (self.value - schedule.target).abs() - (self.f + self.f_tilde - schedule.sign_reference).abs()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Closed loop `x_n = f + f~ + lambda_n f_delayed + lambda~_n f~_delayed`.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    bundle: Arc<SystemBundle>,
    schedule: GainSchedule,
    plant_order: usize,
    with_perturbation: bool,
}

impl ClosedLoop {
    pub fn new(bundle: &SystemBundle, schedule: GainSchedule) -> Self {
        Self {
            plant_order: bundle.set_order(plant_set()),
            bundle: Arc::new(bundle.clone()),
            schedule,
            with_perturbation: true,
        }
    }

    pub fn schedule(&self) -> &GainSchedule {
        &self.schedule
    }

    pub fn bundle(&self) -> &SystemBundle {
        &self.bundle
    }

    /// Longest delay in use.
    pub fn max_delay(&self) -> usize {
        match self.schedule.mode {
            ControlMode::Combined => self.schedule.sigma.max(self.schedule.sigma_tilde),
            ControlMode::NominalOnly => self.schedule.sigma,
        }
    }

    /// The loop without `f~`: `f + lambda f_delayed + a` in nominal-only mode,
    /// `f + lambda f_delayed + lambda~ f~_delayed` otherwise.
    pub fn nominal_part(&self) -> Self {
        Self {
            with_perturbation: false,
            ..self.clone()
        }
    }

    pub fn vector_map(&self) -> Result<VectorMap, SystemError> {
        VectorMap::from_recursion(Arc::new(self.clone()), self.order())
    }

    /// One step from `history` (most recent first, at least `order` long).
    pub fn step(&self, history: &[f64]) -> Result<StepRecord, EvalError> {
        let need = self.order();
        if history.len() < need {
            return Err(EvalError::HistoryLength {
                expected: need,
                got: history.len(),
            });
        }
        let s = &self.schedule;
        let f = self.bundle.f();
        let ft = self.bundle.component(Role::FTilde);
        let fv = f.eval(history)?;
        let ftv = ft.map_or(Ok(0.0), |c| c.eval(history))?;
        let base = if self.with_perturbation {
            self.bundle.sum(plant_set(), history)?
        } else {
            fv
        };
        let mut rec = StepRecord {
            value: base,
            f: fv,
            f_tilde: ftv,
            f_delayed: f.eval(&history[s.sigma..])?,
            f_tilde_delayed: 0.0,
            lambda: 0.0,
            lambda_tilde: 0.0,
            bound: 0.0,
            degenerate: false,
        };
        match s.mode {
            ControlMode::Combined => {
                let ftd = ft.map_or(Ok(0.0), |c| c.eval(&history[s.sigma_tilde..]))?;
                rec.f_tilde_delayed = ftd;
                let den = rec.f_delayed.hypot(ftd);
                if den < s.denom_tol || den == 0.0 {
                    rec.degenerate = true;
                } else {
                    rec.bound = (fv + ftv - s.target).abs() / den;
                    let pair = s.gamma * rec.bound;
                    rec.lambda = -sign(fv - s.sign_reference)
                        * sign(rec.f_delayed)
                        * pair
                        * (rec.f_delayed.abs() / den);
                    rec.lambda_tilde = -sign(ftv - s.sign_reference) * sign(ftd) * pair * (ftd.abs() / den);
                }
            }
            ControlMode::NominalOnly => {
                let fd = rec.f_delayed;
                if fd.abs() < s.denom_tol || fd == 0.0 {
                    rec.degenerate = true;
                } else {
                    rec.bound = (fv - s.target + s.a).abs() / fd.abs();
                    rec.lambda = -sign(fv - s.sign_reference) * sign(fd) * s.gamma * rec.bound;
                }
                if !self.with_perturbation && s.a != 0.0 {
                    rec.value += s.a;
                }
            }
        }
        // Zero gains leave the open-loop sum untouched, bit for bit.
        if rec.lambda != 0.0 {
            rec.value += rec.lambda * rec.f_delayed;
        }
        if rec.lambda_tilde != 0.0 {
            rec.value += rec.lambda_tilde * rec.f_tilde_delayed;
        }
        if !rec.value.is_finite() {
            return Err(EvalError::Domain {
                kind: crate::expr::DomainKind::NonFinite,
                node: "closed loop".into(),
                operands: vec![base],
            });
        }
        Ok(rec)
    }

    /// Runs `steps` steps from `history` (most recent first), recording gains.
    pub fn simulate(&self, history: &[f64], steps: usize) -> Result<ClosedLoopRun, ControlError> {
        let need = self.order();
        if history.len() != need {
            return Err(ControlError::HistoryLength {
                expected: need,
                got: history.len(),
            });
        }
        let mut buf = history.to_vec();
        let mut records = Vec::with_capacity(steps);
        let mut status = RunStatus::Completed;
        for n in 1..=steps {
            match self.step(&buf) {
                Ok(rec) => {
                    buf.pop();
                    buf.insert(0, rec.value);
                    records.push(rec);
                }
                Err(e) if e.is_non_finite() => {
                    status = RunStatus::DivergedNonfinite { step: n };
                    break;
                }
                Err(source) => return Err(ControlError::Eval { step: n, source }),
            }
        }
        Ok(ClosedLoopRun { records, status })
    }
}

fn plant_set() -> ComponentSet {
    ComponentSet::of(&[Role::F, Role::FTilde])
}

impl Recursion for ClosedLoop {
    fn order(&self) -> usize {
        self.plant_order + self.max_delay()
    }

    fn next_value(&self, _step: usize, history: &[f64]) -> Result<f64, EvalError> {
        self.step(history).map(|r| r.value)
    }

    fn label(&self) -> String {
        match (self.schedule.mode, self.with_perturbation) {
            (ControlMode::Combined, true) => "closed_loop_combined".into(),
            (ControlMode::NominalOnly, true) => "closed_loop_nominal_only".into(),
            (_, false) => "closed_loop_nominal_part".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedLoopRun {
    pub records: Vec<StepRecord>,
    pub status: RunStatus,
}

impl ClosedLoopRun {
    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConstraintReport {
    pub steps: usize,
    pub sign_violations: usize,
    pub magnitude_violations: usize,
    pub first_violation: Option<usize>,
}

impl ConstraintReport {
    pub fn violations(&self) -> usize {
        self.sign_violations + self.magnitude_violations
    }
}

/// Replays the synthesis rule on recorded steps. Signs must agree exactly
/// (a zero required sign matched by a zero gain); the gain magnitude must
/// equal `gamma * bound` within `1e-12` relative, or stay below it when a
/// sign rule forced one gain of the pair to zero.
pub fn check_constraints(schedule: &GainSchedule, records: &[StepRecord]) -> ConstraintReport {
    let mut report = ConstraintReport {
        steps: records.len(),
        sign_violations: 0,
        magnitude_violations: 0,
        first_violation: None,
    };
    let r0 = schedule.sign_reference;
    for (i, r) in records.iter().enumerate() {
        let (sign_ok, magnitude_ok) = if r.degenerate {
            (true, r.lambda == 0.0 && r.lambda_tilde == 0.0)
        } else {
            let want = -sign(r.f - r0) * sign(r.f_delayed);
            let want_tilde = match schedule.mode {
                ControlMode::Combined => -sign(r.f_tilde - r0) * sign(r.f_tilde_delayed),
                ControlMode::NominalOnly => 0.0,
            };
            let sign_ok = sign(r.lambda) == want && sign(r.lambda_tilde) == want_tilde;
            let norm = r.lambda.hypot(r.lambda_tilde);
            let cap = schedule.gamma * r.bound;
            let slack = 1e-12 * cap.max(1.0);
            // a zero sign requirement on a gain that the split would have
            // made nonzero leaves the pair below the cap
            let forced = (r.f == r0 && r.f_delayed != 0.0)
                || (schedule.mode == ControlMode::Combined && r.f_tilde == r0 && r.f_tilde_delayed != 0.0);
            let magnitude_ok = if forced {
                norm <= cap + slack
            } else {
                (norm - cap).abs() <= slack
            };
            (sign_ok, magnitude_ok)
        };
        if !sign_ok {
            report.sign_violations += 1;
        }
        if !magnitude_ok {
            report.magnitude_violations += 1;
        }
        if (!sign_ok || !magnitude_ok) && report.first_violation.is_none() {
            report.first_violation = Some(i + 1);
        }
    }
    report
}

fn validate(bundle: &SystemBundle, opts: &SynthesisOptions, mode: ControlMode) -> Result<(), ControlError> {
    if bundle.component(Role::G).is_some() {
        return Err(ControlError::ControllerPresent("g"));
    }
    if bundle.component(Role::GTilde).is_some() {
        return Err(ControlError::ControllerPresent("g_tilde"));
    }
    if !(0.0..=1.0).contains(&opts.gamma) {
        return Err(ControlError::InvalidGamma(opts.gamma));
    }
    if !(opts.denom_tol >= 0.0) {
        return Err(ControlError::InvalidDenomTol(opts.denom_tol));
    }
    if mode == ControlMode::NominalOnly {
        let m0 = bundle.component_order(Role::F);
        let mt = bundle.component_order(Role::FTilde);
        if mt > m0 {
            return Err(ControlError::OrderHypothesis(format!(
                "nominal-only control needs order(f_tilde) <= order(f), got {mt} > {m0}"
            )));
        }
    }
    Ok(())
}

fn require_equilibrium(
    rec: &dyn Recursion,
    which: &'static str,
    value: f64,
    tol: f64,
) -> Result<(), ControlError> {
    let (ok, residual) =
        check_equilibrium(rec, value, tol).map_err(|source| ControlError::Eval { step: 0, source })?;
    if ok {
        Ok(())
    } else {
        Err(ControlError::NotAnEquilibrium {
            which,
            value,
            residual,
        })
    }
}

fn perturbation_at(bundle: &SystemBundle, x: f64) -> Result<f64, ControlError> {
    match bundle.component(Role::FTilde) {
        None => Ok(0.0),
        Some(c) => c
            .eval(&vec![x; c.order()])
            .map_err(|source| ControlError::Eval { step: 0, source }),
    }
}

/// Refines the closed-loop target by re-solving for the closed loop's own
/// equilibrium until it stops moving. `refresh` updates schedule fields that
/// depend on the target.
fn settle_target(
    bundle: &SystemBundle,
    mut schedule: GainSchedule,
    opts: &SynthesisOptions,
    refresh: impl Fn(&mut GainSchedule) -> Result<(), ControlError>,
) -> Result<GainSchedule, ControlError> {
    let tol = opts.scan.tol.max(1e-12) * 10.0;
    let mut last_move = f64::INFINITY;
    for round in 1..=opts.max_rounds {
        refresh(&mut schedule)?;
        let cl = ClosedLoop::new(bundle, schedule.clone());
        let points = find_equilibria(&cl, &opts.scan)?;
        let next = nearest(&points, schedule.target)
            .ok_or(ControlError::NoClosedLoopEquilibrium { round })?
            .value;
        last_move = (next - schedule.target).abs();
        schedule.target = next;
        schedule.target_rounds = round;
        if last_move <= tol {
            refresh(&mut schedule)?;
            return Ok(schedule);
        }
    }
    Err(ControlError::TargetNotConverged {
        rounds: opts.max_rounds,
        last_move,
    })
}

/// Combined nominal and incremental controller. When `target` is `None` the
/// closed-loop equilibrium is found by fixed-point refinement starting from
/// `sign_reference`.
pub fn synthesize_combined(
    bundle: &SystemBundle,
    sign_reference: f64,
    target: Option<f64>,
    opts: &SynthesisOptions,
) -> Result<GainSchedule, ControlError> {
    validate(bundle, opts, ControlMode::Combined)?;
    let open = bundle.view_components(plant_set(), "perturbed");
    require_equilibrium(&open, "x_0p", sign_reference, opts.eq_tol)?;
    let schedule = GainSchedule {
        mode: ControlMode::Combined,
        sigma: opts.sigma,
        sigma_tilde: opts.sigma_tilde,
        gamma: opts.gamma,
        denom_tol: opts.denom_tol,
        sign_reference,
        target: target.unwrap_or(sign_reference),
        a: 0.0,
        b: 0.0,
        target_rounds: 0,
    };
    match target {
        Some(t) => {
            require_equilibrium(&ClosedLoop::new(bundle, schedule.clone()), "x_cp", t, opts.eq_tol)?;
            Ok(schedule)
        }
        None => settle_target(bundle, schedule, opts, |_| Ok(())),
    }
}

/// Nominal controller alone, the incremental one held at zero.
pub fn synthesize_nominal_only(
    bundle: &SystemBundle,
    sign_reference: f64,
    target: Option<f64>,
    offsets: Offsets,
    opts: &SynthesisOptions,
) -> Result<GainSchedule, ControlError> {
    validate(bundle, opts, ControlMode::NominalOnly)?;
    let open = bundle.view_components(plant_set(), "perturbed");
    require_equilibrium(&open, "x_0p", sign_reference, opts.eq_tol)?;
    let b = match offsets.b {
        Some(b) => b,
        None => perturbation_at(bundle, sign_reference)?,
    };
    let t0 = target.unwrap_or(sign_reference);
    let a0 = match offsets.a {
        Some(a) => a,
        None => perturbation_at(bundle, t0)?,
    };
    let schedule = GainSchedule {
        mode: ControlMode::NominalOnly,
        sigma: opts.sigma,
        sigma_tilde: 0,
        gamma: opts.gamma,
        denom_tol: opts.denom_tol,
        sign_reference,
        target: t0,
        a: a0,
        b,
        target_rounds: 0,
    };
    match target {
        Some(t) => {
            require_equilibrium(&ClosedLoop::new(bundle, schedule.clone()), "x_c", t, opts.eq_tol)?;
            Ok(schedule)
        }
        None => settle_target(bundle, schedule, opts, |s| {
            if offsets.a.is_none() {
                s.a = perturbation_at(bundle, s.target)?;
            }
            Ok(())
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Smallness {
    /// Least `beta~` with `|f~(X) - a| <= beta beta~ ||X - X_c||` on the samples.
    pub beta_tilde: f64,
    /// Least `alpha~` with `|f~(X) - b| <= alpha alpha~ ||X - X_0p||`.
    pub alpha_tilde: f64,
    /// `1/beta - 1`.
    pub beta_tilde_limit: f64,
    pub admissible: bool,
    pub samples: usize,
}

fn least_factor(
    bundle: &SystemBundle,
    center: f64,
    offset: f64,
    scale: f64,
    region: &RegionSpec,
) -> Result<(f64, usize), ControlError> {
    let m = region.dim();
    let reference = vec![center; m];
    let samples = sample_region(&region.clone().with_reference(reference.clone()))?;
    let mut sup = 0.0_f64;
    let mut used = 0;
    for x in &samples {
        let ft = match bundle.component(Role::FTilde) {
            None => 0.0,
            Some(c) => match c.eval(x) {
                Ok(v) => v,
                Err(_) => continue,
            },
        };
        let d = x
            .iter()
            .zip(&reference)
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
        used += 1;
        sup = sup.max((ft - offset).abs() / d);
    }
    let factor = if sup == 0.0 { 0.0 } else { sup / scale };
    Ok((factor, used))
}

/// Smallest perturbation factors compatible with the sampled certificates
/// (`beta` of the controlled nominal part about `x_c`, `alpha` of the
/// perturbed open loop about `x_0p`) and whether they are admissible.
#[allow(clippy::too_many_arguments)]
pub fn verify_smallness(
    bundle: &SystemBundle,
    x_c: f64,
    x_0p: f64,
    region: &RegionSpec,
    a: f64,
    b: f64,
    beta: f64,
    alpha: f64,
) -> Result<Smallness, ControlError> {
    let (beta_tilde, n1) = least_factor(bundle, x_c, a, beta, region)?;
    let (alpha_tilde, n2) = least_factor(bundle, x_0p, b, alpha, region)?;
    let beta_tilde_limit = 1.0 / beta - 1.0;
    Ok(Smallness {
        beta_tilde,
        alpha_tilde,
        beta_tilde_limit,
        admissible: alpha_tilde <= 1.0 && beta_tilde < beta_tilde_limit,
        samples: n1.min(n2),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftBound {
    pub shift: f64,
    /// `(alpha - beta) / beta` times the smallest sampled distance beyond
    /// the exclusion radius.
    pub threshold: f64,
    pub holds: bool,
    pub margin: f64,
    /// Same test with the infimum over the whole closed region, which is 0
    /// whenever `x_0p` lies in it.
    pub threshold_untruncated: f64,
    pub holds_untruncated: bool,
    pub note: Option<String>,
}

/// Shift test from a known minimal distance.
pub fn shift_bound_from_distance(
    shift: f64,
    alpha: f64,
    beta: f64,
    min_distance: f64,
    untruncated: f64,
) -> ShiftBound {
    if !(alpha > beta && beta > 0.0) {
        return ShiftBound {
            shift,
            threshold: 0.0,
            holds: false,
            margin: f64::NEG_INFINITY,
            threshold_untruncated: 0.0,
            holds_untruncated: false,
            note: Some(format!(
                "needs alpha > beta > 0, got alpha = {alpha}, beta = {beta}"
            )),
        };
    }
    let factor = (alpha - beta) / beta;
    let threshold = factor * min_distance;
    let threshold_untruncated = factor * untruncated;
    ShiftBound {
        shift,
        threshold,
        holds: shift.abs() <= threshold,
        margin: threshold - shift.abs(),
        threshold_untruncated,
        holds_untruncated: shift.abs() <= threshold_untruncated,
        note: None,
    }
}

/// Checks `|x_cp - x_0p| <= (alpha - beta)/beta * inf ||X - X_0p||` with the
/// infimum over samples outside the exclusion radius.
pub fn verify_shift_bound(
    shift: f64,
    alpha: f64,
    beta: f64,
    region: &RegionSpec,
    x_0p: f64,
) -> Result<ShiftBound, ControlError> {
    let reference = vec![x_0p; region.dim()];
    let samples = sample_region(&region.clone().with_reference(reference.clone()))?;
    let dist = |x: &[f64]| {
        x.iter()
            .zip(&reference)
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()))
    };
    let min_distance = samples
        .iter()
        .map(|x| dist(x))
        .filter(|d| *d >= region.exclusion)
        .fold(f64::INFINITY, f64::min);
    // distance from the reference to the closed region itself
    let untruncated = match &region.shape {
        crate::stability::Shape::Ball { radius } => (dist(&region.center) - radius).max(0.0),
        crate::stability::Shape::Box { lo, hi } => reference
            .iter()
            .zip(lo.iter().zip(hi))
            .fold(0.0_f64, |acc, (r, (l, h))| acc.max((l - r).max(r - h).max(0.0))),
    };
    Ok(shift_bound_from_distance(
        shift,
        alpha,
        beta,
        min_distance,
        untruncated,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::LaggedExpr;
    use crate::stability::{growth_certificate, sample_region};
    use crate::system::{scalar_run, Variant};
    use proptest::prelude::*;

    fn plant(f: &str, ft: Option<&str>) -> SystemBundle {
        let b = SystemBundle::new(LaggedExpr::parse(f, 1).unwrap());
        match ft {
            Some(t) => b.with(Role::FTilde, LaggedExpr::parse(t, 1).unwrap()),
            None => b,
        }
    }

    fn opts(gamma: f64) -> SynthesisOptions {
        SynthesisOptions {
            gamma,
            ..SynthesisOptions::default()
        }
    }

    #[test]
    fn combined_linear_example() {
        let b = plant("2*x[1]", None);
        let s = synthesize_combined(&b, 0.0, None, &opts(0.75)).unwrap();
        assert_eq!(s.target, 0.0);
        let cl = ClosedLoop::new(&b, s.clone());
        for x in [-0.9, -0.1, 0.3, 0.8] {
            let r = cl.step(&[x]).unwrap();
            assert_eq!(r.lambda, -0.75);
            assert_eq!(r.lambda_tilde, 0.0);
            assert!((r.value - 0.5 * x).abs() < 1e-15);
        }
        let run = cl.simulate(&[0.8], 30).unwrap();
        for (n, v) in run.values().iter().enumerate() {
            assert!((v - 0.8 * 0.5f64.powi(n as i32 + 1)).abs() < 1e-15);
        }
        assert_eq!(check_constraints(&s, &run.records).violations(), 0);
    }

    #[test]
    fn full_cancellation() {
        let b = plant("2*x[1]", None);
        let s = synthesize_combined(&b, 0.0, Some(0.0), &opts(1.0)).unwrap();
        let run = ClosedLoop::new(&b, s).simulate(&[0.7], 3).unwrap();
        assert_eq!(run.values(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_step_zeroes_gains() {
        let b = plant("2*x[1]", Some("x[1]^2"));
        let s = synthesize_combined(&b, 0.0, Some(0.0), &opts(0.75)).unwrap();
        let r = ClosedLoop::new(&b, s).step(&[0.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!((r.lambda, r.lambda_tilde), (0.0, 0.0));
    }

    #[test]
    fn combined_worked_example() {
        let b = plant("2*x[1]", Some("0.05*x[1]^2"));
        let s = synthesize_combined(&b, 0.0, None, &opts(0.75)).unwrap();
        assert!(s.target.abs() < 1e-12);
        let cl = ClosedLoop::new(&b, s.clone());
        let region = RegionSpec::ball(vec![0.0], 0.5, 500, 3);
        for x0 in sample_region(&region).unwrap() {
            let run = cl.simulate(&x0, 200).unwrap();
            assert_eq!(check_constraints(&s, &run.records).violations(), 0);
            assert!(run.values()[199].abs() < 1e-8);
            for r in &run.records {
                assert!(r.chain_gap(&s) <= 1e-12);
            }
        }
    }

    #[test]
    fn nominal_only_example() {
        let b = plant("2*x[1]", Some("0.05*x[1]^2"));
        let s = synthesize_nominal_only(
            &b,
            0.0,
            Some(0.0),
            Offsets {
                a: Some(0.0),
                b: Some(0.0),
            },
            &opts(0.75),
        )
        .unwrap();
        let cl = ClosedLoop::new(&b, s.clone());
        for x in [-0.5, -0.2, 0.1, 0.5] {
            let r = cl.step(&[x]).unwrap();
            assert_eq!(r.lambda, -0.75);
            assert!((r.value - (0.5 * x + 0.05 * x * x)).abs() < 1e-15);
        }
        let nominal = cl.nominal_part();
        assert!((nominal.step(&[0.4]).unwrap().value - 0.2).abs() < 1e-15);
    }

    #[test]
    fn nominal_only_default_offsets() {
        let b = plant("2*x[1]", Some("0.05*x[1]^2 + 0.01"));
        let s = synthesize_nominal_only(&b, root_of(&b), None, Offsets::default(), &opts(0.75)).unwrap();
        let ft = |x: f64| 0.05 * x * x + 0.01;
        assert!((s.a - ft(s.target)).abs() < 1e-15);
        assert!((s.b - ft(s.sign_reference)).abs() < 1e-15);
        let cl = ClosedLoop::new(&b, s.clone());
        assert!(check_equilibrium(&cl, s.target, 1e-9).unwrap().0);
    }

    fn root_of(b: &SystemBundle) -> f64 {
        let pts = find_equilibria(&b.view(Variant::Perturbed), &ScanOptions::default()).unwrap();
        nearest(&pts, 0.0).unwrap().value
    }

    #[test]
    fn zero_gain_is_open_loop() {
        let b = plant("2*x[1] - 0.3*x[1]^3", Some("0.05*x[1]^2"));
        for mode in [ControlMode::Combined, ControlMode::NominalOnly] {
            let s = match mode {
                ControlMode::Combined => synthesize_combined(&b, 0.0, Some(0.0), &opts(0.0)).unwrap(),
                ControlMode::NominalOnly => {
                    synthesize_nominal_only(&b, 0.0, Some(0.0), Offsets::default(), &opts(0.0)).unwrap()
                }
            };
            let closed = ClosedLoop::new(&b, s).simulate(&[0.37], 100).unwrap().values();
            let open = scalar_run(&b, Variant::Perturbed, &[0.37], 100).unwrap().values;
            assert!(closed.iter().zip(&open).all(|(a, c)| a.to_bits() == c.to_bits()));
        }
    }

    #[test]
    fn delays_extend_history() {
        let b = plant("2*x[1]", None);
        let s = synthesize_combined(
            &b,
            0.0,
            Some(0.0),
            &SynthesisOptions {
                sigma: 2,
                ..opts(0.5)
            },
        )
        .unwrap();
        let cl = ClosedLoop::new(&b, s);
        assert_eq!(cl.order(), 3);
        let r = cl.step(&[1.0, 5.0, -2.0]).unwrap();
        assert_eq!(r.f_delayed, -4.0);
        // sign(lambda) = -sign(2 * -4) = +1, |lambda| = 0.5 * 2 / 4
        assert_eq!(r.lambda, 0.25);
        assert_eq!(r.value, 2.0 - 1.0);
        assert!(matches!(
            cl.simulate(&[1.0], 5),
            Err(ControlError::HistoryLength { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn hypothesis_checks() {
        let with_g = plant("2*x[1]", None).with(Role::G, LaggedExpr::parse("x[1]", 1).unwrap());
        assert!(matches!(
            synthesize_combined(&with_g, 0.0, None, &opts(0.5)),
            Err(ControlError::ControllerPresent("g"))
        ));
        let long_pert = SystemBundle::new(LaggedExpr::parse("2*x[1]", 1).unwrap())
            .with(Role::FTilde, LaggedExpr::parse("0.01*x[2]", 2).unwrap());
        assert!(matches!(
            synthesize_nominal_only(&long_pert, 0.0, None, Offsets::default(), &opts(0.5)),
            Err(ControlError::OrderHypothesis(_))
        ));
        assert!(matches!(
            synthesize_combined(&plant("2*x[1]", None), 0.0, None, &opts(1.5)),
            Err(ControlError::InvalidGamma(_))
        ));
        assert!(matches!(
            synthesize_combined(&plant("2*x[1] + 1", None), 0.0, None, &opts(0.5)),
            Err(ControlError::NotAnEquilibrium { which: "x_0p", .. })
        ));
    }

    #[test]
    fn smallness() {
        let region = RegionSpec::ball(vec![0.0], 1.0, 500, 4);
        let none = verify_smallness(&plant("2*x[1]", None), 0.0, 0.0, &region, 0.0, 0.0, 0.5, 2.0).unwrap();
        assert_eq!((none.beta_tilde, none.alpha_tilde), (0.0, 0.0));
        assert!(none.admissible);

        let small = verify_smallness(
            &plant("2*x[1]", Some("0.05*x[1]^2")),
            0.0,
            0.0,
            &region,
            0.0,
            0.0,
            0.5,
            2.0,
        )
        .unwrap();
        assert!((small.beta_tilde * 0.5 - 0.05).abs() < 1e-15);
        assert!(small.admissible);

        let big = verify_smallness(
            &plant("2*x[1]", Some("10*x[1]^2")),
            0.0,
            0.0,
            &region,
            0.0,
            0.0,
            0.9,
            2.0,
        )
        .unwrap();
        assert!(big.beta_tilde >= 10.0 / 0.9 - 1e-12);
        assert!(!big.admissible);
    }

    #[test]
    fn shift_bound() {
        let zero = shift_bound_from_distance(0.0, 2.0, 0.5, 0.1, 0.0);
        assert!(zero.holds && zero.holds_untruncated);
        let near = shift_bound_from_distance(0.2, 2.0, 0.5, 0.1, 0.0);
        assert!((near.threshold - 0.3).abs() < 1e-15);
        assert!(near.holds && !near.holds_untruncated);
        assert!(!shift_bound_from_distance(0.4, 2.0, 0.5, 0.1, 0.0).holds);
        let bad = shift_bound_from_distance(0.0, 0.5, 0.5, 0.1, 0.0);
        assert!(!bad.holds && bad.note.is_some());

        let region = RegionSpec::ball(vec![0.0], 1.0, 100, 1).with_exclusion(0.1);
        let sb = verify_shift_bound(0.0, 2.0, 0.5, &region, 0.0).unwrap();
        assert!(sb.holds && sb.threshold >= 0.3);
        let outside = verify_shift_bound(0.0, 2.0, 0.5, &region, 3.0).unwrap();
        assert!((outside.threshold_untruncated - 3.0 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn closed_loop_contracts_in_certificate() {
        let b = plant("2*x[1]", Some("0.05*x[1]^2"));
        let s = synthesize_combined(&b, 0.0, None, &opts(0.75)).unwrap();
        let cl = ClosedLoop::new(&b, s);
        let region = RegionSpec::ball(vec![0.0], 0.5, 2000, 5);
        let cert = growth_certificate(&cl, &[0.0], &sample_region(&region).unwrap(), None).unwrap();
        assert!(cert.beta < 0.6 && cert.alpha > 0.4);
    }

    proptest! {
        #[test]
        fn constraints_hold_on_random_plants(
            a in 1.2f64..3.0,
            c in -0.2f64..0.2,
            gamma in 0.05f64..1.0,
            sigma in 0usize..3,
            sigma_tilde in 0usize..3,
            x0 in proptest::collection::vec(-0.5f64..0.5, 3),
        ) {
            let b = plant(&format!("{a}*x[1]"), Some(&format!("{c}*x[1]^2")));
            let o = SynthesisOptions { sigma, sigma_tilde, ..opts(gamma) };
            let s = synthesize_combined(&b, 0.0, Some(0.0), &o).unwrap();
            let cl = ClosedLoop::new(&b, s.clone());
            let run = cl.simulate(&x0[..cl.order()], 40).unwrap();
            prop_assert_eq!(check_constraints(&s, &run.records).violations(), 0);

            let s = synthesize_nominal_only(&b, 0.0, Some(0.0), Offsets { a: Some(0.0), b: Some(0.0) }, &SynthesisOptions { sigma, ..opts(gamma) }).unwrap();
            let cl = ClosedLoop::new(&b, s.clone());
            let run = cl.simulate(&x0[..cl.order()], 40).unwrap();
            prop_assert_eq!(check_constraints(&s, &run.records).violations(), 0);
        }

        #[test]
        fn chain_inequality(x in -0.5f64..0.5, gamma in 0.0f64..1.0) {
            let b = plant("2*x[1]", Some("0.05*x[1]^2"));
            let s = synthesize_combined(&b, 0.0, Some(0.0), &opts(gamma)).unwrap();
            let r = ClosedLoop::new(&b, s.clone()).step(&[x]).unwrap();
            prop_assert!(r.chain_gap(&s) <= 1e-12);
        }
    }
}
