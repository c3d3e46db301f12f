//! Batch front end: `stabkit <command> --config <file>`.
//!
//! Exit codes: 0 when every requested verdict was obtained, 2 when an
//! Inconclusive verdict or a controller constraint violation is present,
//! 1 on errors.

pub mod config;
pub mod report;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::control::{
    check_constraints, synthesize_combined, synthesize_nominal_only, verify_shift_bound, verify_smallness,
    ClosedLoop, ControlMode, Offsets, SynthesisOptions,
};
use crate::equilibria::{
    check_equilibrium, detect_oscillation, find_equilibria, linear_estimate, nearest, EstimateCase,
    ScanOptions,
};
use crate::stability::{
    classify, contraction_trace, growth_certificate, sample_region, RegionSpec, StabilityVerdict,
};
use crate::system::{
    associate_map, associate_map_of, iterate, order_compatibility, Recursion, Role, RunStatus, SystemBundle,
    Trajectory, Variant,
};
use config::{AnalysisConfig, ConfigError};
use report::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Equilibria,
    Estimate,
    Certify,
    Synthesize,
    Simulate,
    Full,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Equilibria => "equilibria",
            Command::Estimate => "estimate",
            Command::Certify => "certify",
            Command::Synthesize => "synthesize",
            Command::Simulate => "simulate",
            Command::Full => "full",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        [
            Command::Equilibria,
            Command::Estimate,
            Command::Certify,
            Command::Synthesize,
            Command::Simulate,
            Command::Full,
        ]
        .into_iter()
        .find(|c| c.name() == name)
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{op}: {message}")]
    Numeric { op: &'static str, message: String },
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn num<E: Display>(op: &'static str) -> impl Fn(E) -> CliError {
    move |e| CliError::Numeric {
        op,
        message: e.to_string(),
    }
}

/// A finished run: the report and the CSV files it refers to.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Report,
    pub files: Vec<(String, String)>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        self.report.exit_code
    }

    /// Writes the report and trajectory files into `dir`; returns the report path.
    pub fn write(&self, dir: &Path, report_name: &str) -> Result<PathBuf, CliError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| CliError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        for (name, text) in &self.files {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(io(&p))?;
        }
        let p = dir.join(report_name);
        std::fs::write(&p, self.report.to_json()).map_err(io(&p))?;
        Ok(p)
    }
}

struct Context<'a> {
    cfg: &'a AnalysisConfig,
    bundle: SystemBundle,
    scan: ScanOptions,
    files: Vec<(String, String)>,
}

impl Context<'_> {
    fn uncontrolled_variant(&self) -> Variant {
        if self.bundle.component(Role::FTilde).is_some() {
            Variant::Perturbed
        } else {
            Variant::Nominal
        }
    }

    fn has_user_controller(&self) -> bool {
        self.bundle.component(Role::G).is_some() || self.bundle.component(Role::GTilde).is_some()
    }

    fn hint(&self) -> f64 {
        self.cfg
            .control
            .as_ref()
            .and_then(|c| c.x_0p)
            .or_else(|| self.cfg.region.as_ref().map(|r| r.hint()))
            .unwrap_or(0.0)
    }

    fn region(&self) -> Result<Option<RegionSpec>, CliError> {
        match &self.cfg.region {
            None => Ok(None),
            Some(r) => Ok(Some(r.spec(self.cfg.analysis_dim(&self.bundle))?)),
        }
    }

    fn equilibrium_near(&self, rec: &dyn Recursion, hint: f64) -> Result<f64, CliError> {
        let points = find_equilibria(rec, &self.scan).map_err(num("equilibria"))?;
        nearest(&points, hint)
            .map(|p| p.value)
            .ok_or_else(|| CliError::Numeric {
                op: "equilibria",
                message: format!("{} has no equilibrium in the scan interval", rec.label()),
            })
    }

    fn variants(&self) -> Vec<Variant> {
        let has = |r| self.bundle.component(r).is_some();
        let mut v = vec![Variant::Nominal];
        if has(Role::FTilde) {
            v.push(Variant::Perturbed);
        }
        if has(Role::G) {
            v.push(Variant::Controlled);
        }
        if has(Role::GTilde) || (has(Role::G) && has(Role::FTilde)) {
            v.push(Variant::ControlledPerturbed);
        }
        v
    }

    fn equilibria(&self) -> Result<Vec<VariantEquilibria>, CliError> {
        self.variants()
            .into_iter()
            .map(|v| {
                Ok(VariantEquilibria {
                    variant: v.name().into(),
                    points: find_equilibria(&self.bundle.view(v), &self.scan).map_err(num("equilibria"))?,
                })
            })
            .collect()
    }

    fn estimates(&self) -> Result<EstimateSummary, CliError> {
        let opts = self.cfg.solver.estimate();
        let (cases, explicit) = match &self.cfg.estimate.cases {
            Some(c) => (c.clone(), true),
            None => (EstimateCase::ALL.to_vec(), false),
        };
        let mut records = Vec::new();
        let mut skipped = Vec::new();
        for case in cases {
            let dim = match case.dimension(&self.bundle) {
                Ok(d) => d,
                Err(e) if !explicit => {
                    skipped.push(SkippedCase {
                        case,
                        reason: e.to_string(),
                    });
                    continue;
                }
                Err(e) => return Err(num("estimate")(e)),
            };
            let base_view = self.bundle.view_components(case.base(), "base").with_order(dim);
            let mut bases = find_equilibria(&base_view, &self.scan).map_err(num("estimate"))?;
            if let Some(h) = self.cfg.estimate.base_hint {
                bases = nearest(&bases, h).into_iter().cloned().collect();
            }
            let target_view = self
                .bundle
                .view_components(case.target(), "target")
                .with_order(dim);
            let targets = find_equilibria(&target_view, &self.scan).map_err(num("estimate"))?;
            for base in bases {
                let estimate =
                    linear_estimate(&self.bundle, case, base.value, &opts).map_err(num("estimate"))?;
                let target_equilibrium = estimate
                    .estimate
                    .as_ref()
                    .and_then(|x| nearest(&targets, x[0]))
                    .map(|p| p.value);
                let error = match (&estimate.estimate, target_equilibrium) {
                    (Some(x), Some(t)) => Some((x[0] - t).abs()),
                    _ => None,
                };
                records.push(EstimateRecord {
                    case,
                    estimate,
                    target_equilibrium,
                    error,
                });
            }
        }
        Ok(EstimateSummary { records, skipped })
    }

    /// Uncontrolled equilibrium, closed loop and synthesis summary.
    fn synthesize(&self) -> Result<(Synthesis, ClosedLoop, f64), CliError> {
        let c = self.cfg.control.as_ref().ok_or_else(|| ConfigError::Field {
            field: "control".into(),
            message: "section required for synthesis".into(),
        })?;
        let uv = self.uncontrolled_variant();
        let x0p = self.equilibrium_near(&self.bundle.view(uv), self.hint())?;
        let opts = SynthesisOptions {
            sigma: c.sigma,
            sigma_tilde: c.sigma_tilde,
            gamma: c.gamma,
            denom_tol: c.denom_tol,
            scan: self.scan,
            eq_tol: 1e-9,
            max_rounds: c.max_rounds,
        };
        let schedule = match c.mode {
            ControlMode::Combined => synthesize_combined(&self.bundle, x0p, c.target, &opts),
            ControlMode::NominalOnly => {
                synthesize_nominal_only(&self.bundle, x0p, c.target, Offsets { a: c.a, b: c.b }, &opts)
            }
        }
        .map_err(num("synthesize"))?;
        let cl = ClosedLoop::new(&self.bundle, schedule.clone());
        let target = schedule.target;
        let (_, target_residual) =
            check_equilibrium(&cl, target, f64::INFINITY).map_err(num("synthesize"))?;
        let region = self.region()?;

        let starts: Vec<Vec<f64>> = if !self.cfg.run.histories.is_empty() {
            self.cfg
                .run
                .histories
                .iter()
                .map(|h| extend_history(h, cl.order()))
                .collect()
        } else if let Some(r) = &region {
            sample_region(r)
                .map_err(num("synthesize"))?
                .into_iter()
                .take(self.cfg.run.starts)
                .collect()
        } else {
            Vec::new()
        };
        let mut runs = Vec::new();
        for h in starts {
            let run = cl.simulate(&h, self.cfg.run.steps).map_err(num("simulate"))?;
            let constraints = check_constraints(&schedule, &run.records);
            // pre-step states, most recent first
            let mut seq: Vec<f64> = h.iter().rev().copied().collect();
            seq.extend(run.values());
            let mut chain_violations = 0;
            for (k, r) in run.records.iter().enumerate() {
                let end = h.len() + k;
                let state: Vec<f64> = seq[end - cl.order()..end].iter().rev().copied().collect();
                let inside = region.as_ref().is_none_or(|s| s.contains(&state));
                if inside && r.chain_gap(&schedule) > 1e-12 {
                    chain_violations += 1;
                }
            }
            runs.push(ControlledRun {
                history: h,
                status: run.status,
                final_value: run.records.last().map(|r| r.value),
                constraints,
                chain_violations,
            });
        }
        let constraint_violations = runs.iter().map(|r| r.constraints.violations()).sum();

        let (mut smallness, mut shift_bound) = (None, None);
        if let Some(r) = &region {
            let dim = r.dim();
            let open = self.bundle.view(uv).with_order(dim);
            let alpha = certificate(&open, x0p, r)?.alpha;
            if c.mode == ControlMode::NominalOnly {
                let beta = certificate(&cl.nominal_part(), target, r)?.beta;
                smallness = Some(
                    verify_smallness(&self.bundle, target, x0p, r, schedule.a, schedule.b, beta, alpha)
                        .map_err(num("verify_smallness"))?,
                );
            }
            let beta = certificate(&cl, target, r)?.beta;
            shift_bound = Some(
                verify_shift_bound(target - x0p, alpha, beta, r, x0p).map_err(num("verify_shift_bound"))?,
            );
        }
        Ok((
            Synthesis {
                schedule,
                target_residual,
                runs,
                constraint_violations,
                smallness,
                shift_bound,
            },
            cl,
            x0p,
        ))
    }

    fn certify(&self, closed: Option<&ClosedLoop>) -> Result<Certification, CliError> {
        let region = self.region()?.ok_or_else(|| ConfigError::Field {
            field: "region".into(),
            message: "section required for certification".into(),
        })?;
        let dim = region.dim();
        let uv = self.uncontrolled_variant();
        let urec = self.bundle.view(uv).with_order(dim);
        let umap = associate_map_of(&self.bundle, uv.components(), dim).map_err(num("certify"))?;
        let x0p = match closed {
            Some(cl) => cl.schedule().sign_reference,
            None => self.equilibrium_near(&urec, self.hint())?,
        };
        let ueq = vec![x0p; dim];

        let controlled: Option<(String, Box<dyn Recursion>, _, f64)> = match closed {
            Some(cl) => Some((
                cl.label(),
                Box::new(cl.clone()),
                cl.vector_map().map_err(num("certify"))?,
                cl.schedule().target,
            )),
            None if self.has_user_controller() => {
                let set = self.bundle.present();
                let rec = self.bundle.view_components(set, "controlled").with_order(dim);
                let eq = self.equilibrium_near(&rec, region.center[0])?;
                let map = associate_map_of(&self.bundle, set, dim).map_err(num("certify"))?;
                Some((set.to_string(), Box::new(rec), map, eq))
            }
            None => None,
        };

        let Some((label, crec, cmap, ceq)) = controlled else {
            let samples =
                sample_region(&region.clone().with_reference(ueq.clone())).map_err(num("certify"))?;
            let cert = growth_certificate(&urec, &ueq, &samples, None).map_err(num("certify"))?;
            return Ok(Certification {
                uncontrolled_variant: uv.name().into(),
                controlled_variant: None,
                dimension: dim,
                samples: region.samples,
                uncontrolled_only: Some(SoleSide {
                    verdict: StabilityVerdict::expanding(cert.alpha),
                    certificate: cert,
                }),
                classification: None,
                trajectory_checks: None,
            });
        };
        let ceq_vec = vec![ceq; dim];
        let classification = classify((&umap, &urec, &ueq), (&cmap, crec.as_ref(), &ceq_vec), &region)
            .map_err(num("classify"))?;

        let beta = classification.controlled.certificate.beta;
        let starts: Vec<Vec<f64>> = sample_region(&region.clone().with_reference(ceq_vec.clone()))
            .map_err(num("certify"))?
            .into_iter()
            .take(self.cfg.run.starts)
            .collect();
        let steps = self.cfg.run.steps;
        let mut checks = TrajectoryChecks {
            starts: starts.len(),
            steps,
            converged: 0,
            within_envelope: 0,
            max_fitted_rate: 0.0,
        };
        for x0 in &starts {
            let t = contraction_trace(&cmap, &ceq_vec, x0, steps).map_err(num("contraction_trace"))?;
            let d0 = x0
                .iter()
                .zip(&ceq_vec)
                .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
            if t.status == RunStatus::Completed
                && t.ratios
                    .last()
                    .is_some_and(|r| r * d0 <= self.cfg.run.converge_tol)
            {
                checks.converged += 1;
            }
            if t.within_envelope(beta, 1e-9) {
                checks.within_envelope += 1;
            }
            checks.max_fitted_rate = checks.max_fitted_rate.max(t.rate);
        }
        Ok(Certification {
            uncontrolled_variant: uv.name().into(),
            controlled_variant: Some(label),
            dimension: dim,
            samples: region.samples,
            uncontrolled_only: None,
            classification: Some(classification),
            trajectory_checks: Some(checks),
        })
    }

    fn simulate(&mut self, closed: Option<&ClosedLoop>) -> Result<Vec<SimulationRecord>, CliError> {
        let run = &self.cfg.run;
        let mut out = Vec::new();
        for (i, h) in run.histories.iter().enumerate() {
            for v in self.variants() {
                let map = associate_map(&self.bundle, v).map_err(num("simulate"))?;
                let traj = iterate(&map, h, run.steps).map_err(num("simulate"))?;
                let scalars = traj.scalars();
                let name = format!("{}_{i}.csv", v.name());
                let csv = self.keep(&name, scalar_csv(h[0], &scalars[1..]));
                out.push(self.record(v.name().into(), h.clone(), &traj, &self.bundle.view(v), csv));
            }
            if let Some(cl) = closed {
                let hist = extend_history(h, cl.order());
                let r = cl.simulate(&hist, run.steps).map_err(num("simulate"))?;
                let mut states = vec![vec![hist[0]]];
                states.extend(r.values().into_iter().map(|v| vec![v]));
                let traj = Trajectory {
                    label: cl.label(),
                    states,
                    status: r.status,
                };
                let name = format!("{}_{i}.csv", cl.label());
                let csv = self.keep(&name, closed_loop_csv(hist[0], &r.records));
                out.push(self.record(cl.label(), hist, &traj, cl, csv));
            }
        }
        Ok(out)
    }

    fn keep(&mut self, name: &str, text: String) -> Option<String> {
        if !self.cfg.output.trajectories {
            return None;
        }
        self.files.push((name.to_string(), text));
        Some(name.to_string())
    }

    fn record(
        &self,
        label: String,
        history: Vec<f64>,
        traj: &Trajectory,
        rec: &dyn Recursion,
        csv: Option<String>,
    ) -> SimulationRecord {
        let run = &self.cfg.run;
        let oscillation = detect_oscillation(traj, run.max_period, run.window, run.osc_tol);
        let replay_deviation = oscillation.as_ref().and_then(|p| p.replay(rec).ok());
        SimulationRecord {
            label,
            history,
            steps: traj.len() - 1,
            status: traj.status,
            final_value: (traj.len() > 1).then(|| traj.states[traj.len() - 1][0]),
            oscillation,
            replay_deviation,
            csv,
        }
    }
}

fn certificate(
    rec: &dyn Recursion,
    eq: f64,
    region: &RegionSpec,
) -> Result<crate::stability::GrowthCertificate, CliError> {
    let e = vec![eq; region.dim()];
    let samples =
        sample_region(&region.clone().with_reference(e.clone())).map_err(num("growth_certificate"))?;
    growth_certificate(rec, &e, &samples, None).map_err(num("growth_certificate"))
}

/// Pads a history to `len` by repeating its oldest value.
fn extend_history(h: &[f64], len: usize) -> Vec<f64> {
    let mut v = h.to_vec();
    let last = *v.last().unwrap_or(&0.0);
    v.resize(len.max(h.len()), last);
    v
}

/// Validates `cfg` and runs `command`. No numerics start before validation
/// has passed.
pub fn execute(cfg: &AnalysisConfig, command: Command) -> Result<Outcome, CliError> {
    let bundle = cfg.validate()?;
    match command {
        Command::Certify if cfg.region.is_none() => {
            return Err(ConfigError::Field {
                field: "region".into(),
                message: "section required for certify".into(),
            }
            .into())
        }
        Command::Synthesize if cfg.control.is_none() => {
            return Err(ConfigError::Field {
                field: "control".into(),
                message: "section required for synthesize".into(),
            }
            .into())
        }
        _ => {}
    }
    let mut ctx = Context {
        cfg,
        scan: cfg.solver.scan(),
        bundle: bundle.clone(),
        files: Vec::new(),
    };
    let want = |c: Command| command == c || command == Command::Full;

    let equilibria = if want(Command::Equilibria) {
        Some(ctx.equilibria()?)
    } else {
        None
    };
    let estimates = if want(Command::Estimate) {
        Some(ctx.estimates()?)
    } else {
        None
    };
    let needs_loop = cfg.control.is_some()
        && (want(Command::Synthesize) || want(Command::Certify) || want(Command::Simulate));
    let (synthesis, closed) = if needs_loop {
        let (s, cl, _) = ctx.synthesize()?;
        (want(Command::Synthesize).then_some(s), Some(cl))
    } else {
        (None, None)
    };
    let certification = if want(Command::Certify) && cfg.region.is_some() {
        Some(ctx.certify(closed.as_ref())?)
    } else {
        None
    };
    let simulations = if want(Command::Simulate) {
        Some(ctx.simulate(closed.as_ref())?)
    } else {
        None
    };

    let mut verdicts = Vec::new();
    if let Some(c) = &certification {
        if let Some(sole) = &c.uncontrolled_only {
            verdicts.push(VerdictLine {
                side: "uncontrolled".into(),
                variant: c.uncontrolled_variant.clone(),
                verdict: sole.verdict,
            });
        }
        if let Some(cl) = &c.classification {
            verdicts.push(VerdictLine {
                side: "uncontrolled".into(),
                variant: c.uncontrolled_variant.clone(),
                verdict: cl.uncontrolled.verdict,
            });
            verdicts.push(VerdictLine {
                side: "controlled".into(),
                variant: c.controlled_variant.clone().unwrap_or_default(),
                verdict: cl.controlled.verdict,
            });
        }
    }
    let inconclusive = verdicts
        .iter()
        .any(|v| v.verdict == StabilityVerdict::Inconclusive);
    let violations = synthesis.as_ref().is_some_and(|s| s.constraint_violations > 0);
    let exit_code = if inconclusive || violations { 2 } else { 0 };

    let report = Report {
        schema: SCHEMA,
        command: command.name().into(),
        config: cfg.clone(),
        order_compatibility: order_compatibility(&bundle),
        equilibria,
        estimates,
        certification,
        synthesis,
        simulations,
        verdicts,
        exit_code,
    };
    Ok(Outcome {
        report,
        files: ctx.files,
    })
}

#[derive(Parser)]
#[command(
    name = "stabkit",
    version,
    about = "Equilibria, stability certificates and stabilizing controllers for scalar difference equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides region.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Sub {
    /// Equilibria of every variant present.
    Equilibria(RunArgs),
    /// Linear estimates of shifted equilibria.
    Estimate(RunArgs),
    /// Growth certificates and stability verdicts.
    Certify(RunArgs),
    /// Gain schedule synthesis and constraint checks.
    Synthesize(RunArgs),
    /// Trajectories, oscillation detection and CSV export.
    Simulate(RunArgs),
    /// Everything above.
    Full(RunArgs),
    /// Numeric differences between two reports.
    Diff {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        tol: f64,
    },
}

fn run_command(command: Command, args: &RunArgs) -> Result<i32, CliError> {
    let mut cfg = AnalysisConfig::load(&args.config)?;
    if let (Some(seed), Some(region)) = (args.seed, cfg.region.as_mut()) {
        region.seed = seed;
    }
    let outcome = execute(&cfg, command)?;
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    let path = outcome.write(&dir, &cfg.output.report)?;
    for v in &outcome.report.verdicts {
        println!("{:<12} {:<28} {:?}", v.side, v.variant, v.verdict);
    }
    if let Some(s) = &outcome.report.synthesis {
        println!("constraint violations: {}", s.constraint_violations);
    }
    println!("report: {}", path.display());
    Ok(outcome.exit_code())
}

fn run_diff(a: &Path, b: &Path, tol: f64) -> Result<i32, String> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()));
    let diffs = diff_report_text(&read(a)?, &read(b)?, tol).map_err(|e| e.to_string())?;
    for d in &diffs {
        println!("{}: {} != {}", d.path, d.left, d.right);
    }
    Ok(if diffs.is_empty() { 0 } else { 2 })
}

/// Entry point of the `stabkit` binary.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Sub::Equilibria(a) => run_command(Command::Equilibria, a).map_err(|e| e.to_string()),
        Sub::Estimate(a) => run_command(Command::Estimate, a).map_err(|e| e.to_string()),
        Sub::Certify(a) => run_command(Command::Certify, a).map_err(|e| e.to_string()),
        Sub::Synthesize(a) => run_command(Command::Synthesize, a).map_err(|e| e.to_string()),
        Sub::Simulate(a) => run_command(Command::Simulate, a).map_err(|e| e.to_string()),
        Sub::Full(a) => run_command(Command::Full, a).map_err(|e| e.to_string()),
        Sub::Diff { a, b, tol } => run_diff(a, b, *tol),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
