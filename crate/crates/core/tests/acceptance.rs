//! Acceptance criteria, one line each. Exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::{Command as Process, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stabkit::cli::config::AnalysisConfig;
use stabkit::cli::{execute, Command};
use stabkit::control::{synthesize_nominal_only, ClosedLoop, Offsets, SynthesisOptions};
use stabkit::equilibria::{
    classify_shift, detect_oscillation, jacobian, linear_estimate, EstimateCase, EstimateOptions, FdSteps,
    Solvability,
};
use stabkit::expr::LaggedExpr;
use stabkit::stability::{classify, contraction_trace, sample_region, RegionSpec, StabilityVerdict};
use stabkit::system::{associate_map, iterate, scalar_run, Recursion, Role, SystemBundle, Variant};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn expr(text: &str, order: usize) -> LaggedExpr {
    LaggedExpr::parse(text, order).unwrap_or_else(|e| panic!("{text}: {e}"))
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

/// Random polynomial in `x[1..=m]`, degree at most 2, coefficients in [-1, 1].
fn random_poly(rng: &mut ChaCha8Rng, m: usize) -> String {
    let terms = rng.random_range(1..=4);
    let mut out = Vec::new();
    for _ in 0..terms {
        let c: f64 = rng.random_range(-1.0..=1.0);
        let i = rng.random_range(1..=m);
        let term = match rng.random_range(0..4) {
            0 => format!("{c:?}"),
            1 => format!("{c:?}*x[{i}]"),
            2 => format!("{c:?}*x[{i}]^2"),
            _ => format!("{c:?}*x[{i}]*x[{}]", rng.random_range(1..=m)),
        };
        out.push(term);
    }
    out.join(" + ")
}

/// Independent bisection oracle for a sign change of `g` on `[lo, hi]`.
fn bisect(g: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut glo = g(lo);
    assert!(glo * g(hi) <= 0.0, "no sign change on [{lo}, {hi}]");
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        let gm = g(mid);
        if gm == 0.0 {
            return mid;
        }
        if (gm < 0.0) == (glo < 0.0) {
            lo = mid;
            glo = gm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn scalar_vector_equivalence() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bundles = 60;
    for k in 0..bundles {
        let m = rng.random_range(1..=4);
        let order = |rng: &mut ChaCha8Rng| rng.random_range(1..=m);
        let o = order(&mut rng);
        let mut bundle = SystemBundle::new(expr(&random_poly(&mut rng, o), o));
        // force the full order on at least one component
        let o = m;
        bundle = bundle.with(Role::FTilde, expr(&random_poly(&mut rng, o), o));
        for role in [Role::G, Role::GTilde] {
            if rng.random_bool(0.5) {
                let o = order(&mut rng);
                bundle = bundle.with(role, expr(&random_poly(&mut rng, o), o));
            }
        }
        for variant in [
            Variant::Nominal,
            Variant::Perturbed,
            Variant::Controlled,
            Variant::ControlledPerturbed,
        ] {
            let view = bundle.view(variant);
            let history: Vec<f64> = (0..view.order()).map(|_| rng.random_range(-0.5..=0.5)).collect();
            let scalar = scalar_run(&bundle, variant, &history, 500).map_err(|e| e.to_string())?;
            let map = associate_map(&bundle, variant).map_err(|e| e.to_string())?;
            let traj = iterate(&map, &history, 500).map_err(|e| e.to_string())?;
            let heads: Vec<u64> = traj.scalars()[1..].iter().map(|v| v.to_bits()).collect();
            let direct: Vec<u64> = scalar.values.iter().map(|v| v.to_bits()).collect();
            ensure(
                heads == direct && scalar.status == traj.status,
                format!("bundle {k} ({variant}) differs"),
            )?;
        }
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(5), format!("took {t:?}"))?;
    Ok(format!(
        "{bundles} bundles x 4 variants bit-identical over 500 steps in {t:.2?}"
    ))
}

fn companion_structure() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..100 {
        let m = rng.random_range(1..=4);
        let bundle = SystemBundle::new(expr(&random_poly(&mut rng, m), m));
        let map = associate_map(&bundle, Variant::Nominal).map_err(|e| e.to_string())?;
        let at: Vec<f64> = (0..map.dim()).map(|_| rng.random_range(-2.0..=2.0)).collect();
        let rows = jacobian(&map, &at, FdSteps::default())
            .map_err(|e| e.to_string())?
            .rows();
        for (i, row) in rows.iter().enumerate().skip(1) {
            for (j, v) in row.iter().enumerate() {
                let want: f64 = if j + 1 == i { 1.0 } else { 0.0 };
                ensure(
                    v.to_bits() == want.to_bits(),
                    format!("map {k}: row {i} col {j} is {v}"),
                )?;
            }
        }
        let coeffs: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let text = coeffs
            .iter()
            .enumerate()
            .map(|(i, a)| format!("{a:?}*x[{}]", i + 1))
            .collect::<Vec<_>>()
            .join(" + ");
        let lin =
            associate_map(&SystemBundle::new(expr(&text, m)), Variant::Nominal).map_err(|e| e.to_string())?;
        let grad = jacobian(&lin, &at, FdSteps::default())
            .map_err(|e| e.to_string())?
            .gradient();
        for (g, a) in grad.iter().zip(&coeffs) {
            ensure(
                (g - a).abs() <= 1e-8,
                format!("linear map {k}: gradient {g} vs {a}"),
            )?;
        }
    }
    Ok("100 maps: shifted identity exact, linear gradients within 1e-8".into())
}

fn affine_exactness() -> Check {
    let mut worst: f64 = 0.0;
    for a in [0.3, 0.5, 0.9, -0.5] {
        for b in [0.1, -0.2] {
            let bundle = SystemBundle::new(expr(&format!("{a:?}*x[1]"), 1))
                .with(Role::FTilde, expr(&format!("{b:?}"), 1));
            let est = linear_estimate(
                &bundle,
                EstimateCase::PerturbedFromNominal,
                0.0,
                &EstimateOptions::default(),
            )
            .map_err(|e| e.to_string())?;
            let oracle = bisect(|x| a * x + b - x, -10.0, 10.0);
            let xhat = est.estimate.as_ref().ok_or("no estimate")?[0];
            ensure(est.classification == Solvability::Unique, "not unique")?;
            ensure(
                (xhat - oracle).abs() <= 1e-9,
                format!("a={a} b={b}: {xhat} vs oracle {oracle}"),
            )?;
            worst = worst.max((xhat - oracle).abs());
            let bound = est.banach_bound.ok_or("no Banach bound")?;
            let shift = est.shift_norm().unwrap();
            ensure(
                shift <= bound + 1e-12,
                format!("a={a} b={b}: bound {bound} < shift {shift}"),
            )?;
            if a > 0.0 {
                ensure(
                    (bound - shift).abs() <= 1e-9,
                    format!("a={a} b={b}: bound {bound} not tight ({shift})"),
                )?;
            }
        }
    }
    Ok(format!(
        "8 affine cases match bisection within {worst:.1e}; bound tight for a > 0"
    ))
}

fn quadratic_decay() -> Check {
    let eps = [1e-2, 5e-3, 2.5e-3];
    let mut errors = Vec::new();
    for e in eps {
        let bundle = SystemBundle::new(expr("0.5*x[1]", 1))
            .with(Role::FTilde, expr(&format!("{e:?}*x[1]^2 + 0.1"), 1));
        let est = linear_estimate(
            &bundle,
            EstimateCase::PerturbedFromNominal,
            0.0,
            &EstimateOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        let xhat = est.estimate.ok_or("no estimate")?[0];
        // root of e x^2 - 0.5 x + 0.1 near the estimate, by grid then bisection
        let g = |x: f64| e * x * x - 0.5 * x + 0.1;
        let grid: Vec<f64> = (0..=1000).map(|i| -1.0 + 3.0 * i as f64 / 1000.0).collect();
        let cell = grid
            .windows(2)
            .find(|w| g(w[0]) * g(w[1]) <= 0.0)
            .ok_or("oracle found no root")?;
        let truth = bisect(g, cell[0], cell[1]);
        errors.push((xhat - truth).abs());
    }
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    let text = format!(
        "errors {:.3e}, {:.3e}, {:.3e}; ratios {:.3}, {:.3} (required within [2.5, 6])",
        errors[0], errors[1], errors[2], ratios[0], ratios[1]
    );
    ensure(ratios.iter().all(|r| (2.5..=6.0).contains(r)), text.clone())?;
    Ok(text)
}

fn rank_trichotomy() -> Check {
    let cases = [
        ("x[1]", "0", Solvability::InfinitelyMany),
        ("x[1]", "0.1", Solvability::None),
        ("0.5*x[1]", "0.1", Solvability::Unique),
    ];
    for (f, ft, want) in cases {
        let bundle = SystemBundle::new(expr(f, 1)).with(Role::FTilde, expr(ft, 1));
        let est = linear_estimate(
            &bundle,
            EstimateCase::PerturbedFromNominal,
            0.0,
            &EstimateOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        ensure(
            est.classification == want,
            format!("f={f} f~={ft}: {:?}, expected {want:?}", est.classification),
        )?;
    }
    use nalgebra::{DMatrix, DVector};
    let raw = [
        (1.0, 0.0, Solvability::InfinitelyMany),
        (1.0, 0.1, Solvability::None),
        (0.5, 0.1, Solvability::Unique),
    ];
    for (m, v, want) in raw {
        let (got, ..) = classify_shift(
            &DMatrix::from_element(1, 1, m),
            &DVector::from_element(1, v),
            None,
        );
        ensure(got == want, format!("M={m} V={v}: {got:?}"))?;
    }
    Ok("infinitely_many, none, unique as constructed".into())
}

fn worked_pair() -> Check {
    let start = Instant::now();
    let bundle = SystemBundle::new(expr("2*x[1]", 1)).with(Role::G, expr("-1.5*x[1]", 1));
    let umap = associate_map(&bundle, Variant::Nominal).map_err(|e| e.to_string())?;
    let cmap = associate_map(&bundle, Variant::Controlled).map_err(|e| e.to_string())?;
    let (uview, cview) = (bundle.view(Variant::Nominal), bundle.view(Variant::Controlled));
    let eq = [0.0];
    let region = RegionSpec::ball(vec![0.0], 1.0, 10_000, 20240611);
    let c = classify(
        (&umap, &uview as &dyn Recursion, &eq),
        (&cmap, &cview as &dyn Recursion, &eq),
        &region,
    )
    .map_err(|e| e.to_string())?;
    let (alpha, beta) = (c.uncontrolled.certificate.alpha, c.controlled.certificate.beta);
    ensure(alpha >= 1.99, format!("alpha {alpha}"))?;
    ensure(beta <= 0.51, format!("beta {beta}"))?;
    ensure(
        c.verdicts() == (StabilityVerdict::Unstable, StabilityVerdict::AsymptoticallyStable),
        format!("verdicts {:?}", c.verdicts()),
    )?;
    let starts = sample_region(&RegionSpec::ball(vec![0.0], 1.0, 32, 7)).map_err(|e| e.to_string())?;
    let mut runs = 0;
    for s in starts.iter().take(32) {
        let trace = contraction_trace(&cmap, &eq, s, 200).map_err(|e| e.to_string())?;
        ensure(
            trace.within_envelope(0.51, 1e-9),
            format!("start {s:?} leaves the 0.51^n envelope"),
        )?;
        runs += 1;
    }
    ensure(runs == 32, format!("only {runs} starts"))?;
    let t = start.elapsed();
    ensure(t < Duration::from_secs(5), format!("took {t:?}"))?;
    Ok(format!(
        "alpha {alpha:.4}, beta {beta:.4}, (unstable, asymptotically stable), 32 runs in envelope, {t:.2?}"
    ))
}

fn load(name: &str) -> Result<AnalysisConfig, String> {
    AnalysisConfig::load(&config_path(name)).map_err(|e| e.to_string())
}

fn combined_end_to_end() -> Check {
    let cfg = load("worked_combined.toml")?;
    let out = execute(&cfg, Command::Full).map_err(|e| e.to_string())?;
    let r = &out.report;
    let syn = r.synthesis.as_ref().ok_or("no synthesis")?;
    ensure(
        syn.schedule.sigma == 0 && syn.schedule.sigma_tilde == 0 && syn.schedule.gamma == 0.75,
        "schedule parameters",
    )?;
    ensure(
        syn.constraint_violations == 0,
        format!("{} constraint violations", syn.constraint_violations),
    )?;
    for run in &syn.runs {
        ensure(
            run.constraints.steps == 200 && run.constraints.violations() == 0,
            "run constraints",
        )?;
        let last = run.final_value.ok_or("run diverged")?;
        ensure(
            (last - syn.schedule.target).abs() <= 1e-8,
            format!("run ends at {last}"),
        )?;
    }
    let cert = r.certification.as_ref().ok_or("no certification")?;
    ensure(
        cert.uncontrolled_variant == "perturbed",
        "uncontrolled side is not the perturbed variant",
    )?;
    let cls = cert.classification.as_ref().ok_or("no classification")?;
    let (alpha, beta) = (
        cls.uncontrolled.certificate.alpha,
        cls.controlled.certificate.beta,
    );
    ensure(alpha > 1.0 && beta < 1.0, format!("alpha {alpha}, beta {beta}"))?;
    ensure(
        cls.verdicts() == (StabilityVerdict::Unstable, StabilityVerdict::AsymptoticallyStable),
        format!("verdicts {:?}", cls.verdicts()),
    )?;
    let tc = cert.trajectory_checks.as_ref().ok_or("no trajectory checks")?;
    ensure(
        tc.steps == 200 && tc.converged == tc.starts,
        format!("{}/{} converged", tc.converged, tc.starts),
    )?;
    Ok(format!(
        "0 violations, alpha {alpha:.4}, beta {beta:.4}, {}/{} starts converge to {} by n = 200",
        tc.converged, tc.starts, syn.schedule.target
    ))
}

fn nominal_only_end_to_end() -> Check {
    let cfg = load("worked_nominal_only.toml")?;
    let out = execute(&cfg, Command::Full).map_err(|e| e.to_string())?;
    let syn = out.report.synthesis.as_ref().ok_or("no synthesis")?;
    ensure(
        syn.schedule.a == 0.0 && syn.schedule.b == 0.0,
        "offsets are not zero",
    )?;
    let small = syn.smallness.as_ref().ok_or("no smallness report")?;
    ensure(
        small.admissible && small.beta_tilde < small.beta_tilde_limit,
        format!("beta~ {} vs limit {}", small.beta_tilde, small.beta_tilde_limit),
    )?;
    let cls = out
        .report
        .certification
        .as_ref()
        .and_then(|c| c.classification.as_ref())
        .ok_or("no classification")?;
    ensure(cls.region.inner_radius() == 0.5, "region is not ball(0, 0.5)")?;
    ensure(
        cls.controlled.verdict == StabilityVerdict::AsymptoticallyStable,
        format!("closed loop verdict {:?}", cls.controlled.verdict),
    )?;

    let bundle = cfg.validate().map_err(|e| e.to_string())?;
    let opts = SynthesisOptions {
        gamma: 0.0,
        ..SynthesisOptions::default()
    };
    let schedule = synthesize_nominal_only(
        &bundle,
        0.0,
        None,
        Offsets {
            a: Some(0.0),
            b: Some(0.0),
        },
        &opts,
    )
    .map_err(|e| e.to_string())?;
    let cl = ClosedLoop::new(&bundle, schedule);
    for h in [0.4, -0.3, 0.05, -0.49] {
        let controlled = cl.simulate(&[h], 200).map_err(|e| e.to_string())?.values();
        let open = scalar_run(&bundle, Variant::Perturbed, &[h], 200)
            .map_err(|e| e.to_string())?
            .values;
        let same = controlled.len() == open.len()
            && controlled
                .iter()
                .zip(&open)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(
            same,
            format!("gamma = 0 run from {h} differs from the perturbed run"),
        )?;
    }
    Ok(format!(
        "admissible (beta~ {:.4} < {:.4}), closed loop beta {:.4}, gamma = 0 bit-identical to perturbed",
        small.beta_tilde, small.beta_tilde_limit, cls.controlled.certificate.beta
    ))
}

fn oscillations() -> Check {
    let mut found = Vec::new();
    for (f, history, period, expected) in [
        ("x[2]", [1.0, -1.0], 2, vec![1.0, -1.0]),
        ("-x[2]", [1.0, 0.0], 4, vec![1.0, 0.0, -1.0, 0.0]),
    ] {
        let bundle = SystemBundle::new(expr(f, 2));
        let map = associate_map(&bundle, Variant::Nominal).map_err(|e| e.to_string())?;
        let traj = iterate(&map, &history, 64).map_err(|e| e.to_string())?;
        let pat = detect_oscillation(&traj, 8, 32, 1e-12).ok_or(format!("{f}: no pattern"))?;
        ensure(pat.period == period, format!("{f}: period {}", pat.period))?;
        ensure(
            pat.matches_cyclic(&expected, 1e-12),
            format!("{f}: pattern {:?}", pat.values),
        )?;
        let dev = pat
            .replay(&bundle.view(Variant::Nominal))
            .map_err(|e| e.to_string())?;
        ensure(dev <= 1e-12, format!("{f}: replay deviation {dev}"))?;
        found.push(format!("{f} period {}", pat.period));
    }
    Ok(format!("{}; replays exact", found.join(", ")))
}

fn determinism() -> Check {
    let exe = env!("CARGO_BIN_EXE_stabkit");
    let config = config_path("worked_combined.toml");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Process::new(exe)
            .arg("full")
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .stdout(Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.code() == Some(0), format!("exit status {status}"))?;
        reports.push(std::fs::read(out.join("report.json")).map_err(|e| e.to_string())?);
    }
    ensure(reports[0] == reports[1], "reports differ")?;
    Ok(format!("two runs, {} byte reports identical", reports[0].len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("scalar/vector equivalence", scalar_vector_equivalence),
        ("companion structure", companion_structure),
        ("affine exactness of linear estimates", affine_exactness),
        ("quadratic decay of estimate error", quadratic_decay),
        ("rank trichotomy", rank_trichotomy),
        ("worked expanding/contracting pair", worked_pair),
        ("combined controller end to end", combined_end_to_end),
        ("nominal-only controller end to end", nominal_only_end_to_end),
        ("oscillation detection", oscillations),
        ("deterministic reports", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
