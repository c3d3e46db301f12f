//! C ABI for stabkit.
//!
//! Systems are opaque handles created by `stabkit_system_new` and released
//! with `stabkit_system_free`. Every fallible call returns a `StabkitStatus`;
//! on failure `stabkit_last_error` describes the problem for the calling
//! thread. Strings handed out by the library are freed with
//! `stabkit_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use stabkit::cli::{config::AnalysisConfig, execute, Command};
use stabkit::equilibria::{find_equilibria, ScanOptions};
use stabkit::expr::LaggedExpr;
use stabkit::stability::{growth_certificate, sample_region, RegionSpec};
use stabkit::system::{scalar_run, Role, RunStatus, SystemBundle, Variant};

pub const STABKIT_VARIANT_NOMINAL: u32 = 0;
pub const STABKIT_VARIANT_PERTURBED: u32 = 1;
pub const STABKIT_VARIANT_CONTROLLED: u32 = 2;
pub const STABKIT_VARIANT_CONTROLLED_PERTURBED: u32 = 3;

pub const STABKIT_ROLE_F: u32 = 0;
pub const STABKIT_ROLE_F_TILDE: u32 = 1;
pub const STABKIT_ROLE_G: u32 = 2;
pub const STABKIT_ROLE_G_TILDE: u32 = 3;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StabkitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    InvalidArgument = 4,
    EvalError = 5,
    BufferTooSmall = 6,
    ConfigError = 7,
    NumericError = 8,
    Panic = 9,
}

/// Opaque system handle.
pub struct StabkitSystem {
    bundle: SystemBundle,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StabkitCertificate {
    pub alpha: f64,
    pub beta: f64,
    pub sample_count: usize,
    pub skipped: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let mut bytes = msg.into().into_bytes();
    bytes.retain(|b| *b != 0);
    let c = CString::new(bytes).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: StabkitStatus, msg: impl Into<String>) -> StabkitStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning panics into `Panic`.
fn guard(f: impl FnOnce() -> StabkitStatus) -> StabkitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == StabkitStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(StabkitStatus::Panic, "internal panic"),
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, StabkitStatus> {
    if p.is_null() {
        return Err(fail(StabkitStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(StabkitStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn variant(v: u32) -> Result<Variant, StabkitStatus> {
    match v {
        STABKIT_VARIANT_NOMINAL => Ok(Variant::Nominal),
        STABKIT_VARIANT_PERTURBED => Ok(Variant::Perturbed),
        STABKIT_VARIANT_CONTROLLED => Ok(Variant::Controlled),
        STABKIT_VARIANT_CONTROLLED_PERTURBED => Ok(Variant::ControlledPerturbed),
        _ => Err(fail(
            StabkitStatus::InvalidArgument,
            format!("unknown variant {v}"),
        )),
    }
}

fn role(r: u32) -> Result<Role, StabkitStatus> {
    match r {
        STABKIT_ROLE_F => Ok(Role::F),
        STABKIT_ROLE_F_TILDE => Ok(Role::FTilde),
        STABKIT_ROLE_G => Ok(Role::G),
        STABKIT_ROLE_G_TILDE => Ok(Role::GTilde),
        _ => Err(fail(StabkitStatus::InvalidArgument, format!("unknown role {r}"))),
    }
}

fn parse(text: &str, order: usize) -> Result<LaggedExpr, StabkitStatus> {
    LaggedExpr::parse(text, order).map_err(|e| fail(StabkitStatus::ParseError, e.to_string()))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Creates a system with nominal part `f` of the given order.
///
/// # Safety
/// `f` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stabkit_system_new(
    f: *const c_char,
    order: usize,
    out: *mut *mut StabkitSystem,
) -> StabkitStatus {
    guard(|| {
        if out.is_null() {
            return fail(StabkitStatus::NullPointer, "out is null");
        }
        let text = tri!(read_str(f, "f"));
        let expr = tri!(parse(text, order));
        *out = Box::into_raw(Box::new(StabkitSystem {
            bundle: SystemBundle::new(expr),
        }));
        StabkitStatus::Ok
    })
}

/// Sets or replaces one component. A null `expr` removes it (except `f`).
///
/// # Safety
/// `system` must come from `stabkit_system_new`; `expr` is null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn stabkit_system_set_component(
    system: *mut StabkitSystem,
    role_id: u32,
    expr: *const c_char,
    order: usize,
) -> StabkitStatus {
    guard(|| {
        let Some(sys) = system.as_mut() else {
            return fail(StabkitStatus::NullPointer, "system is null");
        };
        let r = tri!(role(role_id));
        if expr.is_null() {
            if r == Role::F {
                return fail(StabkitStatus::InvalidArgument, "f cannot be removed");
            }
            sys.bundle = sys.bundle.clone().without(r);
            return StabkitStatus::Ok;
        }
        let e = tri!(parse(tri!(read_str(expr, "expr")), order));
        sys.bundle = sys.bundle.clone().with(r, e);
        StabkitStatus::Ok
    })
}

/// Releases a system. Null is ignored.
///
/// # Safety
/// `system` must come from `stabkit_system_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stabkit_system_free(system: *mut StabkitSystem) {
    if !system.is_null() {
        drop(Box::from_raw(system));
    }
}

/// Order `m` of the system, 0 for a null handle.
///
/// # Safety
/// `system` must be null or come from `stabkit_system_new`.
#[no_mangle]
pub unsafe extern "C" fn stabkit_system_order(system: *const StabkitSystem) -> usize {
    system.as_ref().map_or(0, |s| s.bundle.order())
}

/// Iterates a variant for `steps` steps from `history` (most recent first,
/// exactly `m` values). Writes `x_1..` into `out` (capacity `steps`) and the
/// number produced into `written`; fewer than `steps` means the run diverged.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn stabkit_scalar_run(
    system: *const StabkitSystem,
    variant_id: u32,
    history: *const f64,
    history_len: usize,
    steps: usize,
    out: *mut f64,
    written: *mut usize,
) -> StabkitStatus {
    guard(|| {
        let Some(sys) = system.as_ref() else {
            return fail(StabkitStatus::NullPointer, "system is null");
        };
        if history.is_null() || written.is_null() || (out.is_null() && steps > 0) {
            return fail(StabkitStatus::NullPointer, "history, out or written is null");
        }
        let v = tri!(variant(variant_id));
        let h = std::slice::from_raw_parts(history, history_len);
        let run = match scalar_run(&sys.bundle, v, h, steps) {
            Ok(r) => r,
            Err(e) => return fail(StabkitStatus::EvalError, e.to_string()),
        };
        ptr::copy_nonoverlapping(run.values.as_ptr(), out, run.values.len());
        *written = run.values.len();
        if let RunStatus::DivergedNonfinite { step } = run.status {
            set_error(format!("diverged at step {step}"));
        }
        StabkitStatus::Ok
    })
}

/// Equilibria of a variant in `[lo, hi]`. `count` receives the number
/// found; `BufferTooSmall` is returned when it exceeds `capacity`, with the
/// first `capacity` values written.
///
/// # Safety
/// `out` must hold `capacity` doubles; `count` must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn stabkit_find_equilibria(
    system: *const StabkitSystem,
    variant_id: u32,
    lo: f64,
    hi: f64,
    grid: usize,
    tol: f64,
    out: *mut f64,
    capacity: usize,
    count: *mut usize,
) -> StabkitStatus {
    guard(|| {
        let Some(sys) = system.as_ref() else {
            return fail(StabkitStatus::NullPointer, "system is null");
        };
        if count.is_null() || (out.is_null() && capacity > 0) {
            return fail(StabkitStatus::NullPointer, "out or count is null");
        }
        let v = tri!(variant(variant_id));
        let points = match find_equilibria(&sys.bundle.view(v), &ScanOptions { lo, hi, grid, tol }) {
            Ok(p) => p,
            Err(e) => return fail(StabkitStatus::InvalidArgument, e.to_string()),
        };
        *count = points.len();
        for (i, p) in points.iter().take(capacity).enumerate() {
            *out.add(i) = p.value;
        }
        if points.len() > capacity {
            return fail(
                StabkitStatus::BufferTooSmall,
                format!("{} equilibria found", points.len()),
            );
        }
        StabkitStatus::Ok
    })
}

/// Growth certificate of a variant about the constant state `equilibrium`
/// over the max-norm ball of `radius` around it.
///
/// # Safety
/// `system` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn stabkit_growth_certificate(
    system: *const StabkitSystem,
    variant_id: u32,
    equilibrium: f64,
    radius: f64,
    samples: usize,
    seed: u64,
    out: *mut StabkitCertificate,
) -> StabkitStatus {
    guard(|| {
        let Some(sys) = system.as_ref() else {
            return fail(StabkitStatus::NullPointer, "system is null");
        };
        if out.is_null() {
            return fail(StabkitStatus::NullPointer, "out is null");
        }
        let v = tri!(variant(variant_id));
        let m = sys.bundle.order();
        let eq = vec![equilibrium; m];
        let region = RegionSpec::ball(eq.clone(), radius, samples, seed);
        let pts = match sample_region(&region) {
            Ok(p) => p,
            Err(e) => return fail(StabkitStatus::InvalidArgument, e.to_string()),
        };
        match growth_certificate(&sys.bundle.view(v), &eq, &pts, None) {
            Ok(c) => {
                *out = StabkitCertificate {
                    alpha: c.alpha,
                    beta: c.beta,
                    sample_count: c.sample_count,
                    skipped: c.skipped,
                };
                StabkitStatus::Ok
            }
            Err(e) => fail(StabkitStatus::NumericError, e.to_string()),
        }
    })
}

/// Runs a CLI command (`"full"`, `"certify"`, ..) on a TOML configuration
/// and hands back the JSON report. Nothing is written to disk.
///
/// # Safety
/// String arguments must be NUL-terminated; `report` and `exit_code` valid.
/// The report must be released with `stabkit_string_free`.
#[no_mangle]
pub unsafe extern "C" fn stabkit_run_config(
    config_toml: *const c_char,
    command: *const c_char,
    report: *mut *mut c_char,
    exit_code: *mut i32,
) -> StabkitStatus {
    guard(|| {
        if report.is_null() || exit_code.is_null() {
            return fail(StabkitStatus::NullPointer, "report or exit_code is null");
        }
        let text = tri!(read_str(config_toml, "config"));
        let name = tri!(read_str(command, "command"));
        let Some(cmd) = Command::parse(name) else {
            return fail(StabkitStatus::InvalidArgument, format!("unknown command {name}"));
        };
        let cfg = match AnalysisConfig::from_toml(text) {
            Ok(c) => c,
            Err(e) => return fail(StabkitStatus::ConfigError, e.to_string()),
        };
        let outcome = match execute(&cfg, cmd) {
            Ok(o) => o,
            Err(stabkit::cli::CliError::Config(e)) => return fail(StabkitStatus::ConfigError, e.to_string()),
            Err(e) => return fail(StabkitStatus::NumericError, e.to_string()),
        };
        *exit_code = outcome.exit_code();
        *report = CString::new(outcome.report.to_json())
            .unwrap_or_default()
            .into_raw();
        StabkitStatus::Ok
    })
}

/// Frees a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stabkit_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn stabkit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn stabkit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
