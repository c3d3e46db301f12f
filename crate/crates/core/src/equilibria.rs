//! Equilibria, limit oscillations and linearized equilibrium-shift estimates.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::EvalError;
use crate::system::{
    associate_map_of, ComponentSet, Recursion, Role, SystemBundle, SystemError, Trajectory, VectorMap,
};

#[derive(Debug, Error)]
pub enum EquilibriumError {
    #[error("interval [{0}, {1}] is empty")]
    InvalidInterval(f64, f64),
    #[error("grid needs at least 2 points, got {0}")]
    InvalidGrid(usize),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("{case}: order hypothesis violated ({detail})")]
    OrderHypothesis { case: EstimateCase, detail: String },
    #[error("{case}: component {role} is required but absent")]
    MissingComponent { case: EstimateCase, role: Role },
    #[error("base point {value} is not an equilibrium (residual {residual:e})")]
    NotAnEquilibrium { value: f64, residual: f64 },
    #[error("jacobian probe failed at coordinate {coordinate}: {source}")]
    Probe {
        coordinate: usize,
        #[source]
        source: EvalError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumPoint {
    pub value: f64,
    pub state: Vec<f64>,
    pub tag: String,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub lo: f64,
    pub hi: f64,
    pub grid: usize,
    pub tol: f64,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            lo: -10.0,
            hi: 10.0,
            grid: 2001,
            tol: 1e-12,
        }
    }
}

/// `psi(x) = h(x, .., x) - x`.
fn psi(rec: &dyn Recursion, x: f64) -> Result<f64, EvalError> {
    let state = vec![x; rec.order().max(1)];
    Ok(rec.next_value(0, &state)? - x)
}

/// `|h(x, .., x) - x|` and whether it is within `tol`.
pub fn check_equilibrium(rec: &dyn Recursion, x: f64, tol: f64) -> Result<(bool, f64), EvalError> {
    let residual = psi(rec, x)?.abs();
    Ok((residual <= tol, residual))
}

fn bisect(rec: &dyn Recursion, mut lo: f64, mut hi: f64, tol: f64) -> Option<(f64, f64)> {
    let mut plo = psi(rec, lo).ok()?;
    let mut best = (lo, plo.abs());
    for _ in 0..200 {
        let mid = lo + (hi - lo) / 2.0;
        if mid <= lo || mid >= hi {
            break;
        }
        let pm = psi(rec, mid).ok()?;
        if pm.abs() < best.1 {
            best = (mid, pm.abs());
        }
        if pm == 0.0 || (pm.abs() <= tol && (hi - lo) <= tol.max(f64::EPSILON * mid.abs())) {
            break;
        }
        if (pm < 0.0) == (plo < 0.0) {
            lo = mid;
            plo = pm;
        } else {
            hi = mid;
        }
    }
    if let Ok(ph) = psi(rec, hi) {
        if ph.abs() < best.1 {
            best = (hi, ph.abs());
        }
    }
    (best.1 <= tol).then_some(best)
}

/// Golden-section search for a tangential root (local minimum of `|psi|`).
fn touch_down(rec: &dyn Recursion, mut a: f64, mut b: f64, tol: f64) -> Option<(f64, f64)> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let abs_psi = |x: f64| psi(rec, x).map(f64::abs).unwrap_or(f64::INFINITY);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (abs_psi(c), abs_psi(d));
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = abs_psi(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = abs_psi(d);
        }
        if (b - a).abs() <= f64::EPSILON * (a.abs() + b.abs()) {
            break;
        }
    }
    let (x, r) = if fc < fd { (c, fc) } else { (d, fd) };
    (r <= tol).then_some((x, r))
}

/// All equilibria of `rec` in `[lo, hi]`: sign changes of `psi` on the grid
/// refined by bisection, grid points with `|psi| <= tol`, and tangential
/// roots. Sorted ascending; points closer than `10 tol` are merged.
pub fn find_equilibria(
    rec: &dyn Recursion,
    opts: &ScanOptions,
) -> Result<Vec<EquilibriumPoint>, EquilibriumError> {
    let ScanOptions { lo, hi, grid, tol } = *opts;
    if !(lo < hi) {
        return Err(EquilibriumError::InvalidInterval(lo, hi));
    }
    if grid < 2 {
        return Err(EquilibriumError::InvalidGrid(grid));
    }
    let xs: Vec<f64> = (0..grid)
        .map(|i| lo + (hi - lo) * (i as f64) / ((grid - 1) as f64))
        .collect();
    let ps: Vec<Option<f64>> = xs.par_iter().map(|&x| psi(rec, x).ok()).collect();

    let mut found: Vec<(f64, f64)> = Vec::new();
    for (x, p) in xs.iter().zip(&ps) {
        if let Some(p) = p {
            if p.abs() <= tol {
                found.push((*x, p.abs()));
            }
        }
    }
    for i in 0..grid - 1 {
        if let (Some(a), Some(b)) = (ps[i], ps[i + 1]) {
            if a.abs() > tol && b.abs() > tol && (a < 0.0) != (b < 0.0) {
                if let Some(root) = bisect(rec, xs[i], xs[i + 1], tol) {
                    found.push(root);
                }
            }
        }
    }
    for i in 1..grid - 1 {
        if let (Some(a), Some(b), Some(c)) = (ps[i - 1], ps[i], ps[i + 1]) {
            let same_sign = (a < 0.0) == (b < 0.0) && (b < 0.0) == (c < 0.0);
            if same_sign && b.abs() > tol && b.abs() < a.abs() && b.abs() <= c.abs() {
                if let Some(root) = touch_down(rec, xs[i - 1], xs[i + 1], tol) {
                    found.push(root);
                }
            }
        }
    }

    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (x, r) in found {
        match merged.last_mut() {
            Some(last) if (x - last.0).abs() <= 10.0 * tol => {
                if r < last.1 {
                    *last = (x, r);
                }
            }
            _ => merged.push((x, r)),
        }
    }
    let m = rec.order().max(1);
    let tag = rec.label();
    Ok(merged
        .into_iter()
        .map(|(value, residual)| EquilibriumPoint {
            value,
            state: vec![value; m],
            tag: tag.clone(),
            residual,
        })
        .collect())
}

/// Equilibrium closest to `hint`, if any.
pub fn nearest(points: &[EquilibriumPoint], hint: f64) -> Option<&EquilibriumPoint> {
    points
        .iter()
        .min_by(|a, b| (a.value - hint).abs().total_cmp(&(b.value - hint).abs()))
}

/// Periodic tail of a trajectory. `values` are the last `period` samples in
/// time order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OscillationPattern {
    pub period: usize,
    pub values: Vec<f64>,
    /// Largest `|x_n - x_{n-p}|` over the matched window.
    pub window_deviation: f64,
}

impl OscillationPattern {
    pub fn is_equilibrium(&self) -> bool {
        self.period == 1
    }

    /// Whether `expected` is a cyclic rotation of the pattern within `tol`.
    pub fn matches_cyclic(&self, expected: &[f64], tol: f64) -> bool {
        let p = self.period;
        expected.len() == p
            && (0..p).any(|shift| (0..p).all(|i| (self.values[(i + shift) % p] - expected[i]).abs() <= tol))
    }

    /// Replays the recursion for one period starting from the periodic
    /// extension of the pattern; returns the largest deviation from it.
    pub fn replay(&self, rec: &dyn Recursion) -> Result<f64, EvalError> {
        let p = self.period;
        let m = rec.order().max(1);
        let mut history: Vec<f64> = (0..m).map(|k| self.values[(p - 1 + p * m - k) % p]).collect();
        let mut worst: f64 = 0.0;
        for (i, expected) in self.values.iter().enumerate() {
            let x = rec.next_value(i + 1, &history)?;
            worst = worst.max((x - expected).abs());
            history.pop();
            history.insert(0, x);
        }
        Ok(worst)
    }
}

/// Smallest period `p <= max_period` such that the last `window` scalar
/// samples satisfy `|x_n - x_{n-p}| <= tol`.
pub fn detect_oscillation(
    traj: &Trajectory,
    max_period: usize,
    window: usize,
    tol: f64,
) -> Option<OscillationPattern> {
    let xs = traj.scalars();
    if max_period == 0 || window < 2 * max_period || xs.len() < window + max_period {
        return None;
    }
    let n = xs.len();
    (1..=max_period).find_map(|p| {
        let mut worst: f64 = 0.0;
        for k in n - window..n {
            let d = (xs[k] - xs[k - p]).abs();
            if !(d <= tol) {
                return None;
            }
            worst = worst.max(d);
        }
        Some(OscillationPattern {
            period: p,
            values: xs[n - p..].to_vec(),
            window_deviation: worst,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSteps {
    pub rel: f64,
    pub abs: f64,
}

impl Default for FdSteps {
    fn default() -> Self {
        Self { rel: 1e-6, abs: 1e-6 }
    }
}

/// Jacobian of an associate map: differenced gradient on top, shifted
/// identity below.
#[derive(Debug, Clone, PartialEq)]
pub struct CompanionMatrix {
    matrix: DMatrix<f64>,
}

impl CompanionMatrix {
    pub fn from_gradient(gradient: &[f64]) -> Self {
        let m = gradient.len();
        let mut matrix = DMatrix::zeros(m, m);
        for (j, g) in gradient.iter().enumerate() {
            matrix[(0, j)] = *g;
        }
        for i in 1..m {
            matrix[(i, i - 1)] = 1.0;
        }
        Self { matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn gradient(&self) -> Vec<f64> {
        self.matrix.row(0).iter().copied().collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.matrix
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }
}

/// Induced infinity norm (largest absolute row sum).
pub fn inf_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn vec_inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn jacobian(map: &VectorMap, at: &[f64], steps: FdSteps) -> Result<CompanionMatrix, EquilibriumError> {
    let m = map.dim();
    if at.len() != m {
        return Err(SystemError::StateLength {
            expected: m,
            got: at.len(),
        }
        .into());
    }
    let mut gradient = Vec::with_capacity(m);
    let mut probe = at.to_vec();
    for j in 0..m {
        let x = at[j];
        let h = steps.abs.max(steps.rel * x.abs());
        let (up, down) = (x + h, x - h);
        probe[j] = up;
        let fu = map.head(0, &probe).map_err(|source| EquilibriumError::Probe {
            coordinate: j,
            source,
        })?;
        probe[j] = down;
        let fd = map.head(0, &probe).map_err(|source| EquilibriumError::Probe {
            coordinate: j,
            source,
        })?;
        probe[j] = x;
        gradient.push((fu - fd) / (up - down));
    }
    Ok(CompanionMatrix::from_gradient(&gradient))
}

/// Which base/perturbation pairing an estimate linearizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateCase {
    /// f  ->  f + f~
    PerturbedFromNominal,
    /// f + f~ + g  ->  f + f~ + g + g~
    IncrementalFromControlled,
    /// f  ->  f + g
    ControlledFromNominal,
    /// f  ->  f + f~ + g
    PerturbedControlledFromNominal,
}

impl std::fmt::Display for EstimateCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimateCase::PerturbedFromNominal => "perturbed_from_nominal",
            EstimateCase::IncrementalFromControlled => "incremental_from_controlled",
            EstimateCase::ControlledFromNominal => "controlled_from_nominal",
            EstimateCase::PerturbedControlledFromNominal => "perturbed_controlled_from_nominal",
        })
    }
}

impl EstimateCase {
    pub const ALL: [EstimateCase; 4] = [
        EstimateCase::PerturbedFromNominal,
        EstimateCase::IncrementalFromControlled,
        EstimateCase::ControlledFromNominal,
        EstimateCase::PerturbedControlledFromNominal,
    ];

    pub fn base(self) -> ComponentSet {
        match self {
            EstimateCase::IncrementalFromControlled => ComponentSet::of(&[Role::F, Role::FTilde, Role::G]),
            _ => ComponentSet::of(&[Role::F]),
        }
    }

    pub fn perturbing(self) -> ComponentSet {
        match self {
            EstimateCase::PerturbedFromNominal => ComponentSet::of(&[Role::FTilde]),
            EstimateCase::IncrementalFromControlled => ComponentSet::of(&[Role::GTilde]),
            EstimateCase::ControlledFromNominal => ComponentSet::of(&[Role::G]),
            EstimateCase::PerturbedControlledFromNominal => ComponentSet::of(&[Role::FTilde, Role::G]),
        }
    }

    pub fn target(self) -> ComponentSet {
        self.base().union(self.perturbing())
    }

    /// Case matching a (base, perturbing) pair, if any.
    pub fn identify(base: ComponentSet, perturbing: ComponentSet) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.base() == base && c.perturbing() == perturbing)
    }

    /// Checks the order hypothesis and returns the working dimension.
    pub fn dimension(self, bundle: &SystemBundle) -> Result<usize, EquilibriumError> {
        let required = match self {
            EstimateCase::PerturbedFromNominal => vec![Role::FTilde],
            EstimateCase::IncrementalFromControlled => vec![Role::GTilde],
            EstimateCase::ControlledFromNominal => vec![Role::G],
            EstimateCase::PerturbedControlledFromNominal => vec![Role::FTilde, Role::G],
        };
        for role in required {
            if bundle.component(role).is_none() {
                return Err(EquilibriumError::MissingComponent { case: self, role });
            }
        }
        let m0 = bundle.component_order(Role::F);
        let mt = bundle.component_order(Role::FTilde);
        let mg = bundle.component_order(Role::G);
        let mgt = bundle.component_order(Role::GTilde);
        let fail = |detail: String| Err(EquilibriumError::OrderHypothesis { case: self, detail });
        match self {
            EstimateCase::PerturbedFromNominal if mt > m0 => {
                fail(format!("order of f_tilde ({mt}) exceeds order of f ({m0})"))
            }
            EstimateCase::ControlledFromNominal if mg > m0 => {
                fail(format!("order of g ({mg}) exceeds order of f ({m0})"))
            }
            EstimateCase::PerturbedControlledFromNominal if mt > m0 || mg > m0 => fail(format!(
                "orders of f_tilde ({mt}) and g ({mg}) must not exceed order of f ({m0})"
            )),
            EstimateCase::IncrementalFromControlled if mgt > m0.max(mt).max(mg) => fail(format!(
                "order of g_tilde ({mgt}) exceeds max(m0, m~, m_g) = {}",
                m0.max(mt).max(mg)
            )),
            EstimateCase::IncrementalFromControlled => Ok(m0.max(mt).max(mg)),
            _ => Ok(m0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Solvability {
    Unique,
    InfinitelyMany,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    pub fd: FdSteps,
    /// Absolute singular-value threshold; defaults to `1e-9 * max(1, ||I - M||)`.
    pub rank_tol: Option<f64>,
    /// Largest accepted residual of the base point.
    pub base_tol: f64,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            fd: FdSteps::default(),
            rank_tol: None,
            base_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearEstimate {
    pub case: EstimateCase,
    pub base: Vec<f64>,
    pub base_residual: f64,
    pub matrix: Vec<Vec<f64>>,
    pub shift_vector: Vec<f64>,
    pub rank: usize,
    pub augmented_rank: usize,
    pub rank_tol: f64,
    pub classification: Solvability,
    /// Present for `Unique`; least-norm member for `InfinitelyMany`.
    pub estimate: Option<Vec<f64>>,
    pub matrix_norm: f64,
    /// `||V|| / (1 - ||M||)`, only when `||M|| < 1`.
    pub banach_bound: Option<f64>,
}

impl LinearEstimate {
    /// `||X^ - X_base||`.
    pub fn shift_norm(&self) -> Option<f64> {
        self.estimate.as_ref().map(|e| {
            e.iter()
                .zip(&self.base)
                .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()))
        })
    }
}

fn rank_of(singular: &DVector<f64>, tol: f64) -> usize {
    singular.iter().filter(|s| **s > tol).count()
}

/// Solves `(I - M) D = V` with rank classification; exposed for callers that
/// already hold `M` and `V`.
pub fn classify_shift(
    m: &DMatrix<f64>,
    v: &DVector<f64>,
    rank_tol: Option<f64>,
) -> (Solvability, Option<DVector<f64>>, usize, usize, f64) {
    let n = m.nrows();
    let a = DMatrix::<f64>::identity(n, n) - m;
    let tol = rank_tol.unwrap_or_else(|| 1e-9 * inf_norm(&a).max(1.0));
    let svd = a.clone().svd(true, true);
    let rank = rank_of(&svd.singular_values, tol);
    let mut aug = DMatrix::<f64>::zeros(n, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&a);
    aug.set_column(n, v);
    let aug_rank = rank_of(&aug.svd(false, false).singular_values, tol);
    if aug_rank > rank {
        return (Solvability::None, None, rank, aug_rank, tol);
    }
    if rank == n {
        let d = a.clone().lu().solve(v).or_else(|| svd.solve(v, tol).ok());
        return (Solvability::Unique, d, rank, aug_rank, tol);
    }
    let d = svd.solve(v, tol).ok();
    (Solvability::InfinitelyMany, d, rank, aug_rank, tol)
}

/// First-order estimate of where the base equilibrium `base_value` moves
/// when the case's perturbing components are added.
pub fn linear_estimate(
    bundle: &SystemBundle,
    case: EstimateCase,
    base_value: f64,
    opts: &EstimateOptions,
) -> Result<LinearEstimate, EquilibriumError> {
    let dim = case.dimension(bundle)?;
    let base_view = bundle.view_components(case.base(), "base").with_order(dim);
    let (_, base_residual) = check_equilibrium(&base_view, base_value, opts.base_tol)?;
    if !(base_residual <= opts.base_tol) {
        return Err(EquilibriumError::NotAnEquilibrium {
            value: base_value,
            residual: base_residual,
        });
    }
    let base = vec![base_value; dim];
    let target = associate_map_of(bundle, case.target(), dim)?;
    let companion = jacobian(&target, &base, opts.fd)?;
    let mut shift = vec![0.0; dim];
    shift[0] = bundle.sum(case.perturbing(), &base)?;

    let m = companion.matrix().clone();
    let v = DVector::from_column_slice(&shift);
    let (classification, delta, rank, augmented_rank, rank_tol) = classify_shift(&m, &v, opts.rank_tol);
    let estimate = delta.map(|d| base.iter().zip(d.iter()).map(|(b, d)| b + d).collect());
    let matrix_norm = inf_norm(&m);
    let banach_bound = (matrix_norm < 1.0).then(|| vec_inf_norm(&shift) / (1.0 - matrix_norm));
    Ok(LinearEstimate {
        case,
        base,
        base_residual,
        matrix: companion.rows(),
        shift_vector: shift,
        rank,
        augmented_rank,
        rank_tol,
        classification,
        estimate,
        matrix_norm,
        banach_bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRow {
    pub epsilon: f64,
    pub base: Option<f64>,
    pub estimate: Option<Vec<f64>>,
    pub true_equilibrium: Option<f64>,
    pub error: Option<f64>,
    /// Set when a base or true equilibrium could not be found.
    pub flagged: bool,
}

/// Sweeps a parameterized bundle family and measures `||X^ - X_true||`.
///
/// At each epsilon the base equilibrium is the one nearest `hint`; the true
/// equilibrium of the target system is the one nearest the estimate.
pub fn estimate_error_curve<F>(
    family: F,
    case: EstimateCase,
    epsilons: &[f64],
    hint: f64,
    scan: &ScanOptions,
    opts: &EstimateOptions,
) -> Vec<ErrorRow>
where
    F: Fn(f64) -> SystemBundle + Sync,
{
    epsilons
        .par_iter()
        .map(|&epsilon| {
            let bundle = family(epsilon);
            let mut row = ErrorRow {
                epsilon,
                base: None,
                estimate: None,
                true_equilibrium: None,
                error: None,
                flagged: true,
            };
            let Ok(dim) = case.dimension(&bundle) else {
                return row;
            };
            let base_view = bundle.view_components(case.base(), "base").with_order(dim);
            let Some(base) = find_equilibria(&base_view, scan)
                .ok()
                .and_then(|eqs| nearest(&eqs, hint).map(|e| e.value))
            else {
                return row;
            };
            row.base = Some(base);
            let Ok(est) = linear_estimate(&bundle, case, base, opts) else {
                return row;
            };
            let Some(estimate) = est.estimate else {
                return row;
            };
            let target = bundle.view_components(case.target(), "target").with_order(dim);
            let truth = find_equilibria(&target, scan)
                .ok()
                .and_then(|eqs| nearest(&eqs, estimate[0]).map(|e| e.value));
            if let Some(t) = truth {
                row.error = Some(estimate.iter().fold(0.0_f64, |acc, e| acc.max((e - t).abs())));
                row.true_equilibrium = Some(t);
                row.flagged = false;
            }
            row.estimate = Some(estimate);
            row
        })
        .collect()
}
