//! Sampled growth certificates and stability verdicts.
//!
//! A certificate bounds `|h(X) - x_eq| / ||X - X_eq||` from below (`alpha`)
//! and above (`beta`) over samples of a region. `alpha > 1` evidences an
//! expanding equilibrium, `beta < 1` together with invariance of the region
//! a contracting one. All norms are max-norms. Bounds are sampled, not proven.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::equilibria::vec_inf_norm;
use crate::expr::EvalError;
use crate::system::{iterate, Recursion, RunStatus, SystemError, VectorMap};

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("state dimension {got} does not match {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("no sample could be evaluated ({skipped} skipped)")]
    NoSamples { skipped: usize },
    #[error("orders differ: {0} vs {1}")]
    OrderMismatch(usize, usize),
    #[error("start point coincides with the equilibrium")]
    StartAtEquilibrium,
    #[error(transparent)]
    System(#[from] SystemError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shape {
    /// Max-norm ball around the center.
    Ball {
        radius: f64,
    },
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionSpec {
    pub center: Vec<f64>,
    pub shape: Shape,
    pub samples: usize,
    pub seed: u64,
    /// Samples within this max-norm distance of the reference are dropped.
    pub exclusion: f64,
    /// Point the exclusion is measured from; the center when absent.
    pub reference: Option<Vec<f64>>,
}

impl RegionSpec {
    pub fn ball(center: Vec<f64>, radius: f64, samples: usize, seed: u64) -> Self {
        Self {
            center,
            shape: Shape::Ball { radius },
            samples,
            seed,
            exclusion: 1e-6 * radius,
            reference: None,
        }
    }

    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>, samples: usize, seed: u64) -> Self {
        let center: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let half = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| 0.5 * (b - a))
            .fold(f64::INFINITY, f64::min);
        Self {
            center,
            shape: Shape::Box { lo, hi },
            samples,
            seed,
            exclusion: 1e-6 * half,
            reference: None,
        }
    }

    pub fn with_exclusion(mut self, exclusion: f64) -> Self {
        self.exclusion = exclusion;
        self
    }

    pub fn with_reference(mut self, reference: Vec<f64>) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match &self.shape {
            Shape::Ball { radius } => (
                self.center.iter().map(|c| c - radius).collect(),
                self.center.iter().map(|c| c + radius).collect(),
            ),
            Shape::Box { lo, hi } => (lo.clone(), hi.clone()),
        }
    }

    /// Smallest half-width, the radius for balls.
    pub fn inner_radius(&self) -> f64 {
        let (lo, hi) = self.bounds();
        lo.iter()
            .zip(&hi)
            .map(|(a, b)| 0.5 * (b - a))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<(), StabilityError> {
        let bad = |msg: String| Err(StabilityError::InvalidRegion(msg));
        if self.center.is_empty() {
            return bad("center is empty".into());
        }
        match &self.shape {
            Shape::Ball { radius } if !(*radius > 0.0) => {
                return bad(format!("radius must be positive, got {radius}"))
            }
            Shape::Box { lo, hi } => {
                if lo.len() != self.dim() || hi.len() != self.dim() {
                    return bad("box bounds do not match the center dimension".into());
                }
                if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                    return bad("box needs lo < hi in every coordinate".into());
                }
            }
            _ => {}
        }
        if self.samples == 0 {
            return bad("sample count must be at least 1".into());
        }
        if !(self.exclusion >= 0.0 && self.exclusion < self.inner_radius()) {
            return bad(format!(
                "exclusion radius {} must lie in [0, {})",
                self.exclusion,
                self.inner_radius()
            ));
        }
        if let Some(r) = &self.reference {
            if r.len() != self.dim() {
                return bad("reference dimension does not match the center".into());
            }
        }
        Ok(())
    }

    /// Closed membership test.
    pub fn contains(&self, x: &[f64]) -> bool {
        let (lo, hi) = self.bounds();
        x.len() == lo.len()
            && x.iter()
                .zip(lo.iter().zip(&hi))
                .all(|(v, (a, b))| *a <= *v && *v <= *b)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Face midpoints of the region followed by `samples` seeded uniform draws;
/// points within the exclusion radius of the reference are left out.
pub fn sample_region(region: &RegionSpec) -> Result<Vec<Vec<f64>>, StabilityError> {
    region.validate()?;
    let m = region.dim();
    let (lo, hi) = region.bounds();
    let reference = region.reference.as_deref().unwrap_or(&region.center);
    let keep = |x: &[f64]| distance(x, reference) > region.exclusion;

    let mut out = Vec::with_capacity(region.samples + 2 * m);
    for i in 0..m {
        for bound in [&lo, &hi] {
            let mut probe: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
            probe[i] = bound[i];
            if keep(&probe) {
                out.push(probe);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(region.seed);
    let mut accepted = 0;
    let mut attempts = 0usize;
    let budget = region.samples.saturating_mul(1000).max(1000);
    while accepted < region.samples && attempts < budget {
        attempts += 1;
        let x: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| a + (b - a) * rng.random::<f64>())
            .collect();
        if keep(&x) {
            out.push(x);
            accepted += 1;
        }
    }
    Ok(out)
}

/// `|h(X) - x_eq| / ||X - X_eq||`.
pub fn growth_ratio(rec: &dyn Recursion, equilibrium: &[f64], x: &[f64]) -> Result<f64, EvalError> {
    let value = rec.next_value(0, x)?;
    Ok((value - equilibrium[0]).abs() / distance(x, equilibrium))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inflation {
    pub alpha_tilde: f64,
    pub beta_tilde: f64,
    /// `alpha (1 - alpha_tilde)`.
    pub alpha_inflated: f64,
    /// `beta (1 + beta_tilde)`.
    pub beta_inflated: f64,
    /// `alpha_tilde <= 1` and `beta_tilde < 1/beta - 1`.
    pub admissible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthCertificate {
    pub label: String,
    pub equilibrium: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub alpha_witness: Vec<f64>,
    pub beta_witness: Vec<f64>,
    pub sample_count: usize,
    pub skipped: usize,
    pub inflation: Option<Inflation>,
}

impl GrowthCertificate {
    /// Growth of the `n`-step product, `alpha^n`.
    pub fn alpha_product(&self, n: i32) -> f64 {
        self.alpha.powi(n)
    }

    pub fn beta_product(&self, n: i32) -> f64 {
        self.beta.powi(n)
    }
}

/// Infimum and supremum of the growth ratio over `samples`. Samples where
/// the recursion cannot be evaluated, or that coincide with the
/// equilibrium, are skipped and counted.
pub fn growth_certificate(
    rec: &dyn Recursion,
    equilibrium: &[f64],
    samples: &[Vec<f64>],
    inflation: Option<(f64, f64)>,
) -> Result<GrowthCertificate, StabilityError> {
    let m = rec.order();
    if equilibrium.len() != m {
        return Err(StabilityError::Dimension {
            expected: m,
            got: equilibrium.len(),
        });
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != m) {
        return Err(StabilityError::Dimension {
            expected: m,
            got: bad.len(),
        });
    }
    let ratios: Vec<Option<f64>> = samples
        .par_iter()
        .map(|x| growth_ratio(rec, equilibrium, x).ok().filter(|r| r.is_finite()))
        .collect();

    let mut lo: Option<(f64, usize)> = None;
    let mut hi: Option<(f64, usize)> = None;
    let mut skipped = 0;
    for (i, r) in ratios.iter().enumerate() {
        let Some(r) = *r else {
            skipped += 1;
            continue;
        };
        if lo.is_none_or(|(v, _)| r < v) {
            lo = Some((r, i));
        }
        if hi.is_none_or(|(v, _)| r > v) {
            hi = Some((r, i));
        }
    }
    let (Some((alpha, ia)), Some((beta, ib))) = (lo, hi) else {
        return Err(StabilityError::NoSamples { skipped });
    };
    let inflation = inflation.map(|(alpha_tilde, beta_tilde)| Inflation {
        alpha_tilde,
        beta_tilde,
        alpha_inflated: alpha * (1.0 - alpha_tilde),
        beta_inflated: beta * (1.0 + beta_tilde),
        admissible: alpha_tilde <= 1.0 && beta_tilde < 1.0 / beta - 1.0,
    });
    Ok(GrowthCertificate {
        label: rec.label(),
        equilibrium: equilibrium.to_vec(),
        alpha,
        beta,
        alpha_witness: samples[ia].clone(),
        beta_witness: samples[ib].clone(),
        sample_count: samples.len() - skipped,
        skipped,
        inflation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "result")]
pub enum Invariance {
    Pass {
        checked: usize,
    },
    /// `image` is absent when the map could not be evaluated at `point`.
    Fail {
        point: Vec<f64>,
        image: Option<Vec<f64>>,
    },
}

impl Invariance {
    pub fn passed(&self) -> bool {
        matches!(self, Invariance::Pass { .. })
    }
}

/// Checks `map(X) in S` for every sample of `S` (face probes included).
pub fn check_invariance(map: &VectorMap, region: &RegionSpec) -> Result<Invariance, StabilityError> {
    if map.dim() != region.dim() {
        return Err(StabilityError::Dimension {
            expected: map.dim(),
            got: region.dim(),
        });
    }
    let samples = sample_region(region)?;
    let images: Vec<Option<Vec<f64>>> = samples.par_iter().map(|x| map.apply(0, x).ok()).collect();
    for (x, image) in samples.iter().zip(images) {
        match image {
            Some(y) if region.contains(&y) => {}
            image => {
                return Ok(Invariance::Fail {
                    point: x.clone(),
                    image,
                })
            }
        }
    }
    Ok(Invariance::Pass {
        checked: samples.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityVerdict {
    AsymptoticallyStable,
    Unstable,
    Inconclusive,
}

impl StabilityVerdict {
    /// Verdict for the uncontrolled side: only instability is tested.
    pub fn expanding(alpha: f64) -> Self {
        if alpha > 1.0 {
            StabilityVerdict::Unstable
        } else {
            StabilityVerdict::Inconclusive
        }
    }

    /// Verdict for the controlled side: only asymptotic stability is tested.
    pub fn contracting(beta: f64, invariant: bool) -> Self {
        if beta < 1.0 && invariant {
            StabilityVerdict::AsymptoticallyStable
        } else {
            StabilityVerdict::Inconclusive
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SideReport {
    pub verdict: StabilityVerdict,
    pub certificate: GrowthCertificate,
    pub invariance: Invariance,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub uncontrolled: SideReport,
    pub controlled: SideReport,
    pub region: RegionSpec,
}

impl Classification {
    pub fn verdicts(&self) -> (StabilityVerdict, StabilityVerdict) {
        (self.uncontrolled.verdict, self.controlled.verdict)
    }
}

/// Instability of the uncontrolled equilibrium and asymptotic stability of
/// the controlled one, each with respect to `region`.
///
/// The controlled verdict requires the controlled map to keep the region
/// invariant. The uncontrolled map's invariance is reported but does not
/// gate anything: an expanding map cannot keep a bounded neighbourhood of
/// its equilibrium invariant.
pub fn classify(
    uncontrolled: (&VectorMap, &dyn Recursion, &[f64]),
    controlled: (&VectorMap, &dyn Recursion, &[f64]),
    region: &RegionSpec,
) -> Result<Classification, StabilityError> {
    let (umap, urec, ueq) = uncontrolled;
    let (cmap, crec, ceq) = controlled;
    if umap.dim() != cmap.dim() {
        return Err(StabilityError::OrderMismatch(umap.dim(), cmap.dim()));
    }
    let side = |map: &VectorMap, rec: &dyn Recursion, eq: &[f64], uncontrolled: bool| {
        let samples = sample_region(&region.clone().with_reference(eq.to_vec()))?;
        let certificate = growth_certificate(rec, eq, &samples, None)?;
        let invariance = check_invariance(map, region)?;
        let verdict = if uncontrolled {
            StabilityVerdict::expanding(certificate.alpha)
        } else {
            StabilityVerdict::contracting(certificate.beta, invariance.passed())
        };
        Ok::<_, StabilityError>(SideReport {
            verdict,
            certificate,
            invariance,
        })
    };
    Ok(Classification {
        uncontrolled: side(umap, urec, ueq, true)?,
        controlled: side(cmap, crec, ceq, false)?,
        region: region.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionTrace {
    /// `||X_n - X_eq|| / ||X_0 - X_eq||` for `n = 0..`.
    pub ratios: Vec<f64>,
    /// Geometric mean of the step ratios.
    pub rate: f64,
    pub expanding: bool,
    pub status: RunStatus,
}

impl ContractionTrace {
    /// `ratios[n] <= beta^n (1 + slack)` for every recorded step.
    pub fn within_envelope(&self, beta: f64, slack: f64) -> bool {
        self.ratios
            .iter()
            .enumerate()
            .all(|(n, r)| *r <= beta.powi(n as i32) * (1.0 + slack))
    }
}

pub fn contraction_trace(
    map: &VectorMap,
    equilibrium: &[f64],
    start: &[f64],
    steps: usize,
) -> Result<ContractionTrace, StabilityError> {
    let d0 = distance(start, equilibrium);
    if d0 == 0.0 {
        return Err(StabilityError::StartAtEquilibrium);
    }
    let traj = iterate(map, start, steps)?;
    let ratios: Vec<f64> = traj
        .states
        .iter()
        .map(|x| distance(x, equilibrium) / d0)
        .collect();
    let n = ratios.len() - 1;
    let last = ratios[n];
    let rate = if n == 0 {
        1.0
    } else if last == 0.0 {
        0.0
    } else {
        (last.ln() / n as f64).exp()
    };
    let diverged = traj.diverged();
    Ok(ContractionTrace {
        ratios,
        rate,
        expanding: diverged || rate > 1.0,
        status: traj.status,
    })
}

/// Largest max-norm distance among a set of states, used for reporting.
pub fn spread(states: &[Vec<f64>], center: &[f64]) -> f64 {
    states
        .iter()
        .map(|s| vec_inf_norm(&s.iter().zip(center).map(|(a, b)| a - b).collect::<Vec<_>>()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::LaggedExpr;
    use crate::system::{associate_map, Role, SystemBundle, Variant};
    use proptest::prelude::*;

    fn bundle(text: &str, order: usize) -> SystemBundle {
        SystemBundle::new(LaggedExpr::parse(text, order).unwrap())
    }

    fn unit_ball(samples: usize) -> RegionSpec {
        RegionSpec::ball(vec![0.0], 1.0, samples, 7)
    }

    #[test]
    fn face_probes_and_determinism() {
        let s = sample_region(&unit_ball(50)).unwrap();
        assert!(s.contains(&vec![-1.0]) && s.contains(&vec![1.0]));
        assert_eq!(s.len(), 52);
        assert_eq!(s, sample_region(&unit_ball(50)).unwrap());
        assert_ne!(s, sample_region(&unit_ball(50).with_seed(8)).unwrap());
        let two = sample_region(&RegionSpec::ball(vec![0.0, 1.0], 0.5, 10, 1)).unwrap();
        assert!(two.contains(&vec![0.0, 0.5]) && two.contains(&vec![0.0, 1.5]));
        assert!(two.contains(&vec![-0.5, 1.0]) && two.contains(&vec![0.5, 1.0]));
    }

    #[test]
    fn exclusion_filter() {
        let s = sample_region(&unit_ball(2000).with_exclusion(0.1)).unwrap();
        assert!(s.iter().all(|x| x[0].abs() > 0.1));
        assert_eq!(s.len(), 2002);
    }

    #[test]
    fn box_regions() {
        let r = RegionSpec::boxed(vec![0.0, -1.0], vec![2.0, 1.0], 100, 3);
        let s = sample_region(&r).unwrap();
        assert!(s.iter().all(|x| r.contains(x)));
        assert!(s.contains(&vec![0.0, 0.0]) && s.contains(&vec![1.0, 1.0]));
    }

    #[test]
    fn region_validation() {
        assert!(RegionSpec::ball(vec![0.0], 0.0, 1, 0).validate().is_err());
        assert!(RegionSpec::ball(vec![0.0], 1.0, 0, 0).validate().is_err());
        assert!(unit_ball(1).with_exclusion(1.0).validate().is_err());
        assert!(RegionSpec::boxed(vec![1.0], vec![0.0], 1, 0).validate().is_err());
    }

    #[test]
    fn linear_certificates() {
        let samples = sample_region(&unit_ball(500)).unwrap();
        for (text, rate) in [("2*x[1]", 2.0), ("0.5*x[1]", 0.5)] {
            let b = bundle(text, 1);
            let c = growth_certificate(&b.view(Variant::Nominal), &[0.0], &samples, None).unwrap();
            assert!((c.alpha - rate).abs() < 1e-15 && (c.beta - rate).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_certificate_bounds() {
        let b = bundle("2*x[1] + 0.1*x[1]^2", 1);
        let samples = sample_region(&RegionSpec::ball(vec![0.0], 0.5, 2000, 11)).unwrap();
        let c = growth_certificate(&b.view(Variant::Nominal), &[0.0], &samples, Some((0.5, 0.1))).unwrap();
        // |2 + 0.1x| on |x| <= 0.5, attained at the face probes
        assert!((c.alpha - 1.95).abs() < 1e-12);
        assert!((c.beta - 2.05).abs() < 1e-12);
        assert_eq!(c.alpha_witness, vec![-0.5]);
        assert_eq!(c.beta_witness, vec![0.5]);
        let inf = c.inflation.unwrap();
        assert_eq!(inf.alpha_inflated, c.alpha * 0.5);
        // beta > 1 leaves no admissible beta_tilde
        assert!(!inf.admissible);
    }

    #[test]
    fn witnesses_reproduce() {
        let b = bundle("sin(3*x[1]) + 0.4*x[2]", 2);
        let eq = [0.0, 0.0];
        let samples = sample_region(&RegionSpec::ball(eq.to_vec(), 0.7, 300, 5)).unwrap();
        let view = b.view(Variant::Nominal);
        let c = growth_certificate(&view, &eq, &samples, None).unwrap();
        assert_eq!(
            growth_ratio(&view, &eq, &c.alpha_witness).unwrap().to_bits(),
            c.alpha.to_bits()
        );
        assert_eq!(
            growth_ratio(&view, &eq, &c.beta_witness).unwrap().to_bits(),
            c.beta.to_bits()
        );
    }

    #[test]
    fn failing_samples_are_skipped() {
        let b = bundle("1/(x[1] - 0.5)", 1);
        let samples = vec![vec![0.5], vec![0.25], vec![-0.25]];
        let c = growth_certificate(&b.view(Variant::Nominal), &[0.0], &samples, None).unwrap();
        assert_eq!((c.sample_count, c.skipped), (2, 1));
        assert!(matches!(
            growth_certificate(&b.view(Variant::Nominal), &[0.0], &samples[..1], None),
            Err(StabilityError::NoSamples { skipped: 1 })
        ));
    }

    #[test]
    fn invariance() {
        let region = unit_ball(200);
        let contract = associate_map(&bundle("0.5*x[1]", 1), Variant::Nominal).unwrap();
        assert!(check_invariance(&contract, &region).unwrap().passed());
        let expand = associate_map(&bundle("2*x[1]", 1), Variant::Nominal).unwrap();
        match check_invariance(&expand, &region).unwrap() {
            Invariance::Fail { point, image } => {
                // face probes are checked first
                assert_eq!(point, vec![-1.0]);
                assert_eq!(image, Some(vec![-2.0]));
            }
            other => panic!("unexpected {other:?}"),
        }
        let identity = associate_map(&bundle("x[1]", 1), Variant::Nominal).unwrap();
        let off_center = RegionSpec::ball(vec![3.0], 0.25, 100, 2);
        assert!(check_invariance(&identity, &off_center).unwrap().passed());
    }

    fn pair(text_u: &str, text_c: &str, region: &RegionSpec) -> Classification {
        let bu = bundle(text_u, 1);
        let bc = bundle(text_c, 1);
        let mu = associate_map(&bu, Variant::Nominal).unwrap();
        let mc = associate_map(&bc, Variant::Nominal).unwrap();
        classify(
            (&mu, &bu.view(Variant::Nominal), &[0.0]),
            (&mc, &bc.view(Variant::Nominal), &[0.0]),
            region,
        )
        .unwrap()
    }

    #[test]
    fn classify_expanding_versus_contracting() {
        let c = pair("2*x[1]", "0.5*x[1]", &unit_ball(1000));
        assert_eq!(
            c.verdicts(),
            (StabilityVerdict::Unstable, StabilityVerdict::AsymptoticallyStable)
        );
        assert!(!c.uncontrolled.invariance.passed());
        assert!(c.controlled.invariance.passed());
    }

    #[test]
    fn classify_identity_is_inconclusive() {
        let c = pair("x[1]", "x[1]", &unit_ball(1000));
        assert_eq!(
            c.verdicts(),
            (StabilityVerdict::Inconclusive, StabilityVerdict::Inconclusive)
        );
    }

    #[test]
    fn classify_shifted_pair() {
        // perturbed 2x + 0.1 has its equilibrium at -0.1; the controlled
        // system 0.7x + 0.13 contracts at rate 0.7 about 13/30
        let bu = bundle("2*x[1]", 1).with(Role::FTilde, LaggedExpr::parse("0.1", 1).unwrap());
        let bc = bu
            .clone()
            .with(Role::G, LaggedExpr::parse("-1.3*x[1]", 1).unwrap())
            .with(Role::GTilde, LaggedExpr::parse("0.03", 1).unwrap());
        let xcp = 0.13 / 0.3;
        let region = RegionSpec::ball(vec![xcp], 1.0, 2000, 9);
        let c = classify(
            (
                &associate_map(&bu, Variant::Perturbed).unwrap(),
                &bu.view(Variant::Perturbed),
                &[-0.1],
            ),
            (
                &associate_map(&bc, Variant::ControlledPerturbed).unwrap(),
                &bc.view(Variant::ControlledPerturbed),
                &[xcp],
            ),
            &region,
        )
        .unwrap();
        assert_eq!(
            c.verdicts(),
            (StabilityVerdict::Unstable, StabilityVerdict::AsymptoticallyStable)
        );
        assert!((c.controlled.certificate.beta - 0.7).abs() < 1e-9);
    }

    #[test]
    fn classify_rejects_order_mismatch() {
        let b1 = bundle("x[1]", 1);
        let b2 = bundle("x[2]", 2);
        let r = classify(
            (
                &associate_map(&b1, Variant::Nominal).unwrap(),
                &b1.view(Variant::Nominal),
                &[0.0],
            ),
            (
                &associate_map(&b2, Variant::Nominal).unwrap(),
                &b2.view(Variant::Nominal),
                &[0.0, 0.0],
            ),
            &unit_ball(10),
        );
        assert!(matches!(r, Err(StabilityError::OrderMismatch(1, 2))));
    }

    #[test]
    fn traces() {
        let half = associate_map(&bundle("0.5*x[1]", 1), Variant::Nominal).unwrap();
        let t = contraction_trace(&half, &[0.0], &[1.0], 10).unwrap();
        for (n, r) in t.ratios.iter().enumerate() {
            assert_eq!(*r, 0.5f64.powi(n as i32));
        }
        assert!((t.rate - 0.5).abs() < 1e-15);
        assert!(!t.expanding);
        assert!(t.within_envelope(0.5, 1e-9));

        let double = associate_map(&bundle("2*x[1]", 1), Variant::Nominal).unwrap();
        let t = contraction_trace(&double, &[0.0], &[1.0], 10).unwrap();
        assert_eq!(t.ratios[10], 1024.0);
        assert!(t.expanding);
        assert!(matches!(
            contraction_trace(&double, &[0.0], &[0.0], 10),
            Err(StabilityError::StartAtEquilibrium)
        ));
    }

    proptest! {
        #[test]
        fn more_samples_widen_bounds(extra in 1usize..200, seed in 0u64..1000) {
            let b = bundle("0.8*x[1] + 0.3*x[1]^2 - 0.2*x[2]", 2);
            let view = b.view(Variant::Nominal);
            let base = RegionSpec::ball(vec![0.0, 0.0], 0.6, 50, seed);
            let few = growth_certificate(&view, &[0.0, 0.0], &sample_region(&base).unwrap(), None).unwrap();
            let more_region = RegionSpec { samples: 50 + extra, ..base };
            let more = growth_certificate(&view, &[0.0, 0.0], &sample_region(&more_region).unwrap(), None).unwrap();
            prop_assert!(more.alpha <= few.alpha);
            prop_assert!(more.beta >= few.beta);
        }

        #[test]
        fn contraction_envelope(a in -0.9f64..0.9, c in -0.05f64..0.05, seed in 0u64..500) {
            let b = bundle(&format!("{a}*x[1] + {c}*x[1]^2"), 1);
            let view = b.view(Variant::Nominal);
            let map = associate_map(&b, Variant::Nominal).unwrap();
            let region = RegionSpec::ball(vec![0.0], 1.0, 200, seed);
            let samples = sample_region(&region).unwrap();
            let cert = growth_certificate(&view, &[0.0], &samples, None).unwrap();
            let inv = check_invariance(&map, &region).unwrap();
            prop_assume!(cert.beta < 1.0 && inv.passed());
            // |a + c x| is maximized on a face, so the sampled beta bounds every step
            for x0 in samples.iter().take(16) {
                let t = contraction_trace(&map, &[0.0], x0, 60).unwrap();
                prop_assert!(t.within_envelope(cert.beta, 1e-9));
            }
        }

        #[test]
        fn instability_escape(a in 1.2f64..3.0, seed in 0u64..500) {
            let b = bundle(&format!("{a}*x[1] + 0.01*x[1]^2"), 1);
            let view = b.view(Variant::Nominal);
            let region = RegionSpec::ball(vec![0.0], 1.0, 200, seed);
            let samples = sample_region(&region).unwrap();
            let cert = growth_certificate(&view, &[0.0], &samples, None).unwrap();
            prop_assert!(cert.alpha > 1.0);
            let map = associate_map(&b, Variant::Nominal).unwrap();
            for x0 in samples.iter().take(16) {
                let d = x0[0].abs();
                let traj = iterate(&map, x0, 40).unwrap();
                for (n, x) in traj.states.iter().enumerate() {
                    if !region.contains(x) {
                        break;
                    }
                    prop_assert!(x[0].abs() >= cert.alpha.powi(n as i32) * d * (1.0 - 1e-12));
                }
            }
        }
    }
}
