//! Composite scalar recursions and their first-order vector lifts.
//!
//! A system is `x_n = f(..) + f~(..) + g(..) + g~(..)` where each component
//! reads its own number of past samples. The associate vector map on the
//! `m`-dimensional state `X = (x_{n-1}, .., x_{n-m})` is
//! `X -> (h(X), X_1, .., X_{m-1})`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{EvalError, LaggedExpr};

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("dimension {got} is smaller than the component order {needed}")]
    DimensionTooSmall { needed: usize, got: usize },
    #[error("state has {got} entries, expected {expected}")]
    StateLength { expected: usize, got: usize },
    #[error("cannot add vector maps of dimensions {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("evaluation failed at step {step}: {source}")]
    Eval {
        step: usize,
        #[source]
        source: EvalError,
    },
    #[error("component set is empty")]
    EmptyComponentSet,
}

/// Anything that produces the next sample from a most-recent-first history.
///
/// The step index is part of the signature for parity with time-varying
/// systems; every implementation in this crate is autonomous and ignores it.
pub trait Recursion: Send + Sync {
    fn order(&self) -> usize;

    /// `history[j - 1]` is `x_{n-j}`; `history.len()` may exceed the order.
    fn next_value(&self, step: usize, history: &[f64]) -> Result<f64, EvalError>;

    fn label(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    F,
    FTilde,
    G,
    GTilde,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::F, Role::FTilde, Role::G, Role::GTilde];

    pub fn name(self) -> &'static str {
        match self {
            Role::F => "f",
            Role::FTilde => "f_tilde",
            Role::G => "g",
            Role::GTilde => "g_tilde",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Subset of the four components, iterated in the fixed order f, f~, g, g~.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ComponentSet(u8);

impl ComponentSet {
    pub const EMPTY: ComponentSet = ComponentSet(0);

    pub fn of(roles: &[Role]) -> Self {
        ComponentSet(roles.iter().fold(0, |acc, r| acc | r.bit()))
    }

    pub fn contains(self, role: Role) -> bool {
        self.0 & role.bit() != 0
    }

    pub fn union(self, other: ComponentSet) -> Self {
        ComponentSet(self.0 | other.0)
    }

    pub fn intersects(self, other: ComponentSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn roles(self) -> impl Iterator<Item = Role> {
        Role::ALL.into_iter().filter(move |r| self.contains(*r))
    }
}

impl fmt::Display for ComponentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.roles().map(Role::name).collect();
        write!(f, "{}", names.join("+"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// f
    Nominal,
    /// f + f~
    Perturbed,
    /// f + g
    Controlled,
    /// f + f~ + g + g~
    ControlledPerturbed,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Nominal,
        Variant::Perturbed,
        Variant::Controlled,
        Variant::ControlledPerturbed,
    ];

    pub fn components(self) -> ComponentSet {
        match self {
            Variant::Nominal => ComponentSet::of(&[Role::F]),
            Variant::Perturbed => ComponentSet::of(&[Role::F, Role::FTilde]),
            Variant::Controlled => ComponentSet::of(&[Role::F, Role::G]),
            Variant::ControlledPerturbed => ComponentSet::of(&[Role::F, Role::FTilde, Role::G, Role::GTilde]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nominal => "nominal",
            Variant::Perturbed => "perturbed",
            Variant::Controlled => "controlled",
            Variant::ControlledPerturbed => "controlled_perturbed",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One of f, f~, g, g~ with its expression body.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMap {
    role: Role,
    body: LaggedExpr,
}

impl ComponentMap {
    pub fn new(role: Role, body: LaggedExpr) -> Self {
        Self { role, body }
    }

    pub fn parse(role: Role, text: &str, order: usize) -> Result<Self, crate::expr::ParseError> {
        Ok(Self::new(role, LaggedExpr::parse(text, order)?))
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn body(&self) -> &LaggedExpr {
        &self.body
    }

    pub fn order(&self) -> usize {
        self.body.order()
    }

    /// Evaluates on the leading `order` entries of `state`.
    pub fn eval(&self, state: &[f64]) -> Result<f64, EvalError> {
        self.body.evaluate_prefix(state)
    }
}

impl Recursion for ComponentMap {
    fn order(&self) -> usize {
        self.body.order()
    }

    fn next_value(&self, _step: usize, history: &[f64]) -> Result<f64, EvalError> {
        self.eval(history)
    }

    fn label(&self) -> String {
        self.role.name().to_string()
    }
}

/// The four-part system. Absent components are identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemBundle {
    f: ComponentMap,
    f_tilde: Option<ComponentMap>,
    g: Option<ComponentMap>,
    g_tilde: Option<ComponentMap>,
}

impl SystemBundle {
    pub fn new(f: LaggedExpr) -> Self {
        Self {
            f: ComponentMap::new(Role::F, f),
            f_tilde: None,
            g: None,
            g_tilde: None,
        }
    }

    pub fn with(mut self, role: Role, body: LaggedExpr) -> Self {
        let c = ComponentMap::new(role, body);
        match role {
            Role::F => self.f = c,
            Role::FTilde => self.f_tilde = Some(c),
            Role::G => self.g = Some(c),
            Role::GTilde => self.g_tilde = Some(c),
        }
        self
    }

    pub fn without(mut self, role: Role) -> Self {
        match role {
            Role::F => {}
            Role::FTilde => self.f_tilde = None,
            Role::G => self.g = None,
            Role::GTilde => self.g_tilde = None,
        }
        self
    }

    pub fn component(&self, role: Role) -> Option<&ComponentMap> {
        match role {
            Role::F => Some(&self.f),
            Role::FTilde => self.f_tilde.as_ref(),
            Role::G => self.g.as_ref(),
            Role::GTilde => self.g_tilde.as_ref(),
        }
    }

    pub fn f(&self) -> &ComponentMap {
        &self.f
    }

    pub fn present(&self) -> ComponentSet {
        ComponentSet::of(
            &Role::ALL
                .into_iter()
                .filter(|r| self.component(*r).is_some())
                .collect::<Vec<_>>(),
        )
    }

    /// Declared order of a component, 0 when absent.
    pub fn component_order(&self, role: Role) -> usize {
        self.component(role).map_or(0, ComponentMap::order)
    }

    /// `m`, the largest order among present components.
    pub fn order(&self) -> usize {
        Role::ALL
            .into_iter()
            .map(|r| self.component_order(r))
            .max()
            .unwrap_or(1)
    }

    pub fn set_order(&self, set: ComponentSet) -> usize {
        set.roles().map(|r| self.component_order(r)).max().unwrap_or(0)
    }

    /// Sum of the selected components on `state`, accumulated in role order.
    pub fn sum(&self, set: ComponentSet, state: &[f64]) -> Result<f64, EvalError> {
        let mut acc: Option<f64> = None;
        for role in set.roles() {
            if let Some(c) = self.component(role) {
                let v = c.eval(state)?;
                acc = Some(match acc {
                    None => v,
                    Some(a) => a + v,
                });
            }
        }
        Ok(acc.unwrap_or(0.0))
    }

    pub fn eval(&self, variant: Variant, state: &[f64]) -> Result<f64, EvalError> {
        self.sum(variant.components(), state)
    }

    /// The scalar recursion of a variant as a shareable object.
    pub fn view(&self, variant: Variant) -> BundleView {
        self.view_components(variant.components(), variant.name())
    }

    pub fn view_components(&self, set: ComponentSet, label: &str) -> BundleView {
        BundleView {
            bundle: Arc::new(self.clone()),
            set,
            order: self.order(),
            label: label.to_string(),
        }
    }
}

/// A bundle restricted to a component set, seen as a recursion of order `m`.
#[derive(Debug, Clone)]
pub struct BundleView {
    bundle: Arc<SystemBundle>,
    set: ComponentSet,
    order: usize,
    label: String,
}

impl BundleView {
    pub fn with_order(mut self, order: usize) -> Self {
        self.order = order;
        self
    }

    pub fn components(&self) -> ComponentSet {
        self.set
    }

    pub fn bundle(&self) -> &SystemBundle {
        &self.bundle
    }
}

impl Recursion for BundleView {
    fn order(&self) -> usize {
        self.order
    }

    fn next_value(&self, _step: usize, history: &[f64]) -> Result<f64, EvalError> {
        self.bundle.sum(self.set, history)
    }

    fn label(&self) -> String {
        self.label.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lift {
    /// Value in the first coordinate, shifted state below.
    Leading,
    /// Value in the first coordinate, zeros below.
    Additive,
}

#[derive(Clone)]
struct LiftTerm {
    lift: Lift,
    source: Arc<dyn Recursion>,
}

/// First-order self-map on `R^m` built as a sum of lifted scalar maps.
#[derive(Clone)]
pub struct VectorMap {
    dim: usize,
    terms: Vec<LiftTerm>,
    label: String,
}

impl fmt::Debug for VectorMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorMap")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .field(
                "terms",
                &self
                    .terms
                    .iter()
                    .map(|t| (t.lift, t.source.label()))
                    .collect::<Vec<_>>(),
            )
            .finish()
    }
}

impl VectorMap {
    fn single(lift: Lift, source: Arc<dyn Recursion>, dim: usize) -> Result<Self, SystemError> {
        let needed = source.order();
        if dim < needed || dim == 0 {
            return Err(SystemError::DimensionTooSmall {
                needed: needed.max(1),
                got: dim,
            });
        }
        let label = source.label();
        Ok(Self {
            dim,
            terms: vec![LiftTerm { lift, source }],
            label,
        })
    }

    /// Leading lift of a recursion, padded with ignored trailing arguments.
    pub fn from_recursion(source: Arc<dyn Recursion>, dim: usize) -> Result<Self, SystemError> {
        Self::single(Lift::Leading, source, dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Pointwise sum; terms keep their order so first coordinates accumulate
    /// left to right.
    pub fn plus(mut self, other: VectorMap) -> Result<Self, SystemError> {
        if self.dim != other.dim {
            return Err(SystemError::DimensionMismatch(self.dim, other.dim));
        }
        self.label = format!("{}+{}", self.label, other.label);
        self.terms.extend(other.terms);
        Ok(self)
    }

    /// First coordinate of the image.
    pub fn head(&self, step: usize, state: &[f64]) -> Result<f64, EvalError> {
        let mut acc: Option<f64> = None;
        for term in &self.terms {
            let v = term.source.next_value(step, state)?;
            acc = Some(match acc {
                None => v,
                Some(a) => a + v,
            });
        }
        Ok(acc.unwrap_or(0.0))
    }

    pub fn apply(&self, step: usize, state: &[f64]) -> Result<Vec<f64>, SystemError> {
        if state.len() != self.dim {
            return Err(SystemError::StateLength {
                expected: self.dim,
                got: state.len(),
            });
        }
        let head = self
            .head(step, state)
            .map_err(|source| SystemError::Eval { step, source })?;
        let mut out = Vec::with_capacity(self.dim);
        out.push(head);
        let leading = self.terms.iter().filter(|t| t.lift == Lift::Leading).count();
        for &prev in &state[..self.dim - 1] {
            out.push(match leading {
                0 => 0.0,
                1 => prev,
                k => (0..k).fold(0.0, |acc, _| acc + prev),
            });
        }
        Ok(out)
    }
}

/// `X -> (c(X_1..X_k), X_1, .., X_{m-1})`.
pub fn lift_leading(c: &ComponentMap, m: usize) -> Result<VectorMap, SystemError> {
    VectorMap::single(Lift::Leading, Arc::new(c.clone()), m)
}

/// `X -> (c(X_1..X_k), 0, .., 0)`.
pub fn lift_additive(c: &ComponentMap, m: usize) -> Result<VectorMap, SystemError> {
    VectorMap::single(Lift::Additive, Arc::new(c.clone()), m)
}

/// Associate vector map of a variant at the bundle's order `m`.
pub fn associate_map(bundle: &SystemBundle, variant: Variant) -> Result<VectorMap, SystemError> {
    let mut map = associate_map_of(bundle, variant.components(), bundle.order())?;
    map.label = variant.name().to_string();
    Ok(map)
}

/// Associate map of an arbitrary component set at dimension `dim`: the
/// leading lift goes to the first present component (f whenever selected),
/// all others enter additively.
pub fn associate_map_of(
    bundle: &SystemBundle,
    set: ComponentSet,
    dim: usize,
) -> Result<VectorMap, SystemError> {
    let mut map: Option<VectorMap> = None;
    for role in set.roles() {
        let Some(c) = bundle.component(role) else {
            continue;
        };
        map = Some(match map {
            None => lift_leading(c, dim)?,
            Some(acc) => acc.plus(lift_additive(c, dim)?)?,
        });
    }
    let mut map = map.ok_or(SystemError::EmptyComponentSet)?;
    map.label = set.to_string();
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RunStatus {
    Completed,
    /// A non-finite value appeared while computing step `step`; the run stops
    /// at the last finite state.
    DivergedNonfinite {
        step: usize,
    },
}

/// States `X_0, .., X_N` of a vector iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub label: String,
    pub states: Vec<Vec<f64>>,
    pub status: RunStatus,
}

impl Trajectory {
    pub fn initial(&self) -> &[f64] {
        &self.states[0]
    }

    /// First coordinate of every state, `x_0 .. x_N`.
    pub fn scalars(&self) -> Vec<f64> {
        self.states.iter().map(|s| s[0]).collect()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn diverged(&self) -> bool {
        self.status != RunStatus::Completed
    }
}

/// Applies `map` `steps` times starting from `x0` (the composed maps `G_n`).
pub fn iterate(map: &VectorMap, x0: &[f64], steps: usize) -> Result<Trajectory, SystemError> {
    if x0.len() != map.dim() {
        return Err(SystemError::StateLength {
            expected: map.dim(),
            got: x0.len(),
        });
    }
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.to_vec());
    let mut status = RunStatus::Completed;
    if x0.iter().any(|v| !v.is_finite()) {
        status = RunStatus::DivergedNonfinite { step: 0 };
    } else {
        for n in 1..=steps {
            match map.apply(n, states.last().unwrap()) {
                Ok(next) => states.push(next),
                Err(SystemError::Eval { step, source }) if source.is_non_finite() => {
                    status = RunStatus::DivergedNonfinite { step };
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(Trajectory {
        label: map.label().to_string(),
        states,
        status,
    })
}

/// Scalar samples `x_1 .. x_N` produced by a recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarRun {
    pub values: Vec<f64>,
    pub status: RunStatus,
}

/// Runs the scalar recursion directly. `history` is most recent first
/// (`x_0, x_{-1}, ..`) and must have the recursion's order.
pub fn run_recursion(rec: &dyn Recursion, history: &[f64], steps: usize) -> Result<ScalarRun, SystemError> {
    let m = rec.order();
    if history.len() != m {
        return Err(SystemError::StateLength {
            expected: m,
            got: history.len(),
        });
    }
    let mut buf = history.to_vec();
    let mut values = Vec::with_capacity(steps);
    let mut status = RunStatus::Completed;
    if buf.iter().any(|v| !v.is_finite()) {
        status = RunStatus::DivergedNonfinite { step: 0 };
    } else {
        for n in 1..=steps {
            match rec.next_value(n, &buf) {
                Ok(x) => {
                    values.push(x);
                    buf.pop();
                    buf.insert(0, x);
                }
                Err(source) if source.is_non_finite() => {
                    status = RunStatus::DivergedNonfinite { step: n };
                    break;
                }
                Err(source) => return Err(SystemError::Eval { step: n, source }),
            }
        }
    }
    Ok(ScalarRun { values, status })
}

/// Scalar recursion of a bundle variant at order `m`.
pub fn scalar_run(
    bundle: &SystemBundle,
    variant: Variant,
    history: &[f64],
    steps: usize,
) -> Result<ScalarRun, SystemError> {
    run_recursion(&bundle.view(variant), history, steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderReport {
    pub common_eq_uncontrolled_possible: bool,
    pub common_eq_all_possible: bool,
}

/// Necessary order conditions for shared equilibria between variants.
pub fn order_compatibility(bundle: &SystemBundle) -> OrderReport {
    let m0 = bundle.component_order(Role::F);
    let mt = bundle.component_order(Role::FTilde);
    let mg = bundle.component_order(Role::G);
    let mgt = bundle.component_order(Role::GTilde);
    let uncontrolled = m0 == m0.max(mt);
    OrderReport {
        common_eq_uncontrolled_possible: uncontrolled,
        common_eq_all_possible: uncontrolled && m0 == m0.max(mg).max(mgt),
    }
}
