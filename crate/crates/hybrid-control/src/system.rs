//! Hybrid system structure: locations, vector fields, jump maps, switching
//! manifolds, the transition automaton and the standing-assumption checks.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::types::{
    fd_field_jacobian, fd_gradient, halton_box, Control, EventId, FieldFn, FieldJacFn, GradFn,
    JumpFn, JumpJacFn, Loc, ScalarFn, State, SwitchKind,
};

/// Continuous-state jump attached to an event.
#[derive(Clone)]
pub struct JumpMap {
    pub map: JumpFn,
    pub jacobian: JumpJacFn,
}

impl JumpMap {
    pub fn new(map: JumpFn, jacobian: JumpJacFn) -> Self {
        JumpMap { map, jacobian }
    }

    /// Identity jump on an `n`-dimensional space.
    pub fn identity(n: usize) -> Self {
        JumpMap {
            map: Arc::new(|x: &State| x.clone()),
            jacobian: Arc::new(move |_x: &State| DMatrix::identity(n, n)),
        }
    }
}

/// Codimension-1 switching surface `m(x) = 0` guarding one autonomous pair.
#[derive(Clone)]
pub struct Manifold {
    pub value: ScalarFn,
    pub gradient: GradFn,
    /// Event fired on a transversal arrival.
    pub event: EventId,
}

/// Hybrid system structure: locations with vector fields and compact control
/// boxes, an event set with jump maps, a transition automaton, and switching
/// manifolds for the autonomous pairs.
#[derive(Clone)]
pub struct HybridSystem {
    state_dims: Vec<usize>,
    control_dims: Vec<usize>,
    fields: Vec<FieldFn>,
    field_jacobians: Vec<FieldJacFn>,
    control_lower: Vec<DVector<f64>>,
    control_upper: Vec<DVector<f64>>,
    event_names: Vec<String>,
    automaton: BTreeMap<(Loc, EventId), Loc>,
    jumps: BTreeMap<EventId, JumpMap>,
    manifolds: BTreeMap<(Loc, Loc), Manifold>,
}

impl HybridSystem {
    pub fn builder() -> HybridSystemBuilder {
        HybridSystemBuilder::default()
    }

    pub fn num_locations(&self) -> usize {
        self.state_dims.len()
    }

    pub fn state_dim(&self, q: Loc) -> usize {
        self.state_dims[q.0]
    }

    pub fn control_dim(&self, q: Loc) -> usize {
        self.control_dims[q.0]
    }

    pub fn field(&self, q: Loc) -> &FieldFn {
        &self.fields[q.0]
    }

    pub fn field_jacobian(&self, q: Loc) -> &FieldJacFn {
        &self.field_jacobians[q.0]
    }

    /// Componentwise control bounds of the compact box `U_q`.
    pub fn control_bounds(&self, q: Loc) -> (&DVector<f64>, &DVector<f64>) {
        (&self.control_lower[q.0], &self.control_upper[q.0])
    }

    /// Center of the control box, the default start for control searches.
    pub fn control_box_center(&self, q: Loc) -> DVector<f64> {
        0.5 * (&self.control_lower[q.0] + &self.control_upper[q.0])
    }

    /// Clamp a control vector into `U_q` componentwise.
    pub fn project_control(&self, q: Loc, u: &Control) -> Control {
        let (lo, hi) = self.control_bounds(q);
        DVector::from_fn(u.len(), |i, _| u[i].max(lo[i]).min(hi[i]))
    }

    /// Check `u` in `U_q` up to a tiny tolerance; out-of-bounds values are
    /// rejected, never clipped.
    pub fn check_control(&self, q: Loc, u: &Control, time: f64) -> Result<()> {
        let (lo, hi) = self.control_bounds(q);
        if u.len() != lo.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: u.len(),
                context: format!("control for location {:?}", q),
            });
        }
        for i in 0..u.len() {
            let tol = 1e-9 * (1.0 + lo[i].abs().max(hi[i].abs()));
            if u[i] < lo[i] - tol || u[i] > hi[i] + tol {
                return Err(Error::ControlOutOfBounds {
                    time,
                    component: i,
                    value: u[i],
                    lo: lo[i],
                    hi: hi[i],
                });
            }
        }
        Ok(())
    }

    pub fn num_events(&self) -> usize {
        self.event_names.len()
    }

    pub fn event_name(&self, e: EventId) -> &str {
        &self.event_names[e.0]
    }

    pub fn event_by_name(&self, name: &str) -> Option<EventId> {
        self.event_names.iter().position(|n| n == name).map(EventId)
    }

    /// Automaton transition `Γ(q, σ)`, if defined.
    pub fn transition(&self, q: Loc, sigma: EventId) -> Option<Loc> {
        self.automaton.get(&(q, sigma)).copied()
    }

    pub fn jump_map(&self, sigma: EventId) -> Option<&JumpMap> {
        self.jumps.get(&sigma)
    }

    pub fn manifold(&self, from: Loc, to: Loc) -> Option<&Manifold> {
        self.manifolds.get(&(from, to))
    }

    /// All manifolds guarding transitions out of `q`.
    pub fn manifolds_from(&self, q: Loc) -> impl Iterator<Item = (Loc, &Manifold)> {
        self.manifolds
            .iter()
            .filter(move |((from, _), _)| *from == q)
            .map(|((_, to), m)| (*to, m))
    }

    /// Apply the event `sigma` in `(q, x)`: returns `(Γ(q,σ), ξ_σ(x))`.
    pub fn jump(&self, sigma: EventId, q: Loc, x: &State) -> Result<(Loc, State)> {
        if x.len() != self.state_dim(q) {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(q),
                got: x.len(),
                context: format!("jump input state in location {:?}", q),
            });
        }
        let target = self
            .transition(q, sigma)
            .ok_or(Error::TransitionUndefined { loc: q, event: sigma })?;
        let x_next = match self.jumps.get(&sigma) {
            Some(j) => (j.map)(x),
            None => x.clone(),
        };
        if x_next.len() != self.state_dim(target) {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(target),
                got: x_next.len(),
                context: format!("jump output for event {:?}", sigma),
            });
        }
        Ok((target, x_next))
    }

    /// Evaluate the switching manifold `m_{q,r}` at `x`.
    pub fn manifold_value(&self, q: Loc, r: Loc, x: &State) -> Result<f64> {
        let m = self
            .manifolds
            .get(&(q, r))
            .ok_or(Error::NoManifold { from: q, to: r })?;
        Ok((m.value)(x))
    }
}

/// Builder for [`HybridSystem`].
///
/// Event 0 (the identity) is pre-registered. Locations and events are added
/// first; transitions then wire them together.
pub struct HybridSystemBuilder {
    state_dims: Vec<usize>,
    control_dims: Vec<usize>,
    fields: Vec<Option<FieldFn>>,
    field_jacobians: Vec<Option<FieldJacFn>>,
    control_lower: Vec<DVector<f64>>,
    control_upper: Vec<DVector<f64>>,
    event_names: Vec<String>,
    automaton: BTreeMap<(Loc, EventId), Loc>,
    jumps: BTreeMap<EventId, JumpMap>,
    manifolds: BTreeMap<(Loc, Loc), Manifold>,
    error: Option<Error>,
}

impl Default for HybridSystemBuilder {
    fn default() -> Self {
        HybridSystemBuilder {
            state_dims: Vec::new(),
            control_dims: Vec::new(),
            fields: Vec::new(),
            field_jacobians: Vec::new(),
            control_lower: Vec::new(),
            control_upper: Vec::new(),
            event_names: vec!["id".to_string()],
            automaton: BTreeMap::new(),
            jumps: BTreeMap::new(),
            manifolds: BTreeMap::new(),
            error: None,
        }
    }
}

impl HybridSystemBuilder {
    /// Add a location with its vector field and control box; returns its id.
    ///
    /// The state Jacobian defaults to a central finite difference of the
    /// field; use [`Self::field_jacobian`] to provide the exact one.
    pub fn location(
        mut self,
        field: FieldFn,
        control_lower: Vec<f64>,
        control_upper: Vec<f64>,
        state_dim: usize,
    ) -> Self {
        if control_lower.len() != control_upper.len() {
            self.error = Some(Error::Config(
                "control bound vectors have different lengths".into(),
            ));
            return self;
        }
        if control_lower
            .iter()
            .zip(control_upper.iter())
            .any(|(l, h)| l > h)
        {
            self.error = Some(Error::Config(
                "control lower bound exceeds upper bound".into(),
            ));
            return self;
        }
        self.state_dims.push(state_dim);
        self.control_dims.push(control_lower.len());
        self.fields.push(Some(field));
        self.field_jacobians.push(None);
        self.control_lower.push(DVector::from_vec(control_lower));
        self.control_upper.push(DVector::from_vec(control_upper));
        self
    }

    /// Attach an exact state Jacobian to the most recently added location.
    pub fn field_jacobian(mut self, jac: FieldJacFn) -> Self {
        if let Some(slot) = self.field_jacobians.last_mut() {
            *slot = Some(jac);
        }
        self
    }

    /// Register a named event; returns the builder (look the id up later with
    /// [`HybridSystem::event_by_name`]) .
    pub fn event(mut self, name: &str) -> Self {
        self.event_names.push(name.to_string());
        self
    }

    /// Continuous-state jump attached to an event.
    pub fn jump_map(mut self, event_name: &str, map: JumpFn, jacobian: JumpJacFn) -> Self {
        match self.event_id(event_name) {
            Some(e) => {
                self.jumps.insert(e, JumpMap::new(map, jacobian));
            }
            None => self.error = Some(Error::Config(format!("unknown event `{event_name}`"))),
        }
        self
    }

    /// Controlled transition `Γ(from, σ) = to` with no guarding manifold.
    pub fn controlled_transition(mut self, from: usize, event_name: &str, to: usize) -> Self {
        match self.event_id(event_name) {
            Some(e) => {
                self.automaton.insert((Loc(from), e), Loc(to));
            }
            None => self.error = Some(Error::Config(format!("unknown event `{event_name}`"))),
        }
        self
    }

    /// Autonomous transition `from -> to` guarded by the manifold `m(x) = 0`.
    pub fn autonomous_transition(
        mut self,
        from: usize,
        to: usize,
        event_name: &str,
        value: ScalarFn,
        gradient: GradFn,
    ) -> Self {
        match self.event_id(event_name) {
            Some(e) => {
                self.automaton.insert((Loc(from), e), Loc(to));
                self.manifolds.insert(
                    (Loc(from), Loc(to)),
                    Manifold {
                        value,
                        gradient,
                        event: e,
                    },
                );
            }
            None => self.error = Some(Error::Config(format!("unknown event `{event_name}`"))),
        }
        self
    }

    fn event_id(&self, name: &str) -> Option<EventId> {
        self.event_names.iter().position(|n| n == name).map(EventId)
    }

    pub fn build(self) -> Result<HybridSystem> {
        if let Some(e) = self.error {
            return Err(e);
        }
        if self.state_dims.is_empty() {
            return Err(Error::Config("a hybrid system needs at least one location".into()));
        }
        // Every event with a jump map must appear in the automaton.
        for e in self.jumps.keys() {
            if !self.automaton.keys().any(|(_, sigma)| sigma == e) {
                return Err(Error::Config(format!(
                    "event `{}` has a jump map but no automaton entry",
                    self.event_names[e.0]
                )));
            }
        }
        let fields: Vec<FieldFn> = self.fields.into_iter().map(|f| f.unwrap()).collect();
        let jacobians: Vec<FieldJacFn> = self
            .field_jacobians
            .into_iter()
            .enumerate()
            .map(|(q, j)| {
                j.unwrap_or_else(|| {
                    let f = fields[q].clone();
                    Arc::new(move |x: &State, u: &Control| fd_field_jacobian(f.as_ref(), x, u))
                        as FieldJacFn
                })
            })
            .collect();
        Ok(HybridSystem {
            state_dims: self.state_dims,
            control_dims: self.control_dims,
            fields,
            field_jacobians: jacobians,
            control_lower: self.control_lower,
            control_upper: self.control_upper,
            event_names: self.event_names,
            automaton: self.automaton,
            jumps: self.jumps,
            manifolds: self.manifolds,
        })
    }
}

/// Helper for scalar manifolds given as closures; wraps the gradient by
/// finite differences when an exact one is not supplied.
pub fn manifold_fn<F>(f: F) -> (ScalarFn, GradFn)
where
    F: Fn(&State) -> f64 + Send + Sync + Clone + 'static,
{
    let value: ScalarFn = Arc::new(f.clone());
    let grad: GradFn = Arc::new(move |x: &State| fd_gradient(&f, x));
    (value, grad)
}

/// Per-segment control law evaluated by the simulator.
#[derive(Clone)]
pub enum ControlLaw {
    /// Same constant vector in every location.
    Constant(DVector<f64>),
    /// One open-loop function of time for the whole horizon.
    OpenLoop(Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>),
    /// State feedback, may depend on the location.
    Feedback(Arc<dyn Fn(f64, Loc, &State) -> DVector<f64> + Send + Sync>),
    /// One `(t, x) -> u` function per trajectory segment.
    PerSegment(Vec<Arc<dyn Fn(f64, &State) -> DVector<f64> + Send + Sync>>),
    /// Frozen tabulated control per segment: linear interpolation inside the
    /// knot range, constant extension outside it.
    Frozen(Vec<FrozenSegmentControl>),
}

/// Tabulated control on one segment.
#[derive(Clone)]
pub struct FrozenSegmentControl {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

impl FrozenSegmentControl {
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.values[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1].clone();
        }
        let k = match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(k) => return self.values[k].clone(),
            Err(k) => k - 1,
        };
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let s = (t - t0) / (t1 - t0);
        &self.values[k] * (1.0 - s) + &self.values[k + 1] * s
    }
}

impl ControlLaw {
    /// Evaluate the law at time `t`, in segment `seg` of location `q`, state `x`.
    pub fn eval(&self, t: f64, seg: usize, q: Loc, x: &State) -> DVector<f64> {
        match self {
            ControlLaw::Constant(u) => u.clone(),
            ControlLaw::OpenLoop(f) => f(t),
            ControlLaw::Feedback(f) => f(t, q, x),
            ControlLaw::PerSegment(fs) => {
                let idx = seg.min(fs.len().saturating_sub(1));
                fs[idx](t, x)
            }
            ControlLaw::Frozen(segs) => {
                let idx = seg.min(segs.len().saturating_sub(1));
                segs[idx].eval(t)
            }
        }
    }

    pub fn constant(value: f64) -> Self {
        ControlLaw::Constant(DVector::from_vec(vec![value]))
    }
}

/// Hybrid input process: a strictly increasing controlled-switch schedule
/// plus a continuous control law.
#[derive(Clone)]
pub struct HybridInput {
    pub schedule: Vec<(f64, EventId)>,
    pub control: ControlLaw,
}

impl HybridInput {
    pub fn new(schedule: Vec<(f64, EventId)>, control: ControlLaw) -> Self {
        HybridInput { schedule, control }
    }

    /// Input with no controlled switches.
    pub fn continuous(control: ControlLaw) -> Self {
        HybridInput {
            schedule: Vec::new(),
            control,
        }
    }

    /// Check the schedule: strictly increasing, inside `[t0, tf)`.
    pub fn validate_schedule(&self, t0: f64, tf: f64) -> Result<()> {
        let mut prev = f64::NEG_INFINITY;
        for &(t, _) in &self.schedule {
            if t < t0 || t >= tf {
                return Err(Error::InvalidSchedule(format!(
                    "switch time {t} outside [{t0}, {tf})"
                )));
            }
            if t <= prev {
                return Err(Error::InvalidSchedule(
                    "switch times must be strictly increasing".into(),
                ));
            }
            prev = t;
        }
        Ok(())
    }
}

/// One step of a fixed discrete-state sequence.
#[derive(Debug, Clone, Copy)]
pub struct SequenceStep {
    pub event: EventId,
    pub kind: SwitchKind,
}

/// Fixed discrete-state sequence `q_0 .. q_L` with event labels and switch
/// kinds, validated against the automaton and manifold availability.
#[derive(Clone)]
pub struct LocationSequence {
    pub initial: Loc,
    pub steps: Vec<SequenceStep>,
    locations: Vec<Loc>,
}

impl LocationSequence {
    pub fn new(sys: &HybridSystem, initial: Loc, steps: Vec<SequenceStep>) -> Result<Self> {
        let mut locations = vec![initial];
        let mut q = initial;
        for (j, step) in steps.iter().enumerate() {
            let target = sys.transition(q, step.event).ok_or_else(|| {
                Error::InvalidSequence(format!(
                    "step {j}: no automaton entry for ({:?}, {:?})",
                    q, step.event
                ))
            })?;
            if step.kind == SwitchKind::Autonomous && sys.manifold(q, target).is_none() {
                return Err(Error::InvalidSequence(format!(
                    "step {j}: autonomous switch {:?} -> {:?} has no manifold",
                    q, target
                )));
            }
            locations.push(target);
            q = target;
        }
        Ok(LocationSequence {
            initial,
            steps,
            locations,
        })
    }

    /// Number of switches `L`.
    pub fn num_switches(&self) -> usize {
        self.steps.len()
    }

    /// Location of segment `i` (`0..=L`).
    pub fn location(&self, i: usize) -> Loc {
        self.locations[i]
    }

    pub fn locations(&self) -> &[Loc] {
        &self.locations
    }
}

/// Options for [`validate_system`]: the sampling box and sample count used by
/// the manifold-disjointness, Lipschitz and cost checks.
#[derive(Clone)]
pub struct ValidationOptions {
    /// Half-width of the sampling box per location, centered at the origin;
    /// `None` derives a box from the initial state magnitude.
    pub box_halfwidth: Option<f64>,
    /// Number of quasi-random sample points.
    pub samples: usize,
    /// Band width (relative to the box size) for the sampled manifold
    /// disjointness check.
    pub manifold_band: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            box_halfwidth: None,
            samples: 10_000,
            manifold_band: 1e-2,
        }
    }
}

/// One diagnostics entry produced by [`validate_system`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Initial state lies on a switching manifold out of its location.
    InitialStateOnManifold { to: Loc, value: f64 },
    /// Two manifolds with the same source location share sampled band points.
    ManifoldOverlap { a: (Loc, Loc), b: (Loc, Loc) },
    /// A cost callable returned a negative or non-finite value.
    CostNotNonnegative { what: String, value: f64 },
    /// A vector field returned a non-finite value on a sample.
    FieldNotFinite { loc: Loc },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::InitialStateOnManifold { to, value } => write!(
                f,
                "initial state lies on the switching manifold toward {to:?} (m = {value:.3e})"
            ),
            Violation::ManifoldOverlap { a, b } => {
                write!(f, "manifolds {a:?} and {b:?} overlap at sampled points")
            }
            Violation::CostNotNonnegative { what, value } => {
                write!(f, "cost `{what}` returned {value} on a validation sample")
            }
            Violation::FieldNotFinite { loc } => {
                write!(f, "vector field of {loc:?} returned a non-finite value")
            }
        }
    }
}

/// Diagnostics report of the standing-assumption checks. The empty violation
/// list is equivalent to acceptance.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Empirical joint Lipschitz estimate of each field over the sample box.
    pub lipschitz_estimates: Vec<(Loc, f64)>,
}

impl ValidationReport {
    pub fn is_accepted(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check the standing assumptions on `(sys, x0, q0)` by deterministic
/// sampling: the initial state off all manifolds, sampled disjointness of
/// same-source manifold pairs, empirical field Lipschitz estimates, and
/// nonnegativity of the cost callables when given.
pub fn validate_system(
    sys: &HybridSystem,
    x0: &State,
    q0: Loc,
    cost: Option<&crate::cost::CostSpec>,
    opts: &ValidationOptions,
) -> Result<ValidationReport> {
    if x0.len() != sys.state_dim(q0) {
        return Err(Error::DimensionMismatch {
            expected: sys.state_dim(q0),
            got: x0.len(),
            context: "initial state".into(),
        });
    }
    let mut violations = Vec::new();

    // Initial state off every manifold out of q0.
    for (to, m) in sys.manifolds_from(q0) {
        let v = (m.value)(x0);
        if v.abs() <= 1e-9 {
            violations.push(Violation::InitialStateOnManifold { to, value: v });
        }
    }

    let halfwidth = opts
        .box_halfwidth
        .unwrap_or_else(|| 2.0 * (1.0 + x0.amax()));

    // Sampled disjointness of same-source manifold pairs.
    let pairs: Vec<(Loc, Loc)> = {
        let mut p: Vec<(Loc, Loc)> = (0..sys.num_locations())
            .flat_map(|q| {
                sys.manifolds_from(Loc(q))
                    .map(move |(to, _)| (Loc(q), to))
                    .collect::<Vec<_>>()
            })
            .collect();
        p.sort();
        p
    };
    for (i, &a) in pairs.iter().enumerate() {
        for &b in pairs.iter().skip(i + 1) {
            if a.0 != b.0 || a == b {
                continue;
            }
            let n = sys.state_dim(a.0);
            let lo = vec![-halfwidth; n];
            let hi = vec![halfwidth; n];
            let band = opts.manifold_band * halfwidth;
            let ma = sys.manifold(a.0, a.1).unwrap();
            let mb = sys.manifold(b.0, b.1).unwrap();
            let overlap = halton_box(&lo, &hi, opts.samples)
                .iter()
                .any(|x| (ma.value)(x).abs() <= band && (mb.value)(x).abs() <= band);
            if overlap {
                violations.push(Violation::ManifoldOverlap { a, b });
            }
        }
    }

    // Empirical field Lipschitz estimates over the sample box (same-control
    // pairs probe the x direction; same-state pairs probe the u direction).
    let mut lipschitz_estimates = Vec::new();
    for q in 0..sys.num_locations() {
        let q = Loc(q);
        let n = sys.state_dim(q);
        let lo = vec![-halfwidth; n];
        let hi = vec![halfwidth; n];
        let pts = halton_box(&lo, &hi, opts.samples.min(2000));
        let u_mid = sys.control_box_center(q);
        let f = sys.field(q);
        let mut k_hat: f64 = 0.0;
        let mut finite = true;
        for w in pts.windows(2) {
            let (x1, x2) = (&w[0], &w[1]);
            let f1 = f(x1, &u_mid);
            let f2 = f(x2, &u_mid);
            if !f1.iter().all(|v| v.is_finite()) || !f2.iter().all(|v| v.is_finite()) {
                finite = false;
                break;
            }
            let dx = (x1 - x2).norm();
            if dx > 1e-12 {
                k_hat = k_hat.max((f1 - f2).norm() / dx);
            }
        }
        if sys.control_dim(q) > 0 {
            let (ulo, uhi) = sys.control_bounds(q);
            let upts = halton_box(ulo.as_slice(), uhi.as_slice(), 200);
            let x_ref = &pts[0];
            for w in upts.windows(2) {
                let f1 = f(x_ref, &w[0]);
                let f2 = f(x_ref, &w[1]);
                let du = (&w[0] - &w[1]).norm();
                if du > 1e-12 {
                    k_hat = k_hat.max((f1 - f2).norm() / du);
                }
            }
        }
        if !finite {
            violations.push(Violation::FieldNotFinite { loc: q });
        }
        lipschitz_estimates.push((q, k_hat));
    }

    // Cost nonnegativity on validation samples.
    if let Some(cost) = cost {
        for q in 0..sys.num_locations() {
            let q = Loc(q);
            let n = sys.state_dim(q);
            let lo = vec![-halfwidth; n];
            let hi = vec![halfwidth; n];
            let pts = halton_box(&lo, &hi, 200);
            let u_mid = sys.control_box_center(q);
            for x in &pts {
                let l = (cost.running(q))(x, &u_mid);
                if !(l.is_finite() && l >= 0.0) {
                    violations.push(Violation::CostNotNonnegative {
                        what: format!("running cost of {q:?}"),
                        value: l,
                    });
                    break;
                }
            }
        }
        for (sigma, c) in cost.switching_costs() {
            // Sample in the source dimension of any automaton entry with this event.
            let n = sys
                .automaton
                .keys()
                .find(|(_, s)| *s == sigma)
                .map(|(q, _)| sys.state_dim(*q))
                .unwrap_or(x0.len());
            let lo = vec![-halfwidth; n];
            let hi = vec![halfwidth; n];
            for x in halton_box(&lo, &hi, 200) {
                let v = (c.value)(&x);
                if !(v.is_finite() && v >= 0.0) {
                    violations.push(Violation::CostNotNonnegative {
                        what: format!("switching cost of event {}", sys.event_name(sigma)),
                        value: v,
                    });
                    break;
                }
            }
        }
        {
            let n = cost.terminal_dim();
            let lo = vec![-halfwidth; n];
            let hi = vec![halfwidth; n];
            for x in halton_box(&lo, &hi, 200) {
                let v = (cost.terminal())(&x);
                if !(v.is_finite() && v >= 0.0) {
                    violations.push(Violation::CostNotNonnegative {
                        what: "terminal cost".into(),
                        value: v,
                    });
                    break;
                }
            }
        }
    }

    Ok(ValidationReport {
        violations,
        lipschitz_estimates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use approx::assert_relative_eq;

    #[test]
    fn jump_flips_sign_in_first_preset() {
        let p = presets::example1();
        let sigma = p.sys.event_by_name("flip").unwrap();
        let (q, x) = p
            .sys
            .jump(sigma, Loc(0), &DVector::from_vec(vec![3.0]))
            .unwrap();
        assert_eq!(q, Loc(1));
        assert_relative_eq!(x[0], -3.0);
    }

    #[test]
    fn identity_jump_keeps_state() {
        let p = presets::example2();
        let sigma = p.sys.event_by_name("touch").unwrap();
        let x = DVector::from_vec(vec![1.5, 0.0]);
        let (q, y) = p.sys.jump(sigma, Loc(0), &x).unwrap();
        assert_eq!(q, Loc(1));
        assert_eq!(y, x);
    }

    #[test]
    fn dimension_changing_jump() {
        let sys = HybridSystem::builder()
            .location(
                Arc::new(|_x: &State, _u: &Control| DVector::zeros(2)),
                vec![],
                vec![],
                2,
            )
            .location(
                Arc::new(|_x: &State, _u: &Control| DVector::zeros(3)),
                vec![],
                vec![],
                3,
            )
            .event("widen")
            .jump_map(
                "widen",
                Arc::new(|x: &State| DVector::from_vec(vec![x[0], x[0] + x[1], 0.0])),
                Arc::new(|_x: &State| {
                    DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
                }),
            )
            .controlled_transition(0, "widen", 1)
            .build()
            .unwrap();
        let sigma = sys.event_by_name("widen").unwrap();
        let (q, y) = sys
            .jump(sigma, Loc(0), &DVector::from_vec(vec![1.0, 2.0]))
            .unwrap();
        assert_eq!(q, Loc(1));
        assert_eq!(y, DVector::from_vec(vec![1.0, 3.0, 0.0]));
    }

    #[test]
    fn undefined_transition_is_an_error() {
        let p = presets::example1();
        let sigma = p.sys.event_by_name("flip").unwrap();
        let err = p
            .sys
            .jump(sigma, Loc(1), &DVector::from_vec(vec![1.0]))
            .unwrap_err();
        assert!(matches!(err, Error::TransitionUndefined { .. }));
    }

    #[test]
    fn manifold_value_second_preset() {
        let p = presets::example2();
        let v = p
            .sys
            .manifold_value(Loc(0), Loc(1), &DVector::from_vec(vec![1.5, 0.2]))
            .unwrap();
        assert_relative_eq!(v, 0.2);
        let v0 = p
            .sys
            .manifold_value(Loc(0), Loc(1), &DVector::from_vec(vec![7.0, 0.0]))
            .unwrap();
        assert_relative_eq!(v0, 0.0);
        assert!(p
            .sys
            .manifold_value(Loc(1), Loc(0), &DVector::from_vec(vec![0.0, 0.0]))
            .is_err());
    }

    #[test]
    fn affine_manifold_direct_evaluation() {
        let (value, grad) = manifold_fn(|x: &State| 2.0 * x[0] - x[1] + 1.0);
        let x = DVector::from_vec(vec![0.0, 0.0]);
        assert_relative_eq!(value(&x), 1.0);
        let g = grad(&x);
        assert_relative_eq!(g[0], 2.0, epsilon = 1e-8);
        assert_relative_eq!(g[1], -1.0, epsilon = 1e-8);
    }

    #[test]
    fn validation_accepts_interior_start_and_flags_manifold_start() {
        let p = presets::example2();
        let opts = ValidationOptions::default();
        let ok = validate_system(
            &p.sys,
            &DVector::from_vec(vec![0.0, 1.0]),
            Loc(0),
            Some(&p.cost),
            &opts,
        )
        .unwrap();
        assert!(ok.is_accepted(), "violations: {:?}", ok.violations);

        let bad = validate_system(
            &p.sys,
            &DVector::from_vec(vec![1.0, 0.0]),
            Loc(0),
            Some(&p.cost),
            &opts,
        )
        .unwrap();
        assert!(!bad.is_accepted());
        assert!(matches!(
            bad.violations[0],
            Violation::InitialStateOnManifold { .. }
        ));
    }

    #[test]
    fn lipschitz_estimate_of_identity_field_is_one() {
        let sys = HybridSystem::builder()
            .location(
                Arc::new(|x: &State, _u: &Control| x.clone()),
                vec![],
                vec![],
                1,
            )
            .build()
            .unwrap();
        let opts = ValidationOptions {
            box_halfwidth: Some(2.0),
            ..Default::default()
        };
        let report =
            validate_system(&sys, &DVector::from_vec(vec![0.5]), Loc(0), None, &opts).unwrap();
        let (_, k) = report.lipschitz_estimates[0];
        assert_relative_eq!(k, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn validation_is_deterministic() {
        let p = presets::example2();
        let opts = ValidationOptions::default();
        let x0 = DVector::from_vec(vec![0.0, 1.0]);
        let a = validate_system(&p.sys, &x0, Loc(0), Some(&p.cost), &opts).unwrap();
        let b = validate_system(&p.sys, &x0, Loc(0), Some(&p.cost), &opts).unwrap();
        assert_eq!(a.violations, b.violations);
        assert_eq!(a.lipschitz_estimates, b.lipschitz_estimates);
    }

    #[test]
    fn dimension_mismatch_is_hard_error() {
        let p = presets::example2();
        let err = validate_system(
            &p.sys,
            &DVector::from_vec(vec![0.0]),
            Loc(0),
            None,
            &ValidationOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn schedule_must_increase() {
        let input = HybridInput::new(
            vec![(0.5, EventId(1)), (0.4, EventId(1))],
            ControlLaw::constant(0.0),
        );
        assert!(input.validate_schedule(0.0, 1.0).is_err());
    }
}
