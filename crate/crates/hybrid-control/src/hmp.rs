//! Minimum-principle machinery: Hamiltonians and their minimizers, the
//! backward adjoint pass with switching boundary conditions, and a shooting
//! solver over switching times and manifold multipliers.
//!
//! The discrete sequence is a fixed input. The solver is an indirect
//! multiple-shooting scheme: the unknowns are the switch times, one
//! multiplier `p` per autonomous switch, and the adjoint value at the start
//! of every segment; the coupled state-adjoint system is integrated forward
//! with the control minimized pointwise, and the residuals are the per-switch
//! Hamiltonian gaps, the manifold memberships of the autonomous pre-jump
//! states, the adjoint switch-condition mismatches and the terminal
//! transversality mismatch. A single backward adjoint sweep along a
//! zero-control rollout seeds the adjoint unknowns.

use std::sync::Arc;

use nalgebra::DVector;

use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::shooting::{damped_newton, NewtonOptions};
use crate::simulator::{evaluate_cost, simulate_forced, IntegratorConfig};
use crate::system::{ControlLaw, HybridInput, HybridSystem, LocationSequence};
use crate::trajectory::{HybridTrajectory, Segment};
use crate::types::{golden_section, hermite_interp, Control, EventId, Loc, State, SwitchKind};

/// Optional closed-form Hamiltonian minimizer `u(x, lambda)` for one
/// location, applied before projection onto the control box.
pub type MinimizerFn = Arc<dyn Fn(&State, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// System Hamiltonian `H_q = lambda . f_q(x, u) + l_q(x, u)`.
pub fn hamiltonian(
    sys: &HybridSystem,
    cost: &CostSpec,
    q: Loc,
    x: &State,
    lambda: &DVector<f64>,
    u: &Control,
) -> f64 {
    lambda.dot(&sys.field(q)(x, u)) + cost.running(q)(x, u)
}

/// Minimize the Hamiltonian over the compact control box.
///
/// A supplied closed-form minimizer is projected onto the box; otherwise a
/// golden-section search per control axis runs on coordinate-descent sweeps
/// from the box center.
pub fn minimize_hamiltonian(
    sys: &HybridSystem,
    cost: &CostSpec,
    q: Loc,
    x: &State,
    lambda: &DVector<f64>,
    minimizer: Option<&MinimizerFn>,
) -> Control {
    if let Some(m) = minimizer {
        return sys.project_control(q, &m(x, lambda));
    }
    let (lo, hi) = sys.control_bounds(q);
    let m = lo.len();
    if m == 0 {
        return DVector::zeros(0);
    }
    let mut u = sys.control_box_center(q);
    let sweeps = if m == 1 { 1 } else { 3 };
    for _ in 0..sweeps {
        for axis in 0..m {
            if hi[axis] <= lo[axis] {
                continue;
            }
            let mut probe = u.clone();
            let mut obj = |v: f64| {
                probe[axis] = v;
                hamiltonian(sys, cost, q, x, lambda, &probe)
            };
            let best = golden_section(&mut obj, lo[axis], hi[axis], 1e-10);
            u[axis] = best;
        }
    }
    u
}

/// Adjoint boundary condition at a switch, mapping the post-jump adjoint to
/// the pre-jump one:
/// `lambda(-) = grad(xi)^T lambda(+) + grad(c)(x-) + p grad(m)(x-)`.
/// The manifold term is omitted at controlled switches (where `p = 0`).
pub fn adjoint_switch_condition(
    sys: &HybridSystem,
    cost: &CostSpec,
    from: Loc,
    sigma: EventId,
    kind: SwitchKind,
    lambda_plus: &DVector<f64>,
    x_minus: &State,
    p: f64,
) -> Result<DVector<f64>> {
    let target = sys
        .transition(from, sigma)
        .ok_or(Error::TransitionUndefined { loc: from, event: sigma })?;
    let grad_xi = match sys.jump_map(sigma) {
        Some(j) => (j.jacobian)(x_minus),
        None => nalgebra::DMatrix::identity(x_minus.len(), x_minus.len()),
    };
    if grad_xi.nrows() != lambda_plus.len() {
        return Err(Error::DimensionMismatch {
            expected: grad_xi.nrows(),
            got: lambda_plus.len(),
            context: "post-jump adjoint vs jump Jacobian rows".into(),
        });
    }
    let mut lambda_minus = grad_xi.transpose() * lambda_plus;
    lambda_minus += cost.switching_gradient(sigma, x_minus);
    if kind == SwitchKind::Autonomous {
        let manifold = sys
            .manifold(from, target)
            .ok_or(Error::NoManifold { from, to: target })?;
        lambda_minus += (manifold.gradient)(x_minus) * p;
    }
    Ok(lambda_minus)
}

/// Adjoint path on one segment, stored on the trajectory knots with the
/// right-hand-side values for cubic Hermite sampling.
#[derive(Clone)]
pub struct AdjointSegment {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    pub derivs: Vec<DVector<f64>>,
}

impl AdjointSegment {
    pub fn start_value(&self) -> &DVector<f64> {
        &self.values[0]
    }

    pub fn end_value(&self) -> &DVector<f64> {
        self.values.last().unwrap()
    }

    pub fn sample(&self, t: f64) -> DVector<f64> {
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
            Err(k) => (k - 1).min(n - 2),
        };
        hermite_interp(
            self.times[k],
            &self.values[k],
            &self.derivs[k],
            self.times[k + 1],
            &self.values[k + 1],
            &self.derivs[k + 1],
            t,
        )
    }
}

/// Integrate the adjoint equation backward over one frozen state segment:
/// `lambda' = -(df/dx)^T lambda - dl/dx`, with the control re-minimized at
/// every evaluation point from the current adjoint.
pub fn adjoint_backward(
    sys: &HybridSystem,
    cost: &CostSpec,
    seg: &Segment,
    lambda_end: DVector<f64>,
    minimizer: Option<&MinimizerFn>,
) -> Result<AdjointSegment> {
    let q = seg.loc;
    let jac = sys.field_jacobian(q);
    let lgrad = cost.running_gradient(q);
    let rhs = |t: f64, lam: &DVector<f64>| -> DVector<f64> {
        let x = seg.sample(t);
        let u = minimize_hamiltonian(sys, cost, q, &x, lam, minimizer);
        -(jac(&x, &u).transpose() * lam) - lgrad(&x, &u)
    };

    let n = seg.times.len();
    let mut values = vec![DVector::zeros(0); n];
    let mut derivs = vec![DVector::zeros(0); n];
    values[n - 1] = lambda_end;
    derivs[n - 1] = rhs(seg.times[n - 1], &values[n - 1]);
    for k in (0..n - 1).rev() {
        let (t1, t0) = (seg.times[k + 1], seg.times[k]);
        let h = t0 - t1; // negative
        let lam = &values[k + 1];
        let k1 = rhs(t1, lam);
        let l2 = lam + &k1 * (0.5 * h);
        let k2 = rhs(t1 + 0.5 * h, &l2);
        let l3 = lam + &k2 * (0.5 * h);
        let k3 = rhs(t1 + 0.5 * h, &l3);
        let l4 = lam + &k3 * h;
        let k4 = rhs(t0, &l4);
        let next = lam + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Blowup { time: t0 });
        }
        derivs[k] = rhs(t0, &next);
        values[k] = next;
    }
    Ok(AdjointSegment {
        times: seg.times.clone(),
        values,
        derivs,
    })
}

/// A minimum-principle problem over a fixed discrete sequence.
#[derive(Clone)]
pub struct HmpProblem {
    pub sys: HybridSystem,
    pub cost: CostSpec,
    pub seq: LocationSequence,
    pub x0: State,
    pub t0: f64,
    pub tf: f64,
    /// Optional closed-form Hamiltonian minimizers per location.
    pub minimizers: Vec<Option<MinimizerFn>>,
}

impl HmpProblem {
    fn minimizer(&self, q: Loc) -> Option<&MinimizerFn> {
        self.minimizers.get(q.0).and_then(|m| m.as_ref())
    }
}

/// A candidate extremal: trajectory, adjoint, multipliers and realized
/// controls, with the final shooting residual.
#[derive(Clone)]
pub struct HmpExtremal {
    pub trajectory: HybridTrajectory,
    pub adjoint: Vec<AdjointSegment>,
    /// The synthesized feedback `u(t, x)` per segment.
    pub control_law: ControlLaw,
    /// One entry per switch; controlled switches carry `p = 0`.
    pub p_values: Vec<f64>,
    pub switch_times: Vec<f64>,
    pub residual_norm: f64,
    pub cost: f64,
    pub newton_iterations: usize,
    /// Whether every autonomous segment reaches its manifold first at the
    /// solved switch time (forced shooting can otherwise converge to roots
    /// the event-driven semantics would never realize).
    pub realizable: bool,
}

impl HmpExtremal {
    /// Adjoint at `t` (pre-switch segment value at a switch time).
    pub fn lambda(&self, t: f64) -> DVector<f64> {
        let i = self.trajectory.segment_index_at(t);
        self.adjoint[i].sample(t)
    }

    /// Realized control at `t`.
    pub fn control(&self, t: f64) -> DVector<f64> {
        let i = self.trajectory.segment_index_at(t);
        self.trajectory.segments[i].sample_control(t)
    }
}

/// Hamiltonian gap `H(t_j-) - H(t_j+)` at switch `j`, both sides evaluated
/// with their own minimized controls.
pub fn hamiltonian_gap(problem: &HmpProblem, extremal: &HmpExtremal, j: usize) -> Result<f64> {
    if j >= extremal.trajectory.num_switches() {
        return Err(Error::Config(format!("switch index {j} out of range")));
    }
    gap_from_parts(problem, &extremal.trajectory, &extremal.adjoint, j)
}

fn gap_from_parts(
    problem: &HmpProblem,
    traj: &HybridTrajectory,
    adjoint: &[AdjointSegment],
    j: usize,
) -> Result<f64> {
    let sw = &traj.switches[j];
    let (q_pre, q_post) = (sw.from, sw.to);
    let x_pre = &sw.pre_state;
    let x_post = &sw.post_state;
    let lam_pre = adjoint[j].end_value();
    let lam_post = adjoint[j + 1].start_value();
    let u_pre = minimize_hamiltonian(
        &problem.sys,
        &problem.cost,
        q_pre,
        x_pre,
        lam_pre,
        problem.minimizer(q_pre),
    );
    let u_post = minimize_hamiltonian(
        &problem.sys,
        &problem.cost,
        q_post,
        x_post,
        lam_post,
        problem.minimizer(q_post),
    );
    let h_pre = hamiltonian(&problem.sys, &problem.cost, q_pre, x_pre, lam_pre, &u_pre);
    let h_post = hamiltonian(&problem.sys, &problem.cost, q_post, x_post, lam_post, &u_post);
    Ok(h_pre - h_post)
}

/// Options for [`solve`].
#[derive(Debug, Clone)]
pub struct HmpSolveOptions {
    pub newton: NewtonOptions,
    pub integrator: IntegratorConfig,
}

impl Default for HmpSolveOptions {
    fn default() -> Self {
        HmpSolveOptions {
            newton: NewtonOptions::default(),
            integrator: IntegratorConfig::default(),
        }
    }
}

/// Coupled state-adjoint rollout at fixed unknowns.
pub struct PassOutput {
    pub trajectory: HybridTrajectory,
    pub adjoint: Vec<AdjointSegment>,
    pub control_law: ControlLaw,
}

/// Integrate the coupled system `x' = f(x, u)`,
/// `lambda' = -(df/dx)^T lambda - dl/dx` forward on every segment with
/// `u = argmin H(x, lambda, .)` at each evaluation point. Segment `i`
/// starts from the jumped state and the supplied adjoint `lambda_starts[i]`.
pub fn coupled_forward(
    problem: &HmpProblem,
    times: &[f64],
    lambda_starts: &[DVector<f64>],
    opts: &HmpSolveOptions,
) -> Result<PassOutput> {
    let num_segments = problem.seq.num_switches() + 1;
    if lambda_starts.len() != num_segments {
        return Err(Error::Config(format!(
            "{} adjoint starts for {num_segments} segments",
            lambda_starts.len()
        )));
    }
    let (t0, tf) = (problem.t0, problem.tf);
    let mut prev = t0;
    for &tj in times {
        if tj <= prev || tj >= tf {
            return Err(Error::InvalidSchedule(format!(
                "switch time {tj} outside ({prev}, {tf})"
            )));
        }
        prev = tj;
    }

    let cfg = &opts.integrator;
    let mut segments = Vec::with_capacity(num_segments);
    let mut adjoint = Vec::with_capacity(num_segments);
    let mut switches = Vec::with_capacity(times.len());
    let mut x = problem.x0.clone();
    let mut t = t0;
    for i in 0..num_segments {
        let q = problem.seq.location(i);
        if x.len() != problem.sys.state_dim(q) {
            return Err(Error::DimensionMismatch {
                expected: problem.sys.state_dim(q),
                got: x.len(),
                context: format!("segment {i} start state"),
            });
        }
        if lambda_starts[i].len() != problem.sys.state_dim(q) {
            return Err(Error::DimensionMismatch {
                expected: problem.sys.state_dim(q),
                got: lambda_starts[i].len(),
                context: format!("segment {i} start adjoint"),
            });
        }
        let t_end = if i < times.len() { times[i] } else { tf };
        let (seg, adj) = integrate_coupled_segment(
            problem,
            q,
            &x,
            &lambda_starts[i],
            (t, t_end),
            cfg,
        )?;
        if i < times.len() {
            let step = &problem.seq.steps[i];
            let pre_state = seg.end_state().clone();
            let (q_next, x_post) = problem.sys.jump(step.event, q, &pre_state)?;
            let manifold_value = problem
                .sys
                .manifold(q, q_next)
                .map(|m| (m.value)(&pre_state));
            switches.push(crate::trajectory::SwitchRecord {
                time: t_end,
                kind: step.kind,
                event: step.event,
                from: q,
                to: q_next,
                pre_state,
                post_state: x_post.clone(),
                manifold_value,
            });
            x = x_post;
            t = t_end;
        }
        segments.push(seg);
        adjoint.push(adj);
    }

    let control_law = law_from_adjoint(problem, &adjoint);
    Ok(PassOutput {
        trajectory: HybridTrajectory {
            segments,
            switches,
            t0,
            tf,
        },
        adjoint,
        control_law,
    })
}

fn integrate_coupled_segment(
    problem: &HmpProblem,
    q: Loc,
    x0: &State,
    lambda0: &DVector<f64>,
    span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<(Segment, AdjointSegment)> {
    let (t_a, t_b) = span;
    let sys = &problem.sys;
    let cost = &problem.cost;
    let field = sys.field(q);
    let jac = sys.field_jacobian(q);
    let lgrad = cost.running_gradient(q);
    let minimizer = problem.minimizer(q);
    let rhs = |x: &State, lam: &DVector<f64>| -> (State, DVector<f64>, Control) {
        let u = minimize_hamiltonian(sys, cost, q, x, lam, minimizer);
        let dx = field(x, &u);
        let dl = -(jac(x, &u).transpose() * lam) - lgrad(x, &u);
        (dx, dl, u)
    };

    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut derivs = Vec::new();
    let mut controls = Vec::new();
    let mut lam_vals = Vec::new();
    let mut lam_derivs = Vec::new();

    let mut t = t_a;
    let mut x = x0.clone();
    let mut lam = lambda0.clone();
    let mut k = 0usize;
    loop {
        let (dx, dl, u) = rhs(&x, &lam);
        sys.check_control(q, &u, t)?;
        times.push(t);
        states.push(x.clone());
        derivs.push(dx);
        controls.push(u);
        lam_vals.push(lam.clone());
        lam_derivs.push(dl);
        if t >= t_b {
            break;
        }
        k += 1;
        let t_next = {
            let tn = t_a + k as f64 * cfg.step;
            if tn >= t_b || t_b - tn < 1e-12 * (t_b - t_a).max(1.0) {
                t_b
            } else {
                tn
            }
        };
        let h = t_next - t;
        let (k1x, k1l, _) = rhs(&x, &lam);
        let (x2, l2) = (&x + &k1x * (0.5 * h), &lam + &k1l * (0.5 * h));
        let (k2x, k2l, _) = rhs(&x2, &l2);
        let (x3, l3) = (&x + &k2x * (0.5 * h), &lam + &k2l * (0.5 * h));
        let (k3x, k3l, _) = rhs(&x3, &l3);
        let (x4, l4) = (&x + &k3x * h, &lam + &k3l * h);
        let (k4x, k4l, _) = rhs(&x4, &l4);
        x = &x + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
        lam = &lam + (k1l + k2l * 2.0 + k3l * 2.0 + k4l) * (h / 6.0);
        if !(x.iter().all(|v| v.is_finite()) && lam.iter().all(|v| v.is_finite())) {
            return Err(Error::Blowup { time: t_next });
        }
        t = t_next;
    }
    Ok((
        Segment {
            loc: q,
            times: times.clone(),
            states,
            derivs,
            controls,
        },
        AdjointSegment {
            times,
            values: lam_vals,
            derivs: lam_derivs,
        },
    ))
}

fn law_from_adjoint(problem: &HmpProblem, adjoint: &[AdjointSegment]) -> ControlLaw {
    let paths = Arc::new(adjoint.to_vec());
    let mut laws: Vec<Arc<dyn Fn(f64, &State) -> DVector<f64> + Send + Sync>> =
        Vec::with_capacity(paths.len());
    for i in 0..paths.len() {
        let q = problem.seq.location(i);
        let sys = problem.sys.clone();
        let cost = problem.cost.clone();
        let minimizer = problem.minimizer(q).cloned();
        let paths = paths.clone();
        laws.push(Arc::new(move |t: f64, x: &State| {
            let lam = paths[i].sample(t);
            minimize_hamiltonian(&sys, &cost, q, x, &lam, minimizer.as_ref())
        }));
    }
    ControlLaw::PerSegment(laws)
}

/// Seed the adjoint unknowns: roll the system out under the control-box
/// center, then run one backward adjoint sweep with the guessed multipliers.
fn bootstrap_adjoint_starts(
    problem: &HmpProblem,
    times: &[f64],
    p_by_switch: &[f64],
    opts: &HmpSolveOptions,
) -> Result<Vec<DVector<f64>>> {
    let num_segments = problem.seq.num_switches() + 1;
    let mut laws: Vec<Arc<dyn Fn(f64, &State) -> DVector<f64> + Send + Sync>> =
        Vec::with_capacity(num_segments);
    for i in 0..num_segments {
        let q = problem.seq.location(i);
        let center = problem.sys.control_box_center(q);
        laws.push(Arc::new(move |_t: f64, _x: &State| center.clone()));
    }
    let traj = simulate_forced(
        &problem.sys,
        &problem.seq,
        times,
        &ControlLaw::PerSegment(laws),
        &problem.x0,
        (problem.t0, problem.tf),
        &opts.integrator,
    )?;
    let adjoint = backward_pass(problem, &traj, p_by_switch)?;
    Ok(adjoint.iter().map(|a| a.start_value().clone()).collect())
}

/// Backward adjoint sweep along a frozen trajectory: terminal condition
/// `lambda(tf) = grad g`, switch conditions with the given multipliers.
fn backward_pass(
    problem: &HmpProblem,
    traj: &HybridTrajectory,
    p_by_switch: &[f64],
) -> Result<Vec<AdjointSegment>> {
    let num_segments = traj.segments.len();
    let mut adjoint = vec![
        AdjointSegment {
            times: vec![],
            values: vec![],
            derivs: vec![]
        };
        num_segments
    ];
    let x_f = traj.final_state();
    let mut lambda_end = (problem.cost.terminal_gradient())(&x_f);
    for i in (0..num_segments).rev() {
        let q = traj.segments[i].loc;
        adjoint[i] = adjoint_backward(
            &problem.sys,
            &problem.cost,
            &traj.segments[i],
            lambda_end.clone(),
            problem.minimizer(q),
        )?;
        if i > 0 {
            let sw = &traj.switches[i - 1];
            lambda_end = adjoint_switch_condition(
                &problem.sys,
                &problem.cost,
                sw.from,
                sw.event,
                sw.kind,
                adjoint[i].start_value(),
                &sw.pre_state,
                p_by_switch[i - 1],
            )?;
        }
    }
    Ok(adjoint)
}

struct UnknownLayout {
    num_switches: usize,
    autonomous: Vec<usize>,
    segment_dims: Vec<usize>,
}

impl UnknownLayout {
    fn of(problem: &HmpProblem) -> Self {
        let num_switches = problem.seq.num_switches();
        let autonomous = problem
            .seq
            .steps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == SwitchKind::Autonomous)
            .map(|(j, _)| j)
            .collect();
        let segment_dims = (0..=num_switches)
            .map(|i| problem.sys.state_dim(problem.seq.location(i)))
            .collect();
        UnknownLayout {
            num_switches,
            autonomous,
            segment_dims,
        }
    }

    fn pack(&self, times: &[f64], p_by_switch: &[f64], lambdas: &[DVector<f64>]) -> DVector<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(times);
        for &j in &self.autonomous {
            v.push(p_by_switch[j]);
        }
        for lam in lambdas {
            v.extend(lam.iter().copied());
        }
        DVector::from_vec(v)
    }

    fn unpack(&self, theta: &DVector<f64>) -> (Vec<f64>, Vec<f64>, Vec<DVector<f64>>) {
        let times: Vec<f64> = theta.iter().take(self.num_switches).copied().collect();
        let mut p_by_switch = vec![0.0; self.num_switches];
        let mut k = self.num_switches;
        for &j in &self.autonomous {
            p_by_switch[j] = theta[k];
            k += 1;
        }
        let mut lambdas = Vec::with_capacity(self.segment_dims.len());
        for &n in &self.segment_dims {
            lambdas.push(DVector::from_iterator(
                n,
                theta.iter().skip(k).take(n).copied(),
            ));
            k += n;
        }
        (times, p_by_switch, lambdas)
    }
}

/// Shooting residuals of a coupled rollout: Hamiltonian gaps, autonomous
/// manifold memberships, adjoint switch-condition mismatches, and the
/// terminal transversality mismatch.
fn residuals(
    problem: &HmpProblem,
    pass: &PassOutput,
    p_by_switch: &[f64],
) -> Result<DVector<f64>> {
    let num_switches = problem.seq.num_switches();
    let mut r = Vec::new();
    for j in 0..num_switches {
        r.push(gap_from_parts(problem, &pass.trajectory, &pass.adjoint, j)?);
    }
    for (j, step) in problem.seq.steps.iter().enumerate() {
        if step.kind == SwitchKind::Autonomous {
            let sw = &pass.trajectory.switches[j];
            r.push(problem.sys.manifold_value(sw.from, sw.to, &sw.pre_state)?);
        }
    }
    for j in 0..num_switches {
        let sw = &pass.trajectory.switches[j];
        let expected_minus = adjoint_switch_condition(
            &problem.sys,
            &problem.cost,
            sw.from,
            sw.event,
            sw.kind,
            pass.adjoint[j + 1].start_value(),
            &sw.pre_state,
            p_by_switch[j],
        )?;
        let got_minus = pass.adjoint[j].end_value();
        r.extend((got_minus - expected_minus).iter().copied());
    }
    let lam_f = pass.adjoint.last().unwrap().end_value();
    let grad_g = (problem.cost.terminal_gradient())(&pass.trajectory.final_state());
    r.extend((lam_f - grad_g).iter().copied());
    Ok(DVector::from_vec(r))
}

/// Shooting residuals at a candidate `(times, p)` point with bootstrapped
/// adjoints, for diagnostics.
pub fn residuals_at(
    problem: &HmpProblem,
    times: &[f64],
    p_by_switch: &[f64],
    opts: &HmpSolveOptions,
) -> Result<DVector<f64>> {
    let lambdas = bootstrap_adjoint_starts(problem, times, p_by_switch, opts)?;
    let pass = coupled_forward(problem, times, &lambdas, opts)?;
    residuals(problem, &pass, p_by_switch)
}

/// A forced-sequence trajectory is realizable under autonomous semantics
/// when no manifold of the active location changes sign strictly inside a
/// segment: the first transversal crossing must be the forced switch time
/// itself.
pub fn is_realizable(sys: &HybridSystem, traj: &HybridTrajectory) -> bool {
    for seg in &traj.segments {
        for (_, manifold) in sys.manifolds_from(seg.loc) {
            let mut prev = (manifold.value)(&seg.states[0]);
            // Skip the final knot: switching there is the intended event.
            for x in seg
                .states
                .iter()
                .take(seg.states.len().saturating_sub(1))
                .skip(1)
            {
                let cur = (manifold.value)(x);
                if prev * cur < 0.0 {
                    return false;
                }
                prev = cur;
            }
        }
    }
    true
}

/// Solve the two-point boundary value problem by multiple shooting over the
/// switch times, the autonomous multipliers, and the per-segment initial
/// adjoints (seeded by a backward sweep along a nominal rollout).
pub fn solve(
    problem: &HmpProblem,
    guess_times: &[f64],
    guess_p: &[f64],
    opts: &HmpSolveOptions,
) -> Result<HmpExtremal> {
    let layout = UnknownLayout::of(problem);
    if guess_times.len() != layout.num_switches || guess_p.len() != layout.autonomous.len() {
        return Err(Error::Config(format!(
            "guess sizes ({}, {}) do not match ({} switches, {} autonomous)",
            guess_times.len(),
            guess_p.len(),
            layout.num_switches,
            layout.autonomous.len()
        )));
    }
    let mut p_by_switch = vec![0.0; layout.num_switches];
    for (k, &j) in layout.autonomous.iter().enumerate() {
        p_by_switch[j] = guess_p[k];
    }
    let lambda_guess = bootstrap_adjoint_starts(problem, guess_times, &p_by_switch, opts)?;
    let theta0 = layout.pack(guess_times, &p_by_switch, &lambda_guess);

    let eval = |theta: &DVector<f64>| -> Result<DVector<f64>> {
        let (times, p_by_switch, lambdas) = layout.unpack(theta);
        let pass = coupled_forward(problem, &times, &lambdas, opts)?;
        residuals(problem, &pass, &p_by_switch)
    };
    let outcome = damped_newton(eval, theta0, &opts.newton)?;

    let (times, p_by_switch, lambdas) = layout.unpack(&outcome.unknowns);
    let pass = coupled_forward(problem, &times, &lambdas, opts)?;
    let input = HybridInput::continuous(pass.control_law.clone());
    let cost = evaluate_cost(&pass.trajectory, &problem.cost, &input)?;
    let realizable = is_realizable(&problem.sys, &pass.trajectory);
    Ok(HmpExtremal {
        trajectory: pass.trajectory,
        adjoint: pass.adjoint,
        control_law: pass.control_law,
        p_values: p_by_switch,
        switch_times: times,
        residual_norm: outcome.residual_norm,
        cost,
        newton_iterations: outcome.iterations,
        realizable,
    })
}

/// Run [`solve`] from a deterministic list of guesses and return the
/// cheapest realizable extremal (every autonomous segment must reach its
/// manifold first at the solved switch time).
pub fn solve_multistart(
    problem: &HmpProblem,
    guesses: &[(Vec<f64>, Vec<f64>)],
    opts: &HmpSolveOptions,
) -> Result<HmpExtremal> {
    let mut best: Option<HmpExtremal> = None;
    let mut last_err: Option<Error> = None;
    for (times, ps) in guesses {
        match solve(problem, times, ps, opts) {
            Ok(e) if e.realizable => {
                if best.as_ref().map_or(true, |b| e.cost < b.cost) {
                    best = Some(e);
                }
            }
            Ok(_) => {}
            Err(err) => last_err = Some(err),
        }
    }
    best.ok_or_else(|| {
        last_err.unwrap_or(Error::NonConvergence {
            residual: f64::INFINITY,
            iterations: 0,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn hamiltonian_hand_values() {
        // First preset, q1: H = u^2/2 + lambda x (u + 1).
        let p = presets::example1();
        let h = hamiltonian(
            &p.sys,
            &p.cost,
            Loc(0),
            &DVector::from_vec(vec![2.0]),
            &DVector::from_vec(vec![3.0]),
            &DVector::from_vec(vec![1.0]),
        );
        assert_relative_eq!(h, 12.5);

        // Second preset, q2: H = u^2/2 + l1 x2 + l2 u.
        let p2 = presets::example2();
        let h2 = hamiltonian(
            &p2.sys,
            &p2.cost,
            Loc(1),
            &DVector::from_vec(vec![1.0, 2.0]),
            &DVector::from_vec(vec![0.5, -1.0]),
            &DVector::from_vec(vec![3.0]),
        );
        assert_relative_eq!(h2, 2.5);
    }

    #[test]
    fn zero_adjoint_zero_running_cost_gives_zero_hamiltonian() {
        let p = presets::example1();
        let zero_cost = CostSpec::builder()
            .running(|_x: &State, _u: &Control| 0.0)
            .running(|_x: &State, _u: &Control| 0.0)
            .terminal(1, |x: &State| 0.5 * x[0] * x[0])
            .build()
            .unwrap();
        for u in [-2.0, 0.0, 1.5] {
            let h = hamiltonian(
                &p.sys,
                &zero_cost,
                Loc(0),
                &DVector::from_vec(vec![1.2]),
                &DVector::zeros(1),
                &DVector::from_vec(vec![u]),
            );
            assert_relative_eq!(h, 0.0);
        }
    }

    #[test]
    fn closed_form_minimizer_is_projected() {
        let p = presets::example1();
        // u* = -lambda x = -1 * 2 = -2 inside the box.
        let u = minimize_hamiltonian(
            &p.sys,
            &p.cost,
            Loc(0),
            &DVector::from_vec(vec![2.0]),
            &DVector::from_vec(vec![1.0]),
            p.minimizers[0].as_ref(),
        );
        assert_relative_eq!(u[0], -2.0, epsilon = 1e-12);
        // Unconstrained minimizer far outside the box lands on the boundary.
        let u = minimize_hamiltonian(
            &p.sys,
            &p.cost,
            Loc(0),
            &DVector::from_vec(vec![3.0]),
            &DVector::from_vec(vec![-5.0]),
            p.minimizers[0].as_ref(),
        );
        assert_relative_eq!(u[0], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn golden_section_matches_closed_form() {
        let p = presets::example2();
        let x = DVector::from_vec(vec![0.3, -0.2]);
        let lam = DVector::from_vec(vec![0.1, 0.7]);
        let u_gold = minimize_hamiltonian(&p.sys, &p.cost, Loc(0), &x, &lam, None);
        assert_relative_eq!(u_gold[0], -0.7, epsilon = 1e-7);
    }

    #[test]
    fn adjoint_constant_for_state_independent_data() {
        // f = u and l = u^2/2 have zero state derivatives, so lambda is
        // constant backward.
        let p = presets::lqr_scalar();
        let zero_l_cost = CostSpec::builder()
            .running(|_x: &State, u: &Control| 0.5 * u[0] * u[0])
            .terminal_with_grad(1, |x: &State| x[0], |_x: &State| {
                DVector::from_vec(vec![1.0])
            })
            .build()
            .unwrap();
        let seg = crate::simulator::integrate_segment(
            &p.sys,
            Loc(0),
            &DVector::from_vec(vec![1.0]),
            &|_t: f64, _x: &State| DVector::from_vec(vec![0.4]),
            (0.0, 1.0),
            &IntegratorConfig::default(),
        )
        .unwrap();
        let path = adjoint_backward(
            &p.sys,
            &zero_l_cost,
            &seg,
            DVector::from_vec(vec![1.0]),
            p.minimizers[0].as_ref(),
        )
        .unwrap();
        for v in &path.values {
            assert_relative_eq!(v[0], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn adjoint_rotation_in_oscillator_location() {
        // Second preset, q1: lambda' = (lambda2, -lambda1); integrating
        // backward from (1, 0) over a quarter period gives (0, 1).
        let p = presets::example2();
        let seg = crate::simulator::integrate_segment(
            &p.sys,
            Loc(0),
            &DVector::from_vec(vec![0.0, 1.0]),
            &|_t: f64, _x: &State| DVector::from_vec(vec![0.0]),
            (0.0, FRAC_PI_2),
            &IntegratorConfig::default(),
        )
        .unwrap();
        let path = adjoint_backward(
            &p.sys,
            &p.cost,
            &seg,
            DVector::from_vec(vec![1.0, 0.0]),
            p.minimizers[0].as_ref(),
        )
        .unwrap();
        let lam0 = path.start_value();
        assert!((lam0[0] - 0.0).abs() <= 1e-9, "lambda1(0) = {}", lam0[0]);
        assert!((lam0[1] - 1.0).abs() <= 1e-9, "lambda2(0) = {}", lam0[1]);
    }

    #[test]
    fn adjoint_backward_agrees_with_fine_step_oracle() {
        // First preset, q2, frozen state path: compare against a 10x finer
        // backward integration.
        let p = presets::example1();
        let seg = crate::simulator::integrate_segment(
            &p.sys,
            Loc(1),
            &DVector::from_vec(vec![-1.5]),
            &|_t: f64, _x: &State| DVector::from_vec(vec![0.2]),
            (0.5, 1.0),
            &IntegratorConfig::default(),
        )
        .unwrap();
        let coarse = adjoint_backward(
            &p.sys,
            &p.cost,
            &seg,
            DVector::from_vec(vec![0.8]),
            p.minimizers[1].as_ref(),
        )
        .unwrap();
        let seg_fine = crate::simulator::integrate_segment(
            &p.sys,
            Loc(1),
            &DVector::from_vec(vec![-1.5]),
            &|_t: f64, _x: &State| DVector::from_vec(vec![0.2]),
            (0.5, 1.0),
            &IntegratorConfig::with_step(1e-4),
        )
        .unwrap();
        let fine = adjoint_backward(
            &p.sys,
            &p.cost,
            &seg_fine,
            DVector::from_vec(vec![0.8]),
            p.minimizers[1].as_ref(),
        )
        .unwrap();
        assert!((coarse.start_value()[0] - fine.start_value()[0]).abs() <= 1e-9);
    }

    #[test]
    fn switch_condition_hand_value_first_preset() {
        // lambda(+) = 0.5 at x(-) = 1: grad(xi) = -1 and
        // grad(c) = -2x/(1+x^2)^2 = -1/2, so lambda(-) = -1.
        let p = presets::example1();
        let sigma = p.sys.event_by_name("flip").unwrap();
        let lam = adjoint_switch_condition(
            &p.sys,
            &p.cost,
            Loc(0),
            sigma,
            SwitchKind::Controlled,
            &DVector::from_vec(vec![0.5]),
            &DVector::from_vec(vec![1.0]),
            0.0,
        )
        .unwrap();
        assert_relative_eq!(lam[0], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn switch_condition_identity_jump_is_identity() {
        let p = presets::example2();
        let sigma = p.sys.event_by_name("touch").unwrap();
        let zero_cost = CostSpec::builder()
            .running(|_x: &State, u: &Control| 0.5 * u[0] * u[0])
            .running(|_x: &State, u: &Control| 0.5 * u[0] * u[0])
            .terminal(2, |_x: &State| 0.0)
            .build()
            .unwrap();
        let lam_plus = DVector::from_vec(vec![0.3, -0.4]);
        let lam = adjoint_switch_condition(
            &p.sys,
            &zero_cost,
            Loc(0),
            sigma,
            SwitchKind::Autonomous,
            &lam_plus,
            &DVector::from_vec(vec![1.0, 0.0]),
            0.0,
        )
        .unwrap();
        assert_relative_eq!(lam[0], lam_plus[0]);
        assert_relative_eq!(lam[1], lam_plus[1]);
    }

    #[test]
    fn switch_condition_second_preset_structure() {
        // lambda(-) = (lambda1(+) + x1, lambda2(+) + p).
        let p = presets::example2();
        let sigma = p.sys.event_by_name("touch").unwrap();
        let lam_plus = DVector::from_vec(vec![0.3, -0.4]);
        let x_minus = DVector::from_vec(vec![1.2, 0.0]);
        let p_mult = 0.25;
        let lam = adjoint_switch_condition(
            &p.sys,
            &p.cost,
            Loc(0),
            sigma,
            SwitchKind::Autonomous,
            &lam_plus,
            &x_minus,
            p_mult,
        )
        .unwrap();
        assert_relative_eq!(lam[0], 0.3 + 1.2, epsilon = 1e-12);
        assert_relative_eq!(lam[1], -0.4 + 0.25, epsilon = 1e-12);
    }
}
