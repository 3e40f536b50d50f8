//! Cost-sensitivity propagation along arbitrary admissible feedback:
//! the backward gradient equation with switch boundary conditions and the
//! explicit multiplier formula at autonomous switches.
//!
//! The sensitivity is taken with the realized control frozen as a function
//! of time: perturbing the state does not re-evaluate the feedback law, but
//! autonomous switching times still shift with the state, which is exactly
//! what the multiplier term accounts for. The finite-difference oracle in
//! [`sensitivity_fd_oracle`] probes the same construction: it freezes the
//! realized per-segment controls (constant extension at the segment edges),
//! re-simulates from perturbed initial states with crossing detection on,
//! and differences the evaluated costs.

use nalgebra::DVector;

use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::hmp::{adjoint_switch_condition, AdjointSegment};
use crate::simulator::{evaluate_cost, simulate, IntegratorConfig};
use crate::system::{ControlLaw, HybridInput, HybridSystem, LocationSequence};
use crate::trajectory::HybridTrajectory;
use crate::types::{Loc, State, SwitchKind};

/// A feedback rollout together with its backward cost gradient.
#[derive(Clone)]
pub struct SensitivityTrajectory {
    pub trajectory: HybridTrajectory,
    /// Gradient path per segment, on the trajectory knots.
    pub gradient: Vec<AdjointSegment>,
    /// One multiplier per switch; controlled switches carry zero.
    pub p_values: Vec<f64>,
}

impl SensitivityTrajectory {
    /// The cost gradient with respect to the state at time `t`.
    pub fn gradient_at(&self, t: f64) -> DVector<f64> {
        let i = self.trajectory.segment_index_at(t);
        self.gradient[i].sample(t)
    }

    /// Gradient with respect to the initial state.
    pub fn initial_gradient(&self) -> DVector<f64> {
        self.gradient[0].values[0].clone()
    }
}

/// Freeze the realized control of a rollout as per-segment functions of
/// time: the feedback is composed with the dense base path, held constant
/// beyond each segment's time range.
pub fn frozen_feedback_realization(
    traj: &HybridTrajectory,
    feedback: &ControlLaw,
) -> ControlLaw {
    let mut laws: Vec<std::sync::Arc<dyn Fn(f64, &State) -> DVector<f64> + Send + Sync>> =
        Vec::with_capacity(traj.segments.len());
    for (i, seg) in traj.segments.iter().enumerate() {
        let seg = seg.clone();
        let feedback = feedback.clone();
        laws.push(std::sync::Arc::new(move |t: f64, _x: &State| {
            let tc = t.clamp(seg.t_start(), seg.t_end());
            let x_base = seg.sample(tc);
            feedback.eval(tc, i, seg.loc, &x_base)
        }));
    }
    ControlLaw::PerSegment(laws)
}

/// Simulate the feedback and integrate the cost gradient backward along the
/// frozen rollout:
/// `d(grad J)/dt = -[(df/dx)^T grad J + dl/dx]` with terminal `grad g`, and
/// at switches `grad J(-) = grad(xi)^T grad J(+) + p grad m + grad c`, with
/// `p = 0` at controlled switches and the transversal-rate quotient at
/// autonomous ones.
#[allow(clippy::too_many_arguments)]
pub fn propagate_sensitivity(
    sys: &HybridSystem,
    cost: &CostSpec,
    feedback: &ControlLaw,
    seq: &LocationSequence,
    x0: &State,
    span: (f64, f64),
    controlled_times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<SensitivityTrajectory> {
    // Schedule the controlled steps; autonomous ones come from detection.
    let controlled_steps: Vec<usize> = seq
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind == SwitchKind::Controlled)
        .map(|(j, _)| j)
        .collect();
    if controlled_steps.len() != controlled_times.len() {
        return Err(Error::InvalidSchedule(format!(
            "{} controlled switch times for {} controlled steps",
            controlled_times.len(),
            controlled_steps.len()
        )));
    }
    let schedule: Vec<(f64, crate::types::EventId)> = controlled_steps
        .iter()
        .zip(controlled_times.iter())
        .map(|(&j, &t)| (t, seq.steps[j].event))
        .collect();
    let input = HybridInput::new(schedule, feedback.clone());
    let traj = simulate(sys, &input, seq.initial, x0, span, cfg)?;
    if traj.discrete_path() != seq.locations() {
        return Err(Error::InvalidSequence(format!(
            "feedback rollout visited {:?}, expected {:?}",
            traj.discrete_path(),
            seq.locations()
        )));
    }
    propagate_along(sys, cost, feedback, &traj, cfg)
}

/// Backward gradient pass along an existing rollout of `feedback`.
pub fn propagate_along(
    sys: &HybridSystem,
    cost: &CostSpec,
    feedback: &ControlLaw,
    traj: &HybridTrajectory,
    cfg: &IntegratorConfig,
) -> Result<SensitivityTrajectory> {
    let num_segments = traj.segments.len();
    let mut gradient = vec![
        AdjointSegment {
            times: vec![],
            values: vec![],
            derivs: vec![]
        };
        num_segments
    ];
    let mut p_values = vec![0.0; traj.switches.len()];

    let mut grad_end = (cost.terminal_gradient())(&traj.final_state());
    for i in (0..num_segments).rev() {
        let seg = &traj.segments[i];
        let q = seg.loc;
        let jac = sys.field_jacobian(q);
        let lgrad = cost.running_gradient(q);
        let control_at = |t: f64| {
            let tc = t.clamp(seg.t_start(), seg.t_end());
            feedback.eval(tc, i, q, &seg.sample(tc))
        };
        let rhs = |t: f64, g: &DVector<f64>| -> DVector<f64> {
            let x = seg.sample(t);
            let u = control_at(t);
            -(jac(&x, &u).transpose() * g) - lgrad(&x, &u)
        };

        let n = seg.times.len();
        let mut values = vec![DVector::zeros(0); n];
        let mut derivs = vec![DVector::zeros(0); n];
        values[n - 1] = grad_end.clone();
        derivs[n - 1] = rhs(seg.times[n - 1], &values[n - 1]);
        for k in (0..n.saturating_sub(1)).rev() {
            let (t1, t0) = (seg.times[k + 1], seg.times[k]);
            let h = t0 - t1;
            let g = &values[k + 1];
            let k1 = rhs(t1, g);
            let g2 = g + &k1 * (0.5 * h);
            let k2 = rhs(t1 + 0.5 * h, &g2);
            let g3 = g + &k2 * (0.5 * h);
            let k3 = rhs(t1 + 0.5 * h, &g3);
            let g4 = g + &k3 * h;
            let k4 = rhs(t0, &g4);
            let next = g + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::Blowup { time: t0 });
            }
            derivs[k] = rhs(t0, &next);
            values[k] = next;
        }
        gradient[i] = AdjointSegment {
            times: seg.times.clone(),
            values,
            derivs,
        };

        if i > 0 {
            let sw = &traj.switches[i - 1];
            let grad_plus = gradient[i].start_value().clone();
            let p = match sw.kind {
                SwitchKind::Controlled => 0.0,
                SwitchKind::Autonomous => {
                    let pre_seg = &traj.segments[i - 1];
                    let u_pre = {
                        let tc = sw.time.clamp(pre_seg.t_start(), pre_seg.t_end());
                        feedback.eval(tc, i - 1, sw.from, &pre_seg.sample(tc))
                    };
                    let u_post = control_at(sw.time);
                    multiplier_at_autonomous_switch(
                        sys,
                        cost,
                        sw.from,
                        sw.to,
                        sw.event,
                        &sw.pre_state,
                        &sw.post_state,
                        &u_pre,
                        &u_post,
                        &grad_plus,
                        cfg.transversality_floor,
                    )?
                }
            };
            p_values[i - 1] = p;
            grad_end = adjoint_switch_condition(
                sys,
                cost,
                sw.from,
                sw.event,
                sw.kind,
                &grad_plus,
                &sw.pre_state,
                p,
            )?;
        }
    }
    Ok(SensitivityTrajectory {
        trajectory: traj.clone(),
        gradient,
        p_values,
    })
}

/// The explicit multiplier at an autonomous switch:
/// `p = [grad J(+)^T (f_to(xi(x), u+) - grad(xi) f_from(x, u-))
///       + (l_to(xi(x), u+) - l_from(x, u-))] / [grad m^T f_from(x, u-)]`.
#[allow(clippy::too_many_arguments)]
pub fn multiplier_at_autonomous_switch(
    sys: &HybridSystem,
    cost: &CostSpec,
    from: Loc,
    to: Loc,
    event: crate::types::EventId,
    x_pre: &State,
    x_post: &State,
    u_pre: &DVector<f64>,
    u_post: &DVector<f64>,
    grad_plus: &DVector<f64>,
    transversality_floor: f64,
) -> Result<f64> {
    let manifold = sys
        .manifold(from, to)
        .ok_or(Error::NoManifold { from, to })?;
    let f_pre = sys.field(from)(x_pre, u_pre);
    let f_post = sys.field(to)(x_post, u_post);
    let grad_xi = match sys.jump_map(event) {
        Some(j) => (j.jacobian)(x_pre),
        None => nalgebra::DMatrix::identity(x_pre.len(), x_pre.len()),
    };
    let denom = (manifold.gradient)(x_pre).dot(&f_pre);
    if denom.abs() < transversality_floor {
        return Err(Error::TransversalityFloor {
            time: f64::NAN,
            rate: denom,
            floor: transversality_floor,
        });
    }
    let field_gap = &f_post - &grad_xi * &f_pre;
    let l_pre = cost.running(from)(x_pre, u_pre);
    let l_post = cost.running(to)(x_post, u_post);
    Ok((grad_plus.dot(&field_gap) + (l_post - l_pre)) / denom)
}

/// Central finite difference of the frozen-realization cost with respect to
/// the initial state: re-simulates from `x0 +- h e_i` under the frozen
/// controls (autonomous crossings re-detected, controlled schedule fixed).
#[allow(clippy::too_many_arguments)]
pub fn sensitivity_fd_oracle(
    sys: &HybridSystem,
    cost: &CostSpec,
    sensitivity: &SensitivityTrajectory,
    feedback: &ControlLaw,
    q0: Loc,
    x0: &State,
    span: (f64, f64),
    h: f64,
    cfg: &IntegratorConfig,
) -> Result<DVector<f64>> {
    let traj = &sensitivity.trajectory;
    let frozen = frozen_feedback_realization(traj, feedback);
    let schedule: Vec<(f64, crate::types::EventId)> = traj
        .switches
        .iter()
        .filter(|s| s.kind == SwitchKind::Controlled)
        .map(|s| (s.time, s.event))
        .collect();
    let input = HybridInput::new(schedule, frozen);
    let base_path = traj.discrete_path();

    let n = x0.len();
    let mut grad = DVector::zeros(n);
    for i in 0..n {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[i] += h;
        xm[i] -= h;
        let tp = simulate(sys, &input, q0, &xp, span, cfg)?;
        let tm = simulate(sys, &input, q0, &xm, span, cfg)?;
        if tp.discrete_path() != base_path || tm.discrete_path() != base_path {
            return Err(Error::Validation(
                "perturbed rollout changed the discrete path; reduce h".into(),
            ));
        }
        let jp = evaluate_cost(&tp, cost, &input)?;
        let jm = evaluate_cost(&tm, cost, &input)?;
        grad[i] = (jp - jm) / (2.0 * h);
    }
    Ok(grad)
}
