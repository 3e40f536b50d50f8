//! Hybrid execution: fixed-step RK4 integration, autonomous crossing
//! location by bisection, jump application and hybrid cost evaluation.
//!
//! The integrator is deliberately fixed-step so that event times and whole
//! trajectories are bit-reproducible across runs; dense output between knots
//! is cubic Hermite built from the stored field values.


use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::system::{ControlLaw, FrozenSegmentControl, HybridInput, HybridSystem, LocationSequence};
use crate::trajectory::{HybridTrajectory, Segment, SwitchRecord};
use crate::types::{Control, Loc, State, SwitchKind};

/// Integration and event-location parameters.
#[derive(Debug, Clone)]
pub struct IntegratorConfig {
    /// Fixed RK4 step.
    pub step: f64,
    /// `|m|` tolerance at a located crossing.
    pub crossing_tol: f64,
    /// Maximum number of switches before the Zeno guard trips.
    pub max_switches: usize,
    /// Minimum `|grad m . f|` at a crossing.
    pub transversality_floor: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            step: 1e-3,
            crossing_tol: 1e-10,
            max_switches: 64,
            transversality_floor: 1e-8,
        }
    }
}

impl IntegratorConfig {
    pub fn with_step(step: f64) -> Self {
        IntegratorConfig {
            step,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.step > 0.0
            && self.crossing_tol > 0.0
            && self.max_switches > 0
            && self.transversality_floor > 0.0
        {
            Ok(())
        } else {
            Err(Error::Config(
                "integrator config entries must be strictly positive".into(),
            ))
        }
    }
}

/// One classical RK4 step of `x' = f(x, u(t, x))` from `(t, x)` over `h`.
pub fn rk4_step<F, U>(field: &F, u: &U, t: f64, x: &State, h: f64) -> State
where
    F: Fn(&State, &Control) -> State + ?Sized,
    U: Fn(f64, &State) -> Control + ?Sized,
{
    let k1 = field(x, &u(t, x));
    let x2 = x + &k1 * (0.5 * h);
    let k2 = field(&x2, &u(t + 0.5 * h, &x2));
    let x3 = x + &k2 * (0.5 * h);
    let k3 = field(&x3, &u(t + 0.5 * h, &x3));
    let x4 = x + &k3 * h;
    let k4 = field(&x4, &u(t + h, &x4));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Integrate one segment on `[t_a, t_b]` with fixed-step RK4 (final partial
/// step shortened). Errors with the blow-up time if the state goes
/// non-finite.
pub fn integrate_segment<U>(
    sys: &HybridSystem,
    q: Loc,
    x0: &State,
    control: &U,
    span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<Segment>
where
    U: Fn(f64, &State) -> Control + ?Sized,
{
    cfg.validate()?;
    let (t_a, t_b) = span;
    if !(t_a < t_b) {
        return Err(Error::Config(format!("empty span [{t_a}, {t_b}]")));
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::Blowup { time: t_a });
    }
    let field = sys.field(q);
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut derivs = Vec::new();
    let mut controls = Vec::new();

    let mut t = t_a;
    let mut x = x0.clone();
    let mut k = 0usize;
    loop {
        let u = control(t, &x);
        sys.check_control(q, &u, t)?;
        times.push(t);
        derivs.push(field(&x, &u));
        states.push(x.clone());
        controls.push(u);
        if t >= t_b {
            break;
        }
        k += 1;
        let t_next = next_knot(t_a, t_b, cfg.step, k);
        let x_next = rk4_step(field.as_ref(), control, t, &x, t_next - t);
        if !x_next.iter().all(|v| v.is_finite()) {
            return Err(Error::Blowup { time: t_next });
        }
        t = t_next;
        x = x_next;
    }
    Ok(Segment {
        loc: q,
        times,
        states,
        derivs,
        controls,
    })
}

/// Knot `k` of the uniform grid anchored at `t_a`, snapped to `t_b` when the
/// remainder would be negligible.
fn next_knot(t_a: f64, t_b: f64, step: f64, k: usize) -> f64 {
    let t = t_a + k as f64 * step;
    if t >= t_b || t_b - t < 1e-12 * (t_b - t_a).max(1.0) {
        t_b
    } else {
        t
    }
}

/// A located transversal arrival on a switching manifold.
#[derive(Clone)]
pub struct Crossing {
    pub target: Loc,
    pub t_star: f64,
    pub x_pre: State,
    /// Manifold value at the located pre-jump state.
    pub residual: f64,
    /// `grad m . f` at the crossing.
    pub rate: f64,
    pub transversal: bool,
}

/// Locate the crossing of `m` inside one integration-step bracket by
/// bisection on the step length: `x(t)` is re-evaluated as a single RK4 step
/// from the left knot. Requires a sign change over the bracket; errors on a
/// non-transversal arrival.
pub fn locate_crossing<U>(
    sys: &HybridSystem,
    q: Loc,
    target: Loc,
    control: &U,
    bracket: (f64, &State, f64, &State),
    cfg: &IntegratorConfig,
) -> Result<Crossing>
where
    U: Fn(f64, &State) -> Control + ?Sized,
{
    let cross = bisect_crossing(sys, q, target, control, bracket, cfg)?;
    if !cross.transversal {
        return Err(Error::ManifoldTermination {
            time: cross.t_star,
            rate: cross.rate,
        });
    }
    Ok(cross)
}

fn bisect_crossing<U>(
    sys: &HybridSystem,
    q: Loc,
    target: Loc,
    control: &U,
    bracket: (f64, &State, f64, &State),
    cfg: &IntegratorConfig,
) -> Result<Crossing>
where
    U: Fn(f64, &State) -> Control + ?Sized,
{
    let (t_a, x_a, t_b, x_b) = bracket;
    let manifold = sys
        .manifold(q, target)
        .ok_or(Error::NoManifold { from: q, to: target })?;
    let m_a = (manifold.value)(x_a);
    let m_b = (manifold.value)(x_b);
    let field = sys.field(q);

    let eval = |t: f64| -> State {
        if t <= t_a {
            return x_a.clone();
        }
        rk4_step(field.as_ref(), control, t_a, x_a, t - t_a)
    };

    let (mut t_star, mut x_star, mut m_star);
    if m_b == 0.0 {
        t_star = t_b;
        x_star = x_b.clone();
        m_star = 0.0;
    } else {
        if m_a * m_b > 0.0 {
            return Err(Error::Validation(format!(
                "no sign change over the bracket: m({t_a}) = {m_a:.3e}, m({t_b}) = {m_b:.3e}"
            )));
        }
        let (mut lo, mut hi) = (t_a, t_b);
        let mut m_lo = m_a;
        t_star = 0.5 * (lo + hi);
        x_star = eval(t_star);
        m_star = (manifold.value)(&x_star);
        for _ in 0..80 {
            if m_star.abs() <= cfg.crossing_tol {
                break;
            }
            if m_lo * m_star <= 0.0 {
                hi = t_star;
            } else {
                lo = t_star;
                m_lo = m_star;
            }
            t_star = 0.5 * (lo + hi);
            x_star = eval(t_star);
            m_star = (manifold.value)(&x_star);
        }
    }

    let u_star = control(t_star, &x_star);
    let rate = (manifold.gradient)(&x_star).dot(&field(&x_star, &u_star));
    Ok(Crossing {
        target,
        t_star,
        x_pre: x_star,
        residual: m_star,
        rate,
        transversal: rate.abs() >= cfg.transversality_floor,
    })
}

/// Execute a hybrid input on a hybrid system.
///
/// Integrates segment by segment, applying controlled switches at their
/// scheduled times and autonomous switches at located manifold crossings.
/// Crossing detection scans manifold signs at step knots only, so two
/// crossings inside one step are missed by construction; keep the step small
/// relative to the dynamics.
pub fn simulate(
    sys: &HybridSystem,
    input: &HybridInput,
    q0: Loc,
    x0: &State,
    span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<HybridTrajectory> {
    cfg.validate()?;
    let (t0, tf) = span;
    input.validate_schedule(t0, tf)?;
    if x0.len() != sys.state_dim(q0) {
        return Err(Error::DimensionMismatch {
            expected: sys.state_dim(q0),
            got: x0.len(),
            context: "initial state".into(),
        });
    }

    let mut segments: Vec<Segment> = Vec::new();
    let mut switches: Vec<SwitchRecord> = Vec::new();
    let mut q = q0;
    let mut x = x0.clone();
    let mut t = t0;
    let mut sched = input.schedule.iter().peekable();

    'segments: loop {
        let seg_idx = segments.len();
        let next_controlled = sched.peek().map(|&&(tc, _)| tc);
        let t_stop = next_controlled.unwrap_or(tf).min(tf);
        let control = |tt: f64, xx: &State| input.control.eval(tt, seg_idx, q, xx);
        let field = sys.field(q);

        let mut times = vec![t];
        let u0 = control(t, &x);
        sys.check_control(q, &u0, t)?;
        let mut derivs = vec![field(&x, &u0)];
        let mut states = vec![x.clone()];
        let mut controls = vec![u0];

        let mut m_prev: Vec<(Loc, f64)> = sys
            .manifolds_from(q)
            .map(|(to, m)| (to, (m.value)(&x)))
            .collect();
        m_prev.sort_by_key(|(to, _)| to.0);

        let mut t_k = t;
        let mut x_k = x.clone();
        let mut k = 0usize;
        while t_k < t_stop {
            k += 1;
            let t_next = next_knot(t, t_stop, cfg.step, k);
            let x_next = rk4_step(field.as_ref(), &control, t_k, &x_k, t_next - t_k);
            if !x_next.iter().all(|v| v.is_finite()) {
                return Err(Error::Blowup { time: t_next });
            }

            // Scan all manifolds out of q for a sign change over this step.
            let mut best: Option<Crossing> = None;
            for (to, m_old) in m_prev.iter_mut() {
                let manifold = sys.manifold(q, *to).unwrap();
                let m_new = (manifold.value)(&x_next);
                let crossed = (*m_old * m_new < 0.0) || (m_new == 0.0 && *m_old != 0.0);
                if crossed {
                    let cross = bisect_crossing(
                        sys,
                        q,
                        *to,
                        &control,
                        (t_k, &x_k, t_next, &x_next),
                        cfg,
                    )?;
                    let earlier = match &best {
                        None => true,
                        Some(b) => {
                            cross.t_star < b.t_star
                                || (cross.t_star == b.t_star && cross.target.0 < b.target.0)
                        }
                    };
                    if earlier {
                        best = Some(cross);
                    }
                }
                *m_old = m_new;
            }

            if let Some(cross) = best {
                if !cross.transversal {
                    return Err(Error::ManifoldTermination {
                        time: cross.t_star,
                        rate: cross.rate,
                    });
                }
                // A controlled switch scheduled inside the same step is ambiguous.
                if let Some(tc) = next_controlled {
                    if tc <= t_next {
                        return Err(Error::AmbiguousSwitch { time: cross.t_star });
                    }
                }
                if switches.len() >= cfg.max_switches {
                    return Err(Error::SwitchBudgetExhausted {
                        max_switches: cfg.max_switches,
                        time: cross.t_star,
                    });
                }
                let u_star = control(cross.t_star, &cross.x_pre);
                let f_star = field(&cross.x_pre, &u_star);
                times.push(cross.t_star);
                states.push(cross.x_pre.clone());
                derivs.push(f_star);
                controls.push(u_star);
                segments.push(Segment {
                    loc: q,
                    times,
                    states,
                    derivs,
                    controls,
                });

                let manifold = sys.manifold(q, cross.target).unwrap();
                let sigma = manifold.event;
                let (q_next, x_post) = sys.jump(sigma, q, &cross.x_pre)?;
                debug_assert_eq!(q_next, cross.target);
                switches.push(SwitchRecord {
                    time: cross.t_star,
                    kind: SwitchKind::Autonomous,
                    event: sigma,
                    from: q,
                    to: q_next,
                    pre_state: cross.x_pre.clone(),
                    post_state: x_post.clone(),
                    manifold_value: Some(cross.residual),
                });
                q = q_next;
                x = x_post;
                t = cross.t_star;
                continue 'segments;
            }

            times.push(t_next);
            states.push(x_next.clone());
            let u_next = control(t_next, &x_next);
            sys.check_control(q, &u_next, t_next)?;
            derivs.push(field(&x_next, &u_next));
            controls.push(u_next);
            t_k = t_next;
            x_k = x_next;
        }

        segments.push(Segment {
            loc: q,
            times,
            states,
            derivs,
            controls,
        });

        if next_controlled.is_none() || t_stop >= tf {
            break;
        }
        // Controlled switch at its scheduled time.
        let &(tc, sigma) = sched.next().unwrap();
        if switches.len() >= cfg.max_switches {
            return Err(Error::SwitchBudgetExhausted {
                max_switches: cfg.max_switches,
                time: tc,
            });
        }
        let pre_state = x_k.clone();
        let (q_next, x_post) = sys.jump(sigma, q, &pre_state)?;
        switches.push(SwitchRecord {
            time: tc,
            kind: SwitchKind::Controlled,
            event: sigma,
            from: q,
            to: q_next,
            pre_state,
            post_state: x_post.clone(),
            manifold_value: None,
        });
        q = q_next;
        x = x_post;
        t = tc;
    }

    Ok(HybridTrajectory {
        segments,
        switches,
        t0,
        tf,
    })
}

/// Execute a fixed discrete sequence with prescribed switch times, with no
/// crossing detection. This is the forward pass used by the shooting
/// solvers, where the switching structure is held fixed and the times are
/// unknowns.
pub fn simulate_forced(
    sys: &HybridSystem,
    seq: &LocationSequence,
    switch_times: &[f64],
    control: &ControlLaw,
    x0: &State,
    span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<HybridTrajectory> {
    cfg.validate()?;
    let (t0, tf) = span;
    if switch_times.len() != seq.num_switches() {
        return Err(Error::InvalidSchedule(format!(
            "{} switch times for {} sequence steps",
            switch_times.len(),
            seq.num_switches()
        )));
    }
    let mut prev = t0;
    for &tj in switch_times {
        if tj <= prev || tj >= tf {
            return Err(Error::InvalidSchedule(format!(
                "forced switch time {tj} outside ({prev}, {tf})"
            )));
        }
        prev = tj;
    }

    let mut segments = Vec::new();
    let mut switches = Vec::new();
    let mut x = x0.clone();
    let mut t = t0;
    for (i, step) in seq.steps.iter().enumerate() {
        let q = seq.location(i);
        let tj = switch_times[i];
        let law = |tt: f64, xx: &State| control.eval(tt, i, q, xx);
        let seg = integrate_segment(sys, q, &x, &law, (t, tj), cfg)?;
        let pre_state = seg.end_state().clone();
        segments.push(seg);
        let (q_next, x_post) = sys.jump(step.event, q, &pre_state)?;
        let manifold_value = sys
            .manifold(q, q_next)
            .map(|m| (m.value)(&pre_state));
        switches.push(SwitchRecord {
            time: tj,
            kind: step.kind,
            event: step.event,
            from: q,
            to: q_next,
            pre_state,
            post_state: x_post.clone(),
            manifold_value,
        });
        x = x_post;
        t = tj;
    }
    let q_last = seq.location(seq.num_switches());
    let last = seq.num_switches();
    let law = |tt: f64, xx: &State| control.eval(tt, last, q_last, xx);
    segments.push(integrate_segment(sys, q_last, &x, &law, (t, tf), cfg)?);

    Ok(HybridTrajectory {
        segments,
        switches,
        t0,
        tf,
    })
}

/// Hybrid cost of a simulated trajectory: per-interval Simpson quadrature of
/// the running costs on the stored knots (dense midpoints from the Hermite
/// output and the input's control law), plus switching and terminal costs.
pub fn evaluate_cost(
    traj: &HybridTrajectory,
    cost: &CostSpec,
    input: &HybridInput,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, seg) in traj.segments.iter().enumerate() {
        let l = cost.running(seg.loc);
        let mut l_knots: Vec<f64> = Vec::with_capacity(seg.times.len());
        for k in 0..seg.times.len() {
            l_knots.push(l(&seg.states[k], &seg.controls[k]));
        }
        for k in 0..seg.times.len().saturating_sub(1) {
            let (ta, tb) = (seg.times[k], seg.times[k + 1]);
            let tm = 0.5 * (ta + tb);
            let xm = seg.sample(tm);
            let um = input.control.eval(tm, i, seg.loc, &xm);
            let lm = l(&xm, &um);
            total += (tb - ta) / 6.0 * (l_knots[k] + 4.0 * lm + l_knots[k + 1]);
        }
    }
    for sw in &traj.switches {
        total += cost.switching_value(sw.event, &sw.pre_state);
    }
    total += (cost.terminal())(&traj.final_state());
    Ok(total)
}

/// Freeze the realized control of a trajectory as per-segment time
/// functions (linear interpolation inside each segment, constant extension
/// outside). Used to probe cost sensitivity around a trajectory without
/// re-evaluating a feedback law.
pub fn frozen_realization(traj: &HybridTrajectory) -> ControlLaw {
    ControlLaw::Frozen(
        traj.segments
            .iter()
            .map(|seg| FrozenSegmentControl {
                times: seg.times.clone(),
                values: seg.controls.clone(),
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use nalgebra::DVector;
    use crate::system::SequenceStep;
    use approx::assert_relative_eq;
    use std::f64::consts::{E, FRAC_PI_2, FRAC_PI_4};
    use std::sync::Arc;

    fn scalar_sys(f: impl Fn(&State, &Control) -> State + Send + Sync + 'static) -> HybridSystem {
        HybridSystem::builder()
            .location(Arc::new(f), vec![-10.0], vec![10.0], 1)
            .build()
            .unwrap()
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let sys = scalar_sys(|_x, u| u.clone());
        let seg = integrate_segment(
            &sys,
            Loc(0),
            &DVector::from_vec(vec![1.0]),
            &|_t: f64, _x: &State| DVector::from_vec(vec![2.0]),
            (0.0, 1.0),
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert_relative_eq!(seg.end_state()[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn exponential_growth_meets_rk4_accuracy() {
        let sys = scalar_sys(|x, _u| x.clone());
        let seg = integrate_segment(
            &sys,
            Loc(0),
            &DVector::from_vec(vec![1.0]),
            &|_t: f64, _x: &State| DVector::zeros(1),
            (0.0, 1.0),
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert!((seg.end_state()[0] - E).abs() <= 1e-10);
    }

    #[test]
    fn harmonic_segment_tracks_closed_form() {
        let p = presets::example2();
        let seg = integrate_segment(
            &p.sys,
            Loc(0),
            &DVector::from_vec(vec![0.0, 1.0]),
            &|_t: f64, _x: &State| DVector::from_vec(vec![0.0]),
            (0.0, FRAC_PI_4),
            &IntegratorConfig::default(),
        )
        .unwrap();
        let x = seg.end_state();
        assert!((x[0] - FRAC_PI_4.sin()).abs() <= 1e-9);
        assert!((x[1] - FRAC_PI_4.cos()).abs() <= 1e-9);
    }

    #[test]
    fn rk4_order_on_exponential() {
        let sys = scalar_sys(|x, _u| x.clone());
        let err = |h: f64| {
            let seg = integrate_segment(
                &sys,
                Loc(0),
                &DVector::from_vec(vec![1.0]),
                &|_t: f64, _x: &State| DVector::zeros(1),
                (0.0, 1.0),
                &IntegratorConfig::with_step(h),
            )
            .unwrap();
            (seg.end_state()[0] - E).abs()
        };
        let order = (err(0.1) / err(0.05)).log2();
        assert!(order >= 3.9, "measured order {order}");
    }

    #[test]
    fn blow_up_is_reported_with_time() {
        let sys = scalar_sys(|x, _u| {
            DVector::from_vec(vec![x[0] * x[0] * x[0] * 1000.0])
        });
        let err = integrate_segment(
            &sys,
            Loc(0),
            &DVector::from_vec(vec![2.0]),
            &|_t: f64, _x: &State| DVector::zeros(1),
            (0.0, 10.0),
            &IntegratorConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Blowup { .. }));
    }

    #[test]
    fn linear_decay_crossing_is_located_at_one() {
        // x2' = -1 from x2 = 1: crossing of m = x2 at t = 1, rate -1.
        let sys = HybridSystem::builder()
            .location(
                Arc::new(|_x: &State, _u: &Control| DVector::from_vec(vec![-1.0])),
                vec![],
                vec![],
                1,
            )
            .location(
                Arc::new(|_x: &State, _u: &Control| DVector::zeros(1)),
                vec![],
                vec![],
                1,
            )
            .event("hit")
            .autonomous_transition(
                0,
                1,
                "hit",
                Arc::new(|x: &State| x[0]),
                Arc::new(|_x: &State| DVector::from_vec(vec![1.0])),
            )
            .build()
            .unwrap();
        let input = HybridInput::continuous(ControlLaw::Constant(DVector::zeros(0)));
        let traj = simulate(
            &sys,
            &input,
            Loc(0),
            &DVector::from_vec(vec![1.0]),
            (0.0, 2.0),
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert_eq!(traj.num_switches(), 1);
        let sw = &traj.switches[0];
        assert!((sw.time - 1.0).abs() <= 1e-10);
        assert!(sw.manifold_value.unwrap().abs() <= 1e-10);
    }

    #[test]
    fn harmonic_crossing_at_half_pi() {
        let p = presets::example2();
        let input = HybridInput::continuous(ControlLaw::constant(0.0));
        let traj = simulate(
            &p.sys,
            &input,
            Loc(0),
            &DVector::from_vec(vec![0.0, 1.0]),
            (0.0, 4.0),
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert_eq!(traj.num_switches(), 1);
        let sw = &traj.switches[0];
        assert!(
            (sw.time - FRAC_PI_2).abs() <= 1e-8,
            "crossing at {} vs pi/2",
            sw.time
        );
        assert!((sw.pre_state[0] - 1.0).abs() <= 1e-8);
        assert!(sw.pre_state[1].abs() <= 1e-10);
        // Afterwards the double integrator with u = 0 freezes the state.
        let xf = traj.final_state();
        assert!((xf[0] - 1.0).abs() <= 1e-7);
        assert!(xf[1].abs() <= 1e-9);
    }

    #[test]
    fn forced_switch_follows_both_flows() {
        // First preset with u = 0: x = e^t before the switch at 0.5, then
        // x(t) = -e^{0.5} e^{-(t-0.5)}.
        let p = presets::example1();
        let sigma = p.sys.event_by_name("flip").unwrap();
        let input = HybridInput::new(vec![(0.5, sigma)], ControlLaw::constant(0.0));
        let traj = simulate(
            &p.sys,
            &input,
            Loc(0),
            &DVector::from_vec(vec![1.0]),
            (0.0, 1.0),
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert_eq!(traj.num_switches(), 1);
        let sw = &traj.switches[0];
        assert_relative_eq!(sw.pre_state[0], 0.5f64.exp(), epsilon = 1e-9);
        assert_relative_eq!(sw.post_state[0], -(0.5f64.exp()), epsilon = 1e-9);
        let expected_tf = -(0.5f64.exp()) * (-0.5f64).exp();
        assert_relative_eq!(traj.final_state()[0], expected_tf, epsilon = 1e-9);
    }

    #[test]
    fn empty_schedule_equals_single_segment() {
        let sys = scalar_sys(|x, _u| x.clone());
        let input = HybridInput::continuous(ControlLaw::Constant(DVector::zeros(1)));
        let traj = simulate(
            &sys,
            &input,
            Loc(0),
            &DVector::from_vec(vec![1.0]),
            (0.0, 1.0),
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert_eq!(traj.segments.len(), 1);
        assert_eq!(traj.num_switches(), 0);
        let seg = integrate_segment(
            &sys,
            Loc(0),
            &DVector::from_vec(vec![1.0]),
            &|_t: f64, _x: &State| DVector::zeros(1),
            (0.0, 1.0),
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert_eq!(traj.final_state(), *seg.end_state());
    }

    #[test]
    fn reruns_are_bit_identical() {
        let p = presets::example2();
        let input = HybridInput::continuous(ControlLaw::constant(0.1));
        let run = || {
            simulate(
                &p.sys,
                &input,
                Loc(0),
                &DVector::from_vec(vec![0.0, 1.0]),
                (0.0, 4.0),
                &IntegratorConfig::default(),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.segments.len(), b.segments.len());
        for (sa, sb) in a.segments.iter().zip(b.segments.iter()) {
            assert_eq!(sa.times, sb.times);
            assert_eq!(sa.states, sb.states);
        }
        assert_eq!(a.switches.len(), b.switches.len());
        for (wa, wb) in a.switches.iter().zip(b.switches.iter()) {
            assert_eq!(wa.time, wb.time);
            assert_eq!(wa.pre_state, wb.pre_state);
        }
    }

    #[test]
    fn ambiguous_switch_is_detected() {
        // Schedule a controlled flip inside the very integration step in
        // which the manifold crossing of the second preset fires.
        let p = presets::example2();
        let sigma = p.sys.event_by_name("touch").unwrap();
        let input = HybridInput::new(vec![(1.571, sigma)], ControlLaw::constant(0.0));
        let err = simulate(
            &p.sys,
            &input,
            Loc(0),
            &DVector::from_vec(vec![0.0, 1.0]),
            (0.0, 4.0),
            &IntegratorConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::AmbiguousSwitch { .. }));
    }

    #[test]
    fn zeno_guard_trips() {
        // A manifold hit from both sides with sign-flipping dynamics: the
        // bouncing flow keeps re-crossing until the budget is exhausted.
        let sys = HybridSystem::builder()
            .location(
                Arc::new(|_x: &State, _u: &Control| DVector::from_vec(vec![-1.0])),
                vec![],
                vec![],
                1,
            )
            .location(
                Arc::new(|_x: &State, _u: &Control| DVector::from_vec(vec![1.0])),
                vec![],
                vec![],
                1,
            )
            .event("down")
            .event("up")
            .autonomous_transition(
                0,
                1,
                "down",
                Arc::new(|x: &State| x[0]),
                Arc::new(|_x: &State| DVector::from_vec(vec![1.0])),
            )
            .autonomous_transition(
                1,
                0,
                "up",
                Arc::new(|x: &State| x[0] - 0.01),
                Arc::new(|_x: &State| DVector::from_vec(vec![1.0])),
            )
            .build()
            .unwrap();
        let input = HybridInput::continuous(ControlLaw::Constant(DVector::zeros(0)));
        let cfg = IntegratorConfig {
            max_switches: 8,
            ..Default::default()
        };
        let err = simulate(
            &sys,
            &input,
            Loc(0),
            &DVector::from_vec(vec![0.5]),
            (0.0, 10.0),
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::SwitchBudgetExhausted { .. }));
    }

    #[test]
    fn terminal_only_cost_reads_final_state() {
        let sys = scalar_sys(|_x, _u| DVector::zeros(1));
        let cost = CostSpec::builder()
            .running(|_x: &State, _u: &Control| 0.0)
            .terminal(1, |x: &State| x[0])
            .build()
            .unwrap();
        let input = HybridInput::continuous(ControlLaw::Constant(DVector::zeros(1)));
        let traj = simulate(
            &sys,
            &input,
            Loc(0),
            &DVector::from_vec(vec![4.0]),
            (0.0, 1.0),
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert_relative_eq!(evaluate_cost(&traj, &cost, &input).unwrap(), 4.0);
    }

    #[test]
    fn forced_switch_cost_matches_closed_form() {
        let p = presets::example1();
        let sigma = p.sys.event_by_name("flip").unwrap();
        let ts = 0.4;
        let input = HybridInput::new(vec![(ts, sigma)], ControlLaw::constant(0.0));
        let traj = simulate(
            &p.sys,
            &input,
            Loc(0),
            &DVector::from_vec(vec![1.0]),
            (0.0, 1.0),
            &IntegratorConfig::default(),
        )
        .unwrap();
        let j = evaluate_cost(&traj, &p.cost, &input).unwrap();
        let x_pre = ts.exp();
        let x_f = -x_pre * (-(1.0 - ts)).exp();
        let expected = 1.0 / (1.0 + x_pre * x_pre) + 0.5 * x_f * x_f;
        assert_relative_eq!(j, expected, epsilon = 1e-9);
    }

    #[test]
    fn cost_is_additive_over_a_split() {
        // J over [0, tf] equals J over [0, tm] (no terminal) plus the
        // cost to go over [tm, tf], for a non-switch tm.
        let p = presets::example1();
        let sigma = p.sys.event_by_name("flip").unwrap();
        let input = HybridInput::new(vec![(0.5, sigma)], ControlLaw::constant(0.3));
        let cfg = IntegratorConfig::default();
        let x0 = DVector::from_vec(vec![1.0]);
        let full = simulate(&p.sys, &input, Loc(0), &x0, (0.0, 1.0), &cfg).unwrap();
        let j_full = evaluate_cost(&full, &p.cost, &input).unwrap();

        let tm = 0.75;
        let first = simulate(&p.sys, &input, Loc(0), &x0, (0.0, tm), &cfg).unwrap();
        let zero_terminal = CostSpec::builder()
            .running_with_grad(
                |_x: &State, u: &Control| 0.5 * u[0] * u[0],
                |x: &State, _u: &Control| DVector::zeros(x.len()),
            )
            .running_with_grad(
                |_x: &State, u: &Control| 0.5 * u[0] * u[0],
                |x: &State, _u: &Control| DVector::zeros(x.len()),
            )
            .switching(
                sigma,
                |x: &State| 1.0 / (1.0 + x[0] * x[0]),
                |x: &State| {
                    DVector::from_vec(vec![
                        -2.0 * x[0] / (1.0 + x[0] * x[0]).powi(2),
                    ])
                },
            )
            .terminal(1, |_x: &State| 0.0)
            .build()
            .unwrap();
        let j_first = evaluate_cost(&first, &zero_terminal, &input).unwrap();

        let x_mid = first.final_state();
        let tail_input = HybridInput::continuous(ControlLaw::constant(0.3));
        let tail = simulate(&p.sys, &tail_input, Loc(1), &x_mid, (tm, 1.0), &cfg).unwrap();
        // Location 1 running cost and the terminal cost.
        let tail_cost = CostSpec::builder()
            .running(|_x: &State, u: &Control| 0.5 * u[0] * u[0])
            .running(|_x: &State, u: &Control| 0.5 * u[0] * u[0])
            .terminal_with_grad(1, |x: &State| 0.5 * x[0] * x[0], |x: &State| x.clone())
            .build()
            .unwrap();
        let j_tail = evaluate_cost(&tail, &tail_cost, &tail_input).unwrap();
        assert_relative_eq!(j_full, j_first + j_tail, epsilon = 1e-9);
    }

    #[test]
    fn forced_sequence_matches_scheduled_simulation() {
        let p = presets::example1();
        let sigma = p.sys.event_by_name("flip").unwrap();
        let seq = LocationSequence::new(
            &p.sys,
            Loc(0),
            vec![SequenceStep {
                event: sigma,
                kind: SwitchKind::Controlled,
            }],
        )
        .unwrap();
        let cfg = IntegratorConfig::default();
        let x0 = DVector::from_vec(vec![1.0]);
        let forced = simulate_forced(
            &p.sys,
            &seq,
            &[0.5],
            &ControlLaw::constant(0.2),
            &x0,
            (0.0, 1.0),
            &cfg,
        )
        .unwrap();
        let input = HybridInput::new(vec![(0.5, sigma)], ControlLaw::constant(0.2));
        let scheduled = simulate(&p.sys, &input, Loc(0), &x0, (0.0, 1.0), &cfg).unwrap();
        assert_relative_eq!(
            forced.final_state()[0],
            scheduled.final_state()[0],
            epsilon = 1e-12
        );
    }
}
