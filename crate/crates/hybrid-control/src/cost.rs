//! Cost specifications and the Bolza-to-Mayer state augmentation.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::system::{HybridSystem, HybridSystemBuilder};
use crate::types::{
    fd_gradient, fd_running_gradient, Control, EventId, GradFn, Loc, RunningFn, RunningGradFn,
    ScalarFn, State,
};

/// Switching cost attached to an event.
#[derive(Clone)]
pub struct SwitchingCost {
    pub value: ScalarFn,
    pub gradient: GradFn,
}

/// Running, switching and terminal cost data of a hybrid optimal control
/// problem. All entries carry their state gradients; missing gradients fall
/// back to central finite differences.
#[derive(Clone)]
pub struct CostSpec {
    running: Vec<RunningFn>,
    running_grads: Vec<RunningGradFn>,
    switching: BTreeMap<EventId, SwitchingCost>,
    terminal: ScalarFn,
    terminal_grad: GradFn,
    terminal_dim: usize,
}

impl CostSpec {
    pub fn builder() -> CostSpecBuilder {
        CostSpecBuilder::default()
    }

    pub fn running(&self, q: Loc) -> &RunningFn {
        &self.running[q.0]
    }

    pub fn running_gradient(&self, q: Loc) -> &RunningGradFn {
        &self.running_grads[q.0]
    }

    /// Switching cost of an event; absent entries mean zero cost.
    pub fn switching(&self, sigma: EventId) -> Option<&SwitchingCost> {
        self.switching.get(&sigma)
    }

    pub fn switching_value(&self, sigma: EventId, x: &State) -> f64 {
        self.switching.get(&sigma).map_or(0.0, |c| (c.value)(x))
    }

    pub fn switching_gradient(&self, sigma: EventId, x: &State) -> DVector<f64> {
        match self.switching.get(&sigma) {
            Some(c) => (c.gradient)(x),
            None => DVector::zeros(x.len()),
        }
    }

    pub fn switching_costs(&self) -> impl Iterator<Item = (EventId, &SwitchingCost)> {
        self.switching.iter().map(|(e, c)| (*e, c))
    }

    pub fn terminal(&self) -> &ScalarFn {
        &self.terminal
    }

    pub fn terminal_gradient(&self) -> &GradFn {
        &self.terminal_grad
    }

    /// Dimension of the terminal cost argument.
    pub fn terminal_dim(&self) -> usize {
        self.terminal_dim
    }
}

/// Builder for [`CostSpec`]. Running costs are added per location in
/// location order.
#[derive(Default)]
pub struct CostSpecBuilder {
    running: Vec<RunningFn>,
    running_grads: Vec<Option<RunningGradFn>>,
    switching: BTreeMap<EventId, SwitchingCost>,
    terminal: Option<(ScalarFn, Option<GradFn>, usize)>,
}

impl CostSpecBuilder {
    /// Running cost of the next location, with finite-difference gradient.
    pub fn running<F>(mut self, l: F) -> Self
    where
        F: Fn(&State, &Control) -> f64 + Send + Sync + 'static,
    {
        self.running.push(Arc::new(l));
        self.running_grads.push(None);
        self
    }

    /// Running cost of the next location with its exact state gradient.
    pub fn running_with_grad<F, G>(mut self, l: F, grad: G) -> Self
    where
        F: Fn(&State, &Control) -> f64 + Send + Sync + 'static,
        G: Fn(&State, &Control) -> DVector<f64> + Send + Sync + 'static,
    {
        self.running.push(Arc::new(l));
        self.running_grads.push(Some(Arc::new(grad)));
        self
    }

    /// Switching cost of a named event (resolved at build time).
    pub fn switching<F, G>(mut self, event: EventId, c: F, grad: G) -> Self
    where
        F: Fn(&State) -> f64 + Send + Sync + 'static,
        G: Fn(&State) -> DVector<f64> + Send + Sync + 'static,
    {
        self.switching.insert(
            event,
            SwitchingCost {
                value: Arc::new(c),
                gradient: Arc::new(grad),
            },
        );
        self
    }

    pub fn terminal<F>(mut self, dim: usize, g: F) -> Self
    where
        F: Fn(&State) -> f64 + Send + Sync + 'static,
    {
        self.terminal = Some((Arc::new(g), None, dim));
        self
    }

    pub fn terminal_with_grad<F, G>(mut self, dim: usize, g: F, grad: G) -> Self
    where
        F: Fn(&State) -> f64 + Send + Sync + 'static,
        G: Fn(&State) -> DVector<f64> + Send + Sync + 'static,
    {
        self.terminal = Some((Arc::new(g), Some(Arc::new(grad)), dim));
        self
    }

    pub fn build(self) -> Result<CostSpec> {
        let (terminal, terminal_grad, terminal_dim) = match self.terminal {
            Some((g, grad, dim)) => {
                let grad = grad.unwrap_or_else(|| {
                    let g = g.clone();
                    Arc::new(move |x: &State| fd_gradient(g.as_ref(), x)) as GradFn
                });
                (g, grad, dim)
            }
            None => return Err(Error::Config("cost spec needs a terminal cost".into())),
        };
        let running_grads = self
            .running_grads
            .into_iter()
            .enumerate()
            .map(|(q, grad)| {
                grad.unwrap_or_else(|| {
                    let l = self.running[q].clone();
                    Arc::new(move |x: &State, u: &Control| fd_running_gradient(l.as_ref(), x, u))
                        as RunningGradFn
                })
            })
            .collect();
        Ok(CostSpec {
            running: self.running,
            running_grads,
            switching: self.switching,
            terminal,
            terminal_grad,
            terminal_dim,
        })
    }
}

/// Prepend the zero cost accumulator to a state vector.
pub fn lift_state(x: &State) -> State {
    let mut y = DVector::zeros(x.len() + 1);
    y.rows_mut(1, x.len()).copy_from(x);
    y
}

/// Drop the cost accumulator from an augmented state vector.
pub fn unlift_state(x_hat: &State) -> State {
    x_hat.rows(1, x_hat.len() - 1).into_owned()
}

/// Convert a Bolza problem into its Mayer form.
///
/// Each location gains a leading cost accumulator `z` with `z' = l_q(x, u)`;
/// jumps add the switching cost to `z`; the output cost has zero running and
/// switching parts and the terminal `z + g(x)`. Initial states must be
/// lifted with [`lift_state`].
pub fn to_mayer(sys: &HybridSystem, cost: &CostSpec) -> Result<(HybridSystem, CostSpec)> {
    let mut builder = HybridSystemBuilder::default();
    for q in 0..sys.num_locations() {
        let q = Loc(q);
        let f = sys.field(q).clone();
        let jac = sys.field_jacobian(q).clone();
        let l = cost.running(q).clone();
        let lg = cost.running_gradient(q).clone();
        let n = sys.state_dim(q);
        let aug_field = Arc::new(move |x_hat: &State, u: &Control| {
            let x = unlift_state(x_hat);
            let fx = f(&x, u);
            let mut out = DVector::zeros(fx.len() + 1);
            out[0] = l(&x, u);
            out.rows_mut(1, fx.len()).copy_from(&fx);
            out
        });
        let aug_jac = Arc::new(move |x_hat: &State, u: &Control| {
            let x = unlift_state(x_hat);
            let j = jac(&x, u);
            let g = lg(&x, u);
            let (rows, cols) = (j.nrows() + 1, j.ncols() + 1);
            let mut out = DMatrix::zeros(rows, cols);
            for c in 0..j.ncols() {
                out[(0, c + 1)] = g[c];
            }
            out.view_mut((1, 1), (j.nrows(), j.ncols())).copy_from(&j);
            out
        });
        let (lo, hi) = sys.control_bounds(q);
        builder = builder
            .location(
                aug_field,
                lo.iter().copied().collect(),
                hi.iter().copied().collect(),
                n + 1,
            )
            .field_jacobian(aug_jac);
    }

    // Events, automaton, lifted jumps and manifolds.
    for e in 1..sys.num_events() {
        builder = builder.event(sys.event_name(EventId(e)));
    }
    for q in 0..sys.num_locations() {
        for e in 0..sys.num_events() {
            let (q, e) = (Loc(q), EventId(e));
            let Some(target) = sys.transition(q, e) else {
                continue;
            };
            let name = sys.event_name(e).to_string();
            match sys.manifold(q, target) {
                Some(m) => {
                    let value = m.value.clone();
                    let gradient = m.gradient.clone();
                    builder = builder.autonomous_transition(
                        q.0,
                        target.0,
                        &name,
                        Arc::new(move |x_hat: &State| value(&unlift_state(x_hat))),
                        Arc::new(move |x_hat: &State| {
                            let g = gradient(&unlift_state(x_hat));
                            let mut out = DVector::zeros(g.len() + 1);
                            out.rows_mut(1, g.len()).copy_from(&g);
                            out
                        }),
                    );
                }
                None => {
                    builder = builder.controlled_transition(q.0, &name, target.0);
                }
            }
            // Lifted jump: z accumulates the switching cost.
            let base_jump = sys.jump_map(e).cloned();
            let source_dim = sys.state_dim(q);
            let c_val: ScalarFn = match cost.switching(e) {
                Some(c) => c.value.clone(),
                None => Arc::new(|_x: &State| 0.0),
            };
            let c_grad: GradFn = match cost.switching(e) {
                Some(c) => c.gradient.clone(),
                None => Arc::new(move |_x: &State| DVector::zeros(source_dim)),
            };
            let jm = base_jump.clone();
            let cv = c_val.clone();
            let map = Arc::new(move |x_hat: &State| {
                let x = unlift_state(x_hat);
                let xi = match &jm {
                    Some(j) => (j.map)(&x),
                    None => x.clone(),
                };
                let mut out = DVector::zeros(xi.len() + 1);
                out[0] = x_hat[0] + cv(&x);
                out.rows_mut(1, xi.len()).copy_from(&xi);
                out
            });
            let jm = base_jump;
            let jacobian = Arc::new(move |x_hat: &State| {
                let x = unlift_state(x_hat);
                let base = match &jm {
                    Some(j) => (j.jacobian)(&x),
                    None => DMatrix::identity(x.len(), x.len()),
                };
                let g = c_grad(&x);
                let mut out = DMatrix::zeros(base.nrows() + 1, base.ncols() + 1);
                out[(0, 0)] = 1.0;
                for c in 0..base.ncols() {
                    out[(0, c + 1)] = g[c];
                }
                out.view_mut((1, 1), (base.nrows(), base.ncols()))
                    .copy_from(&base);
                out
            });
            builder = builder.jump_map(&name, map, jacobian);
        }
    }
    let aug_sys = builder.build()?;

    let g = cost.terminal().clone();
    let gg = cost.terminal_gradient().clone();
    let mut cb = CostSpec::builder();
    for q in 0..sys.num_locations() {
        let n_aug = sys.state_dim(Loc(q)) + 1;
        cb = cb.running_with_grad(
            |_x: &State, _u: &Control| 0.0,
            move |_x: &State, _u: &Control| DVector::zeros(n_aug),
        );
    }
    let aug_cost = cb
        .terminal_with_grad(
            cost.terminal_dim() + 1,
            move |x_hat: &State| x_hat[0] + g(&unlift_state(x_hat)),
            move |x_hat: &State| {
                let grad = gg(&unlift_state(x_hat));
                let mut out = DVector::zeros(grad.len() + 1);
                out[0] = 1.0;
                out.rows_mut(1, grad.len()).copy_from(&grad);
                out
            },
        )
        .build()?;
    Ok((aug_sys, aug_cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::simulator::{evaluate_cost, simulate, IntegratorConfig};
    use crate::system::{ControlLaw, HybridInput};
    use approx::assert_relative_eq;

    #[test]
    fn mayer_terminal_equals_bolza_cost_on_forced_switch() {
        // First preset with u = 0 and a forced switch at 0.5: the running
        // integrals vanish, so the accumulator ends at the switching cost
        // 1/(1 + e) of the pre-jump state e^{0.5}.
        let p = presets::example1();
        let sigma = p.sys.event_by_name("flip").unwrap();
        let input = HybridInput::new(vec![(0.5, sigma)], ControlLaw::constant(0.0));
        let cfg = IntegratorConfig::default();

        let traj = simulate(
            &p.sys,
            &input,
            Loc(0),
            &DVector::from_vec(vec![1.0]),
            (0.0, 1.0),
            &cfg,
        )
        .unwrap();
        let j_bolza = evaluate_cost(&traj, &p.cost, &input).unwrap();

        let (aug_sys, aug_cost) = to_mayer(&p.sys, &p.cost).unwrap();
        let aug_traj = simulate(
            &aug_sys,
            &input,
            Loc(0),
            &lift_state(&DVector::from_vec(vec![1.0])),
            (0.0, 1.0),
            &cfg,
        )
        .unwrap();
        let x_hat_f = aug_traj.final_state();
        let z_tf = x_hat_f[0];
        let expected_z = 1.0 / (1.0 + (1.0f64).exp());
        assert_relative_eq!(z_tf, expected_z, epsilon = 1e-9);

        let g_hat = (aug_cost.terminal())(&x_hat_f);
        assert_relative_eq!(g_hat, j_bolza, epsilon = 1e-8);
    }

    #[test]
    fn zero_costs_leave_accumulator_at_zero() {
        let p = presets::example1();
        let mut cb = CostSpec::builder();
        for _ in 0..2 {
            cb = cb.running(|_x: &State, _u: &Control| 0.0);
        }
        let zero_cost = cb
            .terminal_with_grad(1, |x: &State| 0.5 * x[0] * x[0], |x: &State| x.clone())
            .build()
            .unwrap();
        let (aug_sys, aug_cost) = to_mayer(&p.sys, &zero_cost).unwrap();
        let sigma = aug_sys.event_by_name("flip").unwrap();
        let input = HybridInput::new(vec![(0.5, sigma)], ControlLaw::constant(0.0));
        let traj = simulate(
            &aug_sys,
            &input,
            Loc(0),
            &lift_state(&DVector::from_vec(vec![1.0])),
            (0.0, 1.0),
            &IntegratorConfig::default(),
        )
        .unwrap();
        let x_hat_f = traj.final_state();
        assert_relative_eq!(x_hat_f[0], 0.0, epsilon = 1e-13);
        let g_hat = (aug_cost.terminal())(&x_hat_f);
        assert_relative_eq!(g_hat, 0.5 * x_hat_f[1] * x_hat_f[1], epsilon = 1e-13);
    }
}
