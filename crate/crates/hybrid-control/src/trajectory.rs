//! Hybrid trajectories: per-segment dense paths plus switch records.

use nalgebra::DVector;

use crate::types::{hermite_interp, EventId, Loc, State, SwitchKind};

/// Dense continuous path on one inter-switch interval.
///
/// Knots carry the state, the field value (for cubic Hermite dense output)
/// and the realized control.
#[derive(Debug, Clone)]
pub struct Segment {
    pub loc: Loc,
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub derivs: Vec<State>,
    pub controls: Vec<DVector<f64>>,
}

impl Segment {
    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn end_state(&self) -> &State {
        self.states.last().unwrap()
    }

    /// Index of the knot interval containing `t` (clamped to the range).
    pub fn knot_index(&self, t: f64) -> usize {
        if t <= self.times[0] {
            return 0;
        }
        let n = self.times.len();
        if t >= self.times[n - 1] {
            return n.saturating_sub(2);
        }
        match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(k) => k.min(n - 2),
            Err(k) => k - 1,
        }
    }

    /// Cubic Hermite dense output at `t` (clamped to the segment range).
    pub fn sample(&self, t: f64) -> State {
        if self.times.len() == 1 {
            return self.states[0].clone();
        }
        let k = self.knot_index(t);
        hermite_interp(
            self.times[k],
            &self.states[k],
            &self.derivs[k],
            self.times[k + 1],
            &self.states[k + 1],
            &self.derivs[k + 1],
            t.clamp(self.times[0], *self.times.last().unwrap()),
        )
    }

    /// Realized control at `t` by linear interpolation of the knot values.
    pub fn sample_control(&self, t: f64) -> DVector<f64> {
        if self.times.len() == 1 || t <= self.times[0] {
            return self.controls[0].clone();
        }
        if t >= *self.times.last().unwrap() {
            return self.controls.last().unwrap().clone();
        }
        let k = self.knot_index(t);
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let s = (t - t0) / (t1 - t0);
        &self.controls[k] * (1.0 - s) + &self.controls[k + 1] * s
    }
}

/// One discrete transition along a trajectory.
#[derive(Debug, Clone)]
pub struct SwitchRecord {
    pub time: f64,
    pub kind: SwitchKind,
    pub event: EventId,
    pub from: Loc,
    pub to: Loc,
    pub pre_state: State,
    pub post_state: State,
    /// Manifold value at the pre-jump state (autonomous switches only).
    pub manifold_value: Option<f64>,
}

/// A hybrid state process: switching times, the discrete path and the dense
/// continuous paths per segment.
#[derive(Debug, Clone)]
pub struct HybridTrajectory {
    pub segments: Vec<Segment>,
    pub switches: Vec<SwitchRecord>,
    pub t0: f64,
    pub tf: f64,
}

impl HybridTrajectory {
    /// Switching times including the endpoints: `t0, t1, .., tL, tf`.
    pub fn switch_times(&self) -> Vec<f64> {
        let mut times = vec![self.t0];
        times.extend(self.switches.iter().map(|s| s.time));
        times.push(self.tf);
        times
    }

    /// The discrete path `q_0 .. q_L`.
    pub fn discrete_path(&self) -> Vec<Loc> {
        self.segments.iter().map(|s| s.loc).collect()
    }

    pub fn num_switches(&self) -> usize {
        self.switches.len()
    }

    pub fn final_state(&self) -> State {
        self.segments.last().unwrap().end_state().clone()
    }

    /// Segment index active at time `t` (pre-switch segment at a switch time).
    pub fn segment_index_at(&self, t: f64) -> usize {
        for (i, s) in self.segments.iter().enumerate() {
            if t <= s.t_end() {
                return i;
            }
        }
        self.segments.len() - 1
    }

    /// Dense state sample at `t`.
    pub fn sample(&self, t: f64) -> (Loc, State) {
        let i = self.segment_index_at(t);
        (self.segments[i].loc, self.segments[i].sample(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_segment() -> Segment {
        // x(t) = t^3 sampled on four knots; derivative 3 t^2.
        let times = vec![0.0, 0.5, 1.0, 1.5];
        Segment {
            loc: Loc(0),
            states: times
                .iter()
                .map(|&t: &f64| DVector::from_vec(vec![t.powi(3)]))
                .collect(),
            derivs: times
                .iter()
                .map(|&t| DVector::from_vec(vec![3.0 * t * t]))
                .collect(),
            controls: times.iter().map(|_| DVector::zeros(1)).collect(),
            times,
        }
    }

    #[test]
    fn dense_output_reproduces_cubic() {
        let seg = line_segment();
        for &t in &[0.1, 0.4, 0.77, 1.2, 1.49] {
            let v = seg.sample(t);
            approx::assert_relative_eq!(v[0], t.powi(3), epsilon = 1e-12);
        }
    }

    #[test]
    fn segment_lookup_at_switch_times() {
        let seg0 = line_segment();
        let mut seg1 = line_segment();
        seg1.times = vec![1.5, 2.0];
        seg1.states = vec![
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![1.0]),
        ];
        seg1.derivs = vec![DVector::zeros(1), DVector::zeros(1)];
        seg1.controls = vec![DVector::zeros(1), DVector::zeros(1)];
        seg1.loc = Loc(1);
        let traj = HybridTrajectory {
            segments: vec![seg0, seg1],
            switches: vec![],
            t0: 0.0,
            tf: 2.0,
        };
        assert_eq!(traj.segment_index_at(0.7), 0);
        assert_eq!(traj.segment_index_at(1.5), 0);
        assert_eq!(traj.segment_index_at(1.6), 1);
    }
}
