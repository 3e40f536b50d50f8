//! Core identifiers, callable aliases and small numeric helpers.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

/// Discrete state (location) index into a [`crate::system::HybridSystem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Loc(pub usize);

/// Discrete event index. Event 0 is always the identity event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(pub usize);

impl EventId {
    /// The identity event present in every event set.
    pub const IDENTITY: EventId = EventId(0);
}

/// Kind of a discrete transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchKind {
    /// Fired by a transversal arrival on a switching manifold.
    Autonomous,
    /// Commanded at a chosen time by the discrete input.
    Controlled,
}

impl std::fmt::Display for SwitchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SwitchKind::Autonomous => write!(f, "autonomous"),
            SwitchKind::Controlled => write!(f, "controlled"),
        }
    }
}

/// Continuous state vector.
pub type State = DVector<f64>;
/// Control vector.
pub type Control = DVector<f64>;

/// Vector field f_q(x, u).
pub type FieldFn = Arc<dyn Fn(&State, &Control) -> State + Send + Sync>;
/// State Jacobian of a vector field.
pub type FieldJacFn = Arc<dyn Fn(&State, &Control) -> DMatrix<f64> + Send + Sync>;
/// Scalar function of the state with no control argument.
pub type ScalarFn = Arc<dyn Fn(&State) -> f64 + Send + Sync>;
/// Gradient of a scalar function of the state.
pub type GradFn = Arc<dyn Fn(&State) -> DVector<f64> + Send + Sync>;
/// Continuous-state jump map (possibly dimension-changing).
pub type JumpFn = Arc<dyn Fn(&State) -> State + Send + Sync>;
/// Jacobian of a jump map; rows index the target space, so it may be non-square.
pub type JumpJacFn = Arc<dyn Fn(&State) -> DMatrix<f64> + Send + Sync>;
/// Running cost l_q(x, u).
pub type RunningFn = Arc<dyn Fn(&State, &Control) -> f64 + Send + Sync>;
/// State gradient of a running cost.
pub type RunningGradFn = Arc<dyn Fn(&State, &Control) -> DVector<f64> + Send + Sync>;

/// Relative step used by the central finite-difference fallbacks.
pub const FD_STEP: f64 = 1e-6;

fn fd_h(x: f64) -> f64 {
    FD_STEP * x.abs().max(1.0)
}

/// Central finite-difference Jacobian of `f` with respect to `x`.
pub fn fd_field_jacobian(
    f: &dyn Fn(&State, &Control) -> State,
    x: &State,
    u: &Control,
) -> DMatrix<f64> {
    let n_out = f(x, u).len();
    let n = x.len();
    let mut jac = DMatrix::zeros(n_out, n);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for j in 0..n {
        let h = fd_h(x[j]);
        xp[j] = x[j] + h;
        xm[j] = x[j] - h;
        let fp = f(&xp, u);
        let fm = f(&xm, u);
        for i in 0..n_out {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
        xp[j] = x[j];
        xm[j] = x[j];
    }
    jac
}

/// Central finite-difference gradient of a scalar `f` with respect to `x`.
pub fn fd_gradient(f: &dyn Fn(&State) -> f64, x: &State) -> DVector<f64> {
    let n = x.len();
    let mut g = DVector::zeros(n);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for j in 0..n {
        let h = fd_h(x[j]);
        xp[j] = x[j] + h;
        xm[j] = x[j] - h;
        g[j] = (f(&xp) - f(&xm)) / (2.0 * h);
        xp[j] = x[j];
        xm[j] = x[j];
    }
    g
}

/// Central finite-difference state gradient of a running cost.
pub fn fd_running_gradient(
    f: &dyn Fn(&State, &Control) -> f64,
    x: &State,
    u: &Control,
) -> DVector<f64> {
    let n = x.len();
    let mut g = DVector::zeros(n);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for j in 0..n {
        let h = fd_h(x[j]);
        xp[j] = x[j] + h;
        xm[j] = x[j] - h;
        g[j] = (f(&xp, u) - f(&xm, u)) / (2.0 * h);
        xp[j] = x[j];
        xm[j] = x[j];
    }
    g
}

/// Deterministic quasi-random points in a box, by the Halton sequence.
///
/// Used by the sampling-based validation checks; identical inputs always
/// produce the identical point set.
pub fn halton_box(lo: &[f64], hi: &[f64], count: usize) -> Vec<DVector<f64>> {
    const PRIMES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    let dim = lo.len();
    assert_eq!(dim, hi.len());
    assert!(dim <= PRIMES.len(), "halton_box supports up to 8 dimensions");
    let mut points = Vec::with_capacity(count);
    for k in 1..=count {
        let mut p = DVector::zeros(dim);
        for (d, item) in p.iter_mut().enumerate() {
            *item = lo[d] + (hi[d] - lo[d]) * halton(k, PRIMES[d]);
        }
        points.push(p);
    }
    points
}

fn halton(mut index: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

/// Golden-section minimization of a scalar unimodal function on `[lo, hi]`.
///
/// Returns the argmin location; tolerance is on the argument.
pub fn golden_section(f: &mut dyn FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    let fmid = f(mid);
    // Return the best probe seen in the final bracket.
    if fc <= fd && fc <= fmid {
        c
    } else if fd <= fmid {
        d
    } else {
        mid
    }
}

/// Cubic Hermite interpolation of a vector path on one knot interval.
///
/// `(t0, y0, dy0)` and `(t1, y1, dy1)` are the bracketing knots with their
/// derivatives; evaluates at `t` inside the interval.
pub fn hermite_interp(
    t0: f64,
    y0: &DVector<f64>,
    dy0: &DVector<f64>,
    t1: f64,
    y1: &DVector<f64>,
    dy1: &DVector<f64>,
    t: f64,
) -> DVector<f64> {
    let h = t1 - t0;
    if h.abs() < f64::EPSILON {
        return y0.clone();
    }
    let s = (t - t0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    y0 * h00 + dy0 * (h10 * h) + y1 * h01 + dy1 * (h11 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn fd_jacobian_matches_linear_field() {
        let f = |x: &State, _u: &Control| {
            DVector::from_vec(vec![2.0 * x[0] - x[1], x[0] + 3.0 * x[1]])
        };
        let x = DVector::from_vec(vec![0.3, -1.2]);
        let u = DVector::zeros(0);
        let jac = fd_field_jacobian(&f, &x, &u);
        assert_relative_eq!(jac[(0, 0)], 2.0, epsilon = 1e-8);
        assert_relative_eq!(jac[(0, 1)], -1.0, epsilon = 1e-8);
        assert_relative_eq!(jac[(1, 0)], 1.0, epsilon = 1e-8);
        assert_relative_eq!(jac[(1, 1)], 3.0, epsilon = 1e-8);
    }

    #[test]
    fn golden_section_finds_parabola_vertex() {
        let mut f = |u: f64| (u - 0.37).powi(2);
        let u = golden_section(&mut f, -1.0, 1.0, 1e-10);
        assert_relative_eq!(u, 0.37, epsilon = 1e-8);
    }

    #[test]
    fn hermite_reproduces_cubic() {
        // y = t^3 on [1, 2] is reproduced exactly by cubic Hermite.
        let y = |t: f64| DVector::from_vec(vec![t * t * t]);
        let dy = |t: f64| DVector::from_vec(vec![3.0 * t * t]);
        let v = hermite_interp(1.0, &y(1.0), &dy(1.0), 2.0, &y(2.0), &dy(2.0), 1.6);
        assert_relative_eq!(v[0], 1.6f64.powi(3), epsilon = 1e-12);
    }

    #[test]
    fn halton_is_deterministic_and_inside_box() {
        let a = halton_box(&[-1.0, 0.0], &[1.0, 2.0], 100);
        let b = halton_box(&[-1.0, 0.0], &[1.0, 2.0], 100);
        for (p, q) in a.iter().zip(b.iter()) {
            assert_eq!(p, q);
            assert!(p[0] >= -1.0 && p[0] <= 1.0);
            assert!(p[1] >= 0.0 && p[1] <= 2.0);
        }
    }
}
