//! Riccati formalism for linear-quadratic hybrid tracking: backward matrix
//! and offset integration per location, switch jump conditions, switch-time
//! and multiplier determination by Hamiltonian continuity, and closed-loop
//! feedback synthesis.
//!
//! Systems are given along a fixed location sequence: `locations[i]` is the
//! plant of segment `i` and `switches[i]` connects segment `i` to `i + 1`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::shooting::{damped_newton, NewtonOptions, NewtonOutcome};
use crate::trajectory::Segment;
use crate::types::{hermite_interp, Loc, State};

pub type MatFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type VecFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// One linear location `x' = A(t) x + B(t) u + F(t)`.
#[derive(Clone)]
pub struct LqLocation {
    pub a: MatFn,
    pub b: MatFn,
    pub f: VecFn,
    pub state_dim: usize,
    pub control_dim: usize,
    /// Set when the matrices are time-invariant; enables the bridge to the
    /// nonlinear solvers.
    pub constant: Option<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)>,
}

impl LqLocation {
    pub fn constant(a: DMatrix<f64>, b: DMatrix<f64>, f: DVector<f64>) -> Self {
        let (n, m) = (a.nrows(), b.ncols());
        let (ac, bc, fc) = (a.clone(), b.clone(), f.clone());
        LqLocation {
            a: Arc::new(move |_t| a.clone()),
            b: Arc::new(move |_t| b.clone()),
            f: Arc::new(move |_t| f.clone()),
            state_dim: n,
            control_dim: m,
            constant: Some((ac, bc, fc)),
        }
    }
}

/// Linear jump `x(t_j) = P x(t_j-) + J` with an optional affine manifold
/// `m x + n = 0` (present exactly for autonomous switches).
#[derive(Clone)]
pub struct LqSwitch {
    pub p_mat: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub manifold: Option<(RowDVector<f64>, f64)>,
}

impl LqSwitch {
    pub fn is_autonomous(&self) -> bool {
        self.manifold.is_some()
    }
}

/// Linear hybrid plant along a fixed location sequence.
#[derive(Clone)]
pub struct LqHybridSystem {
    pub locations: Vec<LqLocation>,
    pub switches: Vec<LqSwitch>,
}

impl LqHybridSystem {
    pub fn num_switches(&self) -> usize {
        self.switches.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.locations.len() != self.switches.len() + 1 {
            return Err(Error::Config(
                "need exactly one location per segment".into(),
            ));
        }
        for (j, sw) in self.switches.iter().enumerate() {
            let (n_from, n_to) = (
                self.locations[j].state_dim,
                self.locations[j + 1].state_dim,
            );
            if sw.p_mat.nrows() != n_to || sw.p_mat.ncols() != n_from || sw.offset.len() != n_to {
                return Err(Error::DimensionMismatch {
                    expected: n_to,
                    got: sw.p_mat.nrows(),
                    context: format!("jump matrix of switch {j}"),
                });
            }
            if let Some((m, _)) = &sw.manifold {
                if m.ncols() != n_from {
                    return Err(Error::DimensionMismatch {
                        expected: n_from,
                        got: m.ncols(),
                        context: format!("manifold row of switch {j}"),
                    });
                }
            }
        }
        Ok(())
    }
}

fn check_symmetric_psd(m: &DMatrix<f64>, floor: f64, what: &str) -> Result<()> {
    if (m - m.transpose()).amax() > 1e-10 * (1.0 + m.amax()) {
        return Err(Error::NotPositive(format!("{what} is not symmetric")));
    }
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < floor {
        return Err(Error::NotPositive(format!(
            "{what} has eigenvalue {min:.3e} below {floor:.0e}"
        )));
    }
    Ok(())
}

/// Quadratic tracking weights of one location.
#[derive(Clone)]
pub struct LqStageCost {
    pub l: MatFn,
    pub r: MatFn,
    pub reference: VecFn,
}

impl LqStageCost {
    pub fn constant(l: DMatrix<f64>, r: DMatrix<f64>, reference: DVector<f64>) -> Self {
        LqStageCost {
            l: Arc::new(move |_t| l.clone()),
            r: Arc::new(move |_t| r.clone()),
            reference: Arc::new(move |_t| reference.clone()),
        }
    }
}

/// Quadratic hybrid tracking cost: stage weights per location, one
/// `(C, d)` pair per switch, and the terminal `(G, d)`.
#[derive(Clone)]
pub struct LqCost {
    pub stages: Vec<LqStageCost>,
    pub switch_weights: Vec<(DMatrix<f64>, DVector<f64>)>,
    pub terminal: (DMatrix<f64>, DVector<f64>),
}

impl LqCost {
    /// Validate symmetry and definiteness at sample times (`R` strictly
    /// positive, the others positive semidefinite up to a small floor).
    pub fn validate(&self, span: (f64, f64)) -> Result<()> {
        let probes = [span.0, 0.5 * (span.0 + span.1), span.1];
        for (i, st) in self.stages.iter().enumerate() {
            for &t in &probes {
                check_symmetric_psd(&(st.l)(t), -1e-12, &format!("L of stage {i}"))?;
                check_symmetric_psd(&(st.r)(t), 1e-12, &format!("R of stage {i}"))?;
            }
        }
        for (j, (c, _)) in self.switch_weights.iter().enumerate() {
            check_symmetric_psd(c, -1e-12, &format!("C of switch {j}"))?;
        }
        check_symmetric_psd(&self.terminal.0, -1e-12, "terminal G")?;
        Ok(())
    }
}

/// `B R^{-1} B^T` and `R^{-1} B^T v` through a Cholesky factorization of
/// `R`; `R` is never inverted explicitly.
fn r_inv_bt(r: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(r.clone())
        .ok_or_else(|| Error::NotPositive("R is not positive definite".into()))?;
    Ok(chol.solve(&b.transpose()))
}

/// Matrix/offset path of one stage with Hermite-ready derivative knots and
/// the integrated scalar value offset `w` (so that the stage value is
/// `x^T K x / 2 + s^T x + w`).
#[derive(Debug, Clone)]
pub struct RiccatiStagePath {
    pub times: Vec<f64>,
    pub k_vals: Vec<DMatrix<f64>>,
    pub k_derivs: Vec<DMatrix<f64>>,
    pub s_vals: Vec<DVector<f64>>,
    pub s_derivs: Vec<DVector<f64>>,
    pub w_vals: Vec<f64>,
    pub w_derivs: Vec<f64>,
}

impl RiccatiStagePath {
    fn bracket(&self, t: f64) -> usize {
        let n = self.times.len();
        if t <= self.times[0] {
            return 0;
        }
        if t >= self.times[n - 1] {
            return n - 2;
        }
        match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(k) => k.min(n - 2),
            Err(k) => k - 1,
        }
    }

    pub fn k_at(&self, t: f64) -> DMatrix<f64> {
        let k = self.bracket(t);
        let n = self.k_vals[0].nrows();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let y0 = DVector::from_vec(vec![self.k_vals[k][(i, j)]]);
                let d0 = DVector::from_vec(vec![self.k_derivs[k][(i, j)]]);
                let y1 = DVector::from_vec(vec![self.k_vals[k + 1][(i, j)]]);
                let d1 = DVector::from_vec(vec![self.k_derivs[k + 1][(i, j)]]);
                out[(i, j)] = hermite_interp(
                    self.times[k],
                    &y0,
                    &d0,
                    self.times[k + 1],
                    &y1,
                    &d1,
                    t,
                )[0];
            }
        }
        out
    }

    pub fn s_at(&self, t: f64) -> DVector<f64> {
        let k = self.bracket(t);
        hermite_interp(
            self.times[k],
            &self.s_vals[k],
            &self.s_derivs[k],
            self.times[k + 1],
            &self.s_vals[k + 1],
            &self.s_derivs[k + 1],
            t,
        )
    }

    pub fn w_at(&self, t: f64) -> f64 {
        let k = self.bracket(t);
        hermite_interp(
            self.times[k],
            &DVector::from_vec(vec![self.w_vals[k]]),
            &DVector::from_vec(vec![self.w_derivs[k]]),
            self.times[k + 1],
            &DVector::from_vec(vec![self.w_vals[k + 1]]),
            &DVector::from_vec(vec![self.w_derivs[k + 1]]),
            t,
        )[0]
    }
}

/// Backward integration of the Riccati pair on one stage:
/// `K' = -L - K A - A^T K + K B R^{-1} B^T K` and
/// `s' = -(A^T - K B R^{-1} B^T) s - K F + L r`,
/// with `K` symmetrized after every step. Also integrates the scalar value
/// offset `w' = -r^T L r / 2 - s^T F + s^T B R^{-1} B^T s / 2`.
#[allow(clippy::too_many_arguments)]
pub fn riccati_backward(
    stage: &LqLocation,
    cost: &LqStageCost,
    k_end: DMatrix<f64>,
    s_end: DVector<f64>,
    w_end: f64,
    span: (f64, f64),
    step: f64,
) -> Result<RiccatiStagePath> {
    let (t_a, t_b) = span;
    if !(t_a < t_b && step > 0.0) {
        return Err(Error::Config(format!("bad stage span [{t_a}, {t_b}]")));
    }
    let n = stage.state_dim;
    type Rhs = (DMatrix<f64>, DVector<f64>, f64);
    let rhs = |t: f64, k: &DMatrix<f64>, s: &DVector<f64>| -> Result<Rhs> {
        let a = (stage.a)(t);
        let b = (stage.b)(t);
        let f = (stage.f)(t);
        let l = (cost.l)(t);
        let r = (cost.r)(t);
        let reference = (cost.reference)(t);
        let rinv_bt = r_inv_bt(&r, &b)?;
        let bbt = &b * &rinv_bt; // B R^{-1} B^T
        let kd = -&l - k * &a - a.transpose() * k + k * &bbt * k;
        let sd = -(a.transpose() - k * &bbt) * s - k * &f + &l * &reference;
        let wd = -0.5 * reference.dot(&(&l * &reference)) - s.dot(&f)
            + 0.5 * s.dot(&(&bbt * s));
        Ok((kd, sd, wd))
    };

    // Backward knot grid from t_b, stored in ascending order afterwards.
    let mut times = vec![t_b];
    let mut k_cur = 0usize;
    loop {
        k_cur += 1;
        let t = t_b - k_cur as f64 * step;
        if t <= t_a + 1e-12 * (t_b - t_a).max(1.0) {
            times.push(t_a);
            break;
        }
        times.push(t);
    }

    let mut k_vals = vec![DMatrix::zeros(n, n); times.len()];
    let mut s_vals = vec![DVector::zeros(n); times.len()];
    let mut w_vals = vec![0.0; times.len()];
    let mut k_derivs = vec![DMatrix::zeros(n, n); times.len()];
    let mut s_derivs = vec![DVector::zeros(n); times.len()];
    let mut w_derivs = vec![0.0; times.len()];

    k_vals[0] = 0.5 * (&k_end + k_end.transpose());
    s_vals[0] = s_end;
    w_vals[0] = w_end;
    let (kd, sd, wd) = rhs(times[0], &k_vals[0], &s_vals[0])?;
    k_derivs[0] = kd;
    s_derivs[0] = sd;
    w_derivs[0] = wd;

    for i in 1..times.len() {
        let (t1, t0) = (times[i - 1], times[i]);
        let h = t0 - t1; // negative
        let (k0, s0, w0) = (k_vals[i - 1].clone(), s_vals[i - 1].clone(), w_vals[i - 1]);
        let (ak, as_, aw) = rhs(t1, &k0, &s0)?;
        let (bk, bs, bw) = rhs(
            t1 + 0.5 * h,
            &(&k0 + &ak * (0.5 * h)),
            &(&s0 + &as_ * (0.5 * h)),
        )?;
        let (ck, cs, cw) = rhs(
            t1 + 0.5 * h,
            &(&k0 + &bk * (0.5 * h)),
            &(&s0 + &bs * (0.5 * h)),
        )?;
        let (dk, ds, dw) = rhs(t0, &(&k0 + &ck * h), &(&s0 + &cs * h))?;
        let mut k_next = &k0 + (ak + &bk * 2.0 + &ck * 2.0 + dk) * (h / 6.0);
        k_next = 0.5 * (&k_next + k_next.transpose());
        let s_next = &s0 + (as_ + &bs * 2.0 + &cs * 2.0 + ds) * (h / 6.0);
        let w_next = w0 + (aw + 2.0 * bw + 2.0 * cw + dw) * (h / 6.0);
        if !(k_next.iter().all(|v| v.is_finite()) && s_next.iter().all(|v| v.is_finite())) {
            return Err(Error::Blowup { time: t0 });
        }
        let (kd, sd, wd) = rhs(t0, &k_next, &s_next)?;
        k_vals[i] = k_next;
        s_vals[i] = s_next;
        w_vals[i] = w_next;
        k_derivs[i] = kd;
        s_derivs[i] = sd;
        w_derivs[i] = wd;
    }

    times.reverse();
    k_vals.reverse();
    s_vals.reverse();
    w_vals.reverse();
    k_derivs.reverse();
    s_derivs.reverse();
    w_derivs.reverse();
    Ok(RiccatiStagePath {
        times,
        k_vals,
        k_derivs,
        s_vals,
        s_derivs,
        w_vals,
        w_derivs,
    })
}

/// Switch boundary of the Riccati pair:
/// `K(-) = P^T K(+) P + C` and
/// `s(-) = P^T s(+) + p m^T - C d + P^T K(+) J`.
#[allow(clippy::too_many_arguments)]
pub fn switch_jump(
    k_plus: &DMatrix<f64>,
    s_plus: &DVector<f64>,
    p_mat: &DMatrix<f64>,
    c: &DMatrix<f64>,
    j_vec: &DVector<f64>,
    p: f64,
    m_row: Option<&RowDVector<f64>>,
    d: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let k_minus = p_mat.transpose() * k_plus * p_mat + c;
    let mut s_minus = p_mat.transpose() * s_plus - c * d + p_mat.transpose() * (k_plus * j_vec);
    if let Some(m) = m_row {
        s_minus += m.transpose() * p;
    }
    (k_minus, s_minus)
}

/// Optimal feedback `u = -R^{-1} B^T (K x + s)`.
pub fn feedback(
    k: &DMatrix<f64>,
    s: &DVector<f64>,
    x: &State,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let rinv_bt = r_inv_bt(r, b)?;
    Ok(-(&rinv_bt * (k * x + s)))
}

/// Minimized Hamiltonian of the tracking problem at `(t, x)`:
/// `(x - r)^T L (x - r) / 2 + (K x + s)^T (A x - B R^{-1} B^T (K x + s) / 2 + F)`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian_min_value(
    t: f64,
    x: &State,
    k: &DMatrix<f64>,
    s: &DVector<f64>,
    stage: &LqLocation,
    cost: &LqStageCost,
) -> Result<f64> {
    let a = (stage.a)(t);
    let b = (stage.b)(t);
    let f = (stage.f)(t);
    let l = (cost.l)(t);
    let r = (cost.r)(t);
    let reference = (cost.reference)(t);
    let lam = k * x + s;
    let rinv_bt = r_inv_bt(&r, &b)?;
    let dx = x - &reference;
    Ok(0.5 * dx.dot(&(&l * &dx)) + lam.dot(&(&a * x - &b * (&rinv_bt * &lam) * 0.5 + &f)))
}

/// Closed-loop run of the synthesized feedback.
#[derive(Debug, Clone)]
pub struct LqClosedLoop {
    /// Segment `i` carries `loc = Loc(i)` (the sequence index).
    pub segments: Vec<Segment>,
    /// `(t_j, x(t_j-), x(t_j))` per switch.
    pub switch_states: Vec<(f64, DVector<f64>, DVector<f64>)>,
}

impl LqClosedLoop {
    pub fn segment_index_at(&self, t: f64) -> usize {
        for (i, s) in self.segments.iter().enumerate() {
            if t <= s.t_end() {
                return i;
            }
        }
        self.segments.len() - 1
    }

    pub fn sample(&self, t: f64) -> DVector<f64> {
        self.segments[self.segment_index_at(t)].sample(t)
    }

    pub fn final_state(&self) -> DVector<f64> {
        self.segments.last().unwrap().end_state().clone()
    }
}

/// Solved tracking problem: the Riccati paths per stage, the switch data
/// and the closed-loop trajectory.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub stages: Vec<RiccatiStagePath>,
    pub switch_times: Vec<f64>,
    pub p_values: Vec<f64>,
    /// Per switch: `(K(-), s(-))` and `(K(+), s(+))` at the solved time.
    pub switch_records: Vec<SwitchJumpRecord>,
    pub closed_loop: LqClosedLoop,
    pub residual_norm: f64,
    pub cost: f64,
    pub max_k_norm: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SwitchJumpRecord {
    pub time: f64,
    pub p: f64,
    pub k_minus: DMatrix<f64>,
    pub s_minus: DVector<f64>,
    pub k_plus: DMatrix<f64>,
    pub s_plus: DVector<f64>,
}

impl RiccatiSolution {
    pub fn stage_index_at(&self, t: f64) -> usize {
        for (j, &tj) in self.switch_times.iter().enumerate() {
            if t <= tj {
                return j;
            }
        }
        self.switch_times.len()
    }

    /// `K(t)` on the pre-switch stage at switch times.
    pub fn k_at(&self, t: f64) -> DMatrix<f64> {
        self.stages[self.stage_index_at(t)].k_at(t)
    }

    pub fn s_at(&self, t: f64) -> DVector<f64> {
        self.stages[self.stage_index_at(t)].s_at(t)
    }

    /// Value offset so that `V(t, x) = x^T K x / 2 + s^T x + w`.
    pub fn w_at(&self, t: f64) -> f64 {
        self.stages[self.stage_index_at(t)].w_at(t)
    }

    /// Adjoint reconstruction `lambda(t) = K(t) x(t) + s(t)` along the
    /// closed loop.
    pub fn lambda_at(&self, t: f64) -> DVector<f64> {
        let x = self.closed_loop.sample(t);
        self.k_at(t) * x + self.s_at(t)
    }
}

#[derive(Debug, Clone)]
pub struct LqSolveOptions {
    pub newton: NewtonOptions,
    pub step: f64,
}

impl Default for LqSolveOptions {
    fn default() -> Self {
        LqSolveOptions {
            newton: NewtonOptions::default(),
            step: 1e-3,
        }
    }
}

struct LqPass {
    stages: Vec<RiccatiStagePath>,
    closed_loop: LqClosedLoop,
    switch_records: Vec<SwitchJumpRecord>,
    residual: DVector<f64>,
    max_k_norm: f64,
}

fn split_lq_unknowns(sys: &LqHybridSystem, theta: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
    let num_switches = sys.num_switches();
    let times: Vec<f64> = theta.iter().take(num_switches).copied().collect();
    let mut p = vec![0.0; num_switches];
    let mut k = num_switches;
    for (j, sw) in sys.switches.iter().enumerate() {
        if sw.is_autonomous() {
            p[j] = theta[k];
            k += 1;
        }
    }
    (times, p)
}

fn lq_pass(
    sys: &LqHybridSystem,
    cost: &LqCost,
    x0: &State,
    span: (f64, f64),
    times: &[f64],
    p_by_switch: &[f64],
    opts: &LqSolveOptions,
) -> Result<LqPass> {
    let (t0, tf) = span;
    let num_switches = sys.num_switches();
    let mut prev = t0;
    for &tj in times {
        if tj <= prev || tj >= tf {
            return Err(Error::InvalidSchedule(format!(
                "switch time {tj} outside ({prev}, {tf})"
            )));
        }
        prev = tj;
    }

    // Backward: stage L gets the terminal pair, earlier stages the jumped
    // pair of their successors.
    let (g, d_term) = &cost.terminal;
    let mut k_end = g.clone();
    let mut s_end = -(g * d_term);
    let mut w_end = 0.5 * d_term.dot(&(g * d_term));
    let mut stages_rev: Vec<RiccatiStagePath> = Vec::with_capacity(num_switches + 1);
    for i in (0..=num_switches).rev() {
        let t_lo = if i == 0 { t0 } else { times[i - 1] };
        let t_hi = if i == num_switches { tf } else { times[i] };
        let path = riccati_backward(
            &sys.locations[i],
            &cost.stages[i],
            k_end.clone(),
            s_end.clone(),
            w_end,
            (t_lo, t_hi),
            opts.step,
        )?;
        if i > 0 {
            let sw = &sys.switches[i - 1];
            let (c, d) = &cost.switch_weights[i - 1];
            let k_plus = path.k_vals[0].clone();
            let s_plus = path.s_vals[0].clone();
            let (k_minus, s_minus) = switch_jump(
                &k_plus,
                &s_plus,
                &sw.p_mat,
                c,
                &sw.offset,
                p_by_switch[i - 1],
                sw.manifold.as_ref().map(|(m, _)| m),
                d,
            );
            // Value offset across the jump.
            let j_vec = &sw.offset;
            w_end = path.w_vals[0]
                + s_plus.dot(j_vec)
                + 0.5 * j_vec.dot(&(&k_plus * j_vec))
                + 0.5 * d.dot(&(c * d));
            k_end = k_minus;
            s_end = s_minus;
        }
        stages_rev.push(path);
    }
    stages_rev.reverse();
    let stages = stages_rev;
    let max_k_norm = stages
        .iter()
        .flat_map(|st| st.k_vals.iter().map(|k| k.amax()))
        .fold(0.0_f64, f64::max);

    // Forward closed loop under u = -R^{-1} B^T (K x + s).
    let mut segments = Vec::with_capacity(num_switches + 1);
    let mut switch_states = Vec::with_capacity(num_switches);
    let mut switch_records = Vec::with_capacity(num_switches);
    let mut x = x0.clone();
    for i in 0..=num_switches {
        let t_lo = if i == 0 { t0 } else { times[i - 1] };
        let t_hi = if i == num_switches { tf } else { times[i] };
        let stage = &sys.locations[i];
        let stage_cost = &cost.stages[i];
        let path = &stages[i];
        let seg = integrate_closed_loop(stage, stage_cost, path, &x, (t_lo, t_hi), opts.step, i)?;
        let x_pre = seg.end_state().clone();
        segments.push(seg);
        if i < num_switches {
            let sw = &sys.switches[i];
            let x_post = &sw.p_mat * &x_pre + &sw.offset;
            switch_states.push((times[i], x_pre.clone(), x_post.clone()));
            switch_records.push(SwitchJumpRecord {
                time: times[i],
                p: p_by_switch[i],
                k_minus: stages[i].k_vals.last().unwrap().clone(),
                s_minus: stages[i].s_vals.last().unwrap().clone(),
                k_plus: stages[i + 1].k_vals[0].clone(),
                s_plus: stages[i + 1].s_vals[0].clone(),
            });
            x = x_post;
        }
    }
    let closed_loop = LqClosedLoop {
        segments,
        switch_states,
    };

    // Residuals: minimized-Hamiltonian gap per switch, manifold membership
    // for the autonomous ones.
    let mut residual = Vec::new();
    for (j, (tj, x_pre, x_post)) in closed_loop.switch_states.iter().enumerate() {
        let h_pre = hamiltonian_min_value(
            *tj,
            x_pre,
            stages[j].k_vals.last().unwrap(),
            stages[j].s_vals.last().unwrap(),
            &sys.locations[j],
            &cost.stages[j],
        )?;
        let h_post = hamiltonian_min_value(
            *tj,
            x_post,
            &stages[j + 1].k_vals[0],
            &stages[j + 1].s_vals[0],
            &sys.locations[j + 1],
            &cost.stages[j + 1],
        )?;
        residual.push(h_pre - h_post);
    }
    for (j, sw) in sys.switches.iter().enumerate() {
        if let Some((m, n)) = &sw.manifold {
            let (_, x_pre, _) = &closed_loop.switch_states[j];
            residual.push((m * x_pre)[0] + n);
        }
    }

    Ok(LqPass {
        stages,
        closed_loop,
        switch_records,
        residual: DVector::from_vec(residual),
        max_k_norm,
    })
}

#[allow(clippy::too_many_arguments)]
fn integrate_closed_loop(
    stage: &LqLocation,
    cost: &LqStageCost,
    path: &RiccatiStagePath,
    x0: &State,
    span: (f64, f64),
    step: f64,
    seg_index: usize,
) -> Result<Segment> {
    let (t_a, t_b) = span;
    let rhs = |t: f64, x: &State| -> Result<(State, DVector<f64>)> {
        let a = (stage.a)(t);
        let b = (stage.b)(t);
        let f = (stage.f)(t);
        let r = (cost.r)(t);
        let u = feedback(&path.k_at(t), &path.s_at(t), x, &b, &r)?;
        Ok((&a * x + &b * &u + &f, u))
    };
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut derivs = Vec::new();
    let mut controls = Vec::new();
    let mut t = t_a;
    let mut x = x0.clone();
    let mut k = 0usize;
    loop {
        let (dx, u) = rhs(t, &x)?;
        times.push(t);
        states.push(x.clone());
        derivs.push(dx);
        controls.push(u);
        if t >= t_b {
            break;
        }
        k += 1;
        let t_next = {
            let tn = t_a + k as f64 * step;
            if tn >= t_b || t_b - tn < 1e-12 * (t_b - t_a).max(1.0) {
                t_b
            } else {
                tn
            }
        };
        let h = t_next - t;
        let (k1, _) = rhs(t, &x)?;
        let (k2, _) = rhs(t + 0.5 * h, &(&x + &k1 * (0.5 * h)))?;
        let (k3, _) = rhs(t + 0.5 * h, &(&x + &k2 * (0.5 * h)))?;
        let (k4, _) = rhs(t_next, &(&x + &k3 * h))?;
        x = &x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Blowup { time: t_next });
        }
        t = t_next;
    }
    Ok(Segment {
        loc: Loc(seg_index),
        times,
        states,
        derivs,
        controls,
    })
}

/// Quadrature of the realized tracking cost along the closed loop.
fn closed_loop_cost(sys: &LqHybridSystem, cost: &LqCost, pass: &LqPass) -> f64 {
    let _ = sys;
    let mut total = 0.0;
    for (i, seg) in pass.closed_loop.segments.iter().enumerate() {
        let st = &cost.stages[i];
        let integrand = |t: f64, x: &DVector<f64>, u: &DVector<f64>| -> f64 {
            let l = (st.l)(t);
            let r = (st.r)(t);
            let dx = x - (st.reference)(t);
            0.5 * dx.dot(&(&l * &dx)) + 0.5 * u.dot(&(&r * u))
        };
        for k in 0..seg.times.len().saturating_sub(1) {
            let (ta, tb) = (seg.times[k], seg.times[k + 1]);
            let tm = 0.5 * (ta + tb);
            let xm = seg.sample(tm);
            let um = 0.5 * (&seg.controls[k] + &seg.controls[k + 1]);
            let fa = integrand(ta, &seg.states[k], &seg.controls[k]);
            let fm = integrand(tm, &xm, &um);
            let fb = integrand(tb, &seg.states[k + 1], &seg.controls[k + 1]);
            total += (tb - ta) / 6.0 * (fa + 4.0 * fm + fb);
        }
    }
    for (j, (_, x_pre, _)) in pass.closed_loop.switch_states.iter().enumerate() {
        let (c, d) = &cost.switch_weights[j];
        let dx = x_pre - d;
        total += 0.5 * dx.dot(&(c * &dx));
    }
    let (g, d) = &cost.terminal;
    let dx = pass.closed_loop.final_state() - d;
    total += 0.5 * dx.dot(&(g * &dx));
    total
}

/// Solve the hybrid LQ tracking problem by shooting on the switch times and
/// autonomous multipliers against Hamiltonian continuity and manifold
/// membership.
pub fn solve_tracking(
    sys: &LqHybridSystem,
    cost: &LqCost,
    x0: &State,
    span: (f64, f64),
    guess_times: &[f64],
    guess_p: &[f64],
    opts: &LqSolveOptions,
) -> Result<RiccatiSolution> {
    sys.validate()?;
    cost.validate(span)?;
    let num_switches = sys.num_switches();
    let num_autonomous = sys.switches.iter().filter(|s| s.is_autonomous()).count();
    if guess_times.len() != num_switches || guess_p.len() != num_autonomous {
        return Err(Error::Config(format!(
            "guess sizes ({}, {}) do not match ({num_switches} switches, {num_autonomous} autonomous)",
            guess_times.len(),
            guess_p.len()
        )));
    }

    let theta0 = DVector::from_vec(
        guess_times
            .iter()
            .chain(guess_p.iter())
            .copied()
            .collect::<Vec<_>>(),
    );
    let outcome: NewtonOutcome = damped_newton(
        |theta| {
            let (times, p) = split_lq_unknowns(sys, theta);
            lq_pass(sys, cost, x0, span, &times, &p, opts).map(|pass| pass.residual)
        },
        theta0,
        &opts.newton,
    )?;

    let (times, p_values) = split_lq_unknowns(sys, &outcome.unknowns);
    let pass = lq_pass(sys, cost, x0, span, &times, &p_values, opts)?;
    let mut warnings = Vec::new();
    if pass.max_k_norm > 1e8 {
        warnings.push(format!(
            "backward flow is near-singular: max |K| = {:.3e}",
            pass.max_k_norm
        ));
    }
    let cost_value = closed_loop_cost(sys, cost, &pass);
    Ok(RiccatiSolution {
        stages: pass.stages,
        switch_times: times,
        p_values,
        switch_records: pass.switch_records,
        closed_loop: pass.closed_loop,
        residual_norm: outcome.residual_norm,
        cost: cost_value,
        max_k_norm: pass.max_k_norm,
        warnings,
    })
}

/// A closed loop realizes the autonomous semantics when no guarded segment
/// crosses its switching surface strictly before its end.
pub fn lq_is_realizable(sys: &LqHybridSystem, loop_: &LqClosedLoop) -> bool {
    for (i, seg) in loop_.segments.iter().enumerate() {
        if i >= sys.switches.len() {
            break;
        }
        let Some((m, n)) = &sys.switches[i].manifold else {
            continue;
        };
        let mut prev = (m * &seg.states[0])[0] + n;
        for x in seg
            .states
            .iter()
            .take(seg.states.len().saturating_sub(1))
            .skip(1)
        {
            let cur = (m * x)[0] + n;
            if prev * cur < 0.0 {
                return false;
            }
            prev = cur;
        }
    }
    true
}

/// Multi-start wrapper: runs [`solve_tracking`] from several switch-time
/// guesses, clusters the roots, and flags multiplicity. Roots whose closed
/// loop crosses a switching surface before the solved time are dropped.
pub struct MultistartOutcome {
    pub roots: Vec<RiccatiSolution>,
    pub multiple_roots: bool,
}

pub fn solve_tracking_multistart(
    sys: &LqHybridSystem,
    cost: &LqCost,
    x0: &State,
    span: (f64, f64),
    opts: &LqSolveOptions,
) -> Result<MultistartOutcome> {
    let num_switches = sys.num_switches();
    let num_autonomous = sys.switches.iter().filter(|s| s.is_autonomous()).count();
    if num_switches == 0 {
        let sol = solve_tracking(sys, cost, x0, span, &[], &[], opts)?;
        return Ok(MultistartOutcome {
            roots: vec![sol],
            multiple_roots: false,
        });
    }
    let (t0, tf) = span;
    let p_seeds: Vec<Vec<f64>> = if num_autonomous == 0 {
        vec![vec![]]
    } else {
        [-0.5, 0.0, 0.5]
            .iter()
            .map(|&p| vec![p; num_autonomous])
            .collect()
    };
    let mut roots: Vec<RiccatiSolution> = Vec::new();
    for frac in [0.2, 0.35, 0.5, 0.65, 0.8] {
        let guess: Vec<f64> = (1..=num_switches)
            .map(|j| t0 + (tf - t0) * frac * j as f64 / num_switches as f64)
            .collect();
        for p_guess in &p_seeds {
            if let Ok(sol) = solve_tracking(sys, cost, x0, span, &guess, p_guess, opts) {
                if !lq_is_realizable(sys, &sol.closed_loop) {
                    continue;
                }
                let duplicate = roots.iter().any(|r| {
                    r.switch_times
                        .iter()
                        .zip(sol.switch_times.iter())
                        .all(|(a, b)| (a - b).abs() < 1e-6)
                });
                if !duplicate {
                    roots.push(sol);
                }
            }
        }
    }
    roots.sort_by(|a, b| a.cost.partial_cmp(&b.cost).unwrap());
    if roots.is_empty() {
        return Err(Error::NonConvergence {
            residual: f64::INFINITY,
            iterations: 5,
        });
    }
    let multiple = roots.len() > 1;
    Ok(MultistartOutcome {
        roots,
        multiple_roots: multiple,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_stage() -> (LqLocation, LqStageCost) {
        (
            LqLocation::constant(
                DMatrix::from_element(1, 1, 0.0),
                DMatrix::from_element(1, 1, 1.0),
                DVector::zeros(1),
            ),
            LqStageCost::constant(
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 1.0),
                DVector::zeros(1),
            ),
        )
    }

    #[test]
    fn scalar_riccati_matches_tanh() {
        let (stage, cost) = scalar_stage();
        let path = riccati_backward(
            &stage,
            &cost,
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            0.0,
            (0.0, 1.0),
            1e-3,
        )
        .unwrap();
        let mut max_err: f64 = 0.0;
        for (i, &t) in path.times.iter().enumerate() {
            let expected = (1.0 - t).tanh();
            max_err = max_err.max((path.k_vals[i][(0, 0)] - expected).abs());
        }
        assert!(max_err <= 1e-8, "max K error {max_err}");
        for s in &path.s_vals {
            assert_relative_eq!(s[0], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_zero_pair() {
        let stage = LqLocation::constant(
            DMatrix::from_element(1, 1, 0.3),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
        );
        let cost = LqStageCost::constant(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
        );
        let path = riccati_backward(
            &stage,
            &cost,
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
            0.0,
            (0.0, 1.0),
            1e-3,
        )
        .unwrap();
        for (k, s) in path.k_vals.iter().zip(path.s_vals.iter()) {
            assert_relative_eq!(k[(0, 0)], 0.0);
            assert_relative_eq!(s[0], 0.0);
        }
    }

    #[test]
    fn offset_path_matches_fine_step_oracle() {
        // Tracking r = 1 feeds s through L r; compare a coarse run against
        // a 10x finer one.
        let stage = LqLocation::constant(
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
        );
        let cost = LqStageCost::constant(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_vec(vec![1.0]),
        );
        let run = |step: f64| {
            riccati_backward(
                &stage,
                &cost,
                DMatrix::zeros(1, 1),
                DVector::zeros(1),
                0.0,
                (0.0, 1.0),
                step,
            )
            .unwrap()
        };
        let coarse = run(1e-3);
        let fine = run(1e-4);
        let err = (coarse.s_vals[0][0] - fine.s_vals[0][0]).abs();
        assert!(err <= 1e-8, "s(0) mismatch {err}");
    }

    #[test]
    fn switch_jump_hand_values() {
        // Identity jump, no weights: pair passes through.
        let k = DMatrix::from_element(1, 1, 0.7);
        let s = DVector::from_vec(vec![0.2]);
        let (km, sm) = switch_jump(
            &k,
            &s,
            &DMatrix::identity(1, 1),
            &DMatrix::zeros(1, 1),
            &DVector::zeros(1),
            0.0,
            None,
            &DVector::zeros(1),
        );
        assert_relative_eq!(km[(0, 0)], 0.7);
        assert_relative_eq!(sm[0], 0.2);

        // Scalar sign flip: K unchanged, s flips.
        let (km, sm) = switch_jump(
            &k,
            &s,
            &DMatrix::from_element(1, 1, -1.0),
            &DMatrix::zeros(1, 1),
            &DVector::zeros(1),
            0.0,
            None,
            &DVector::zeros(1),
        );
        assert_relative_eq!(km[(0, 0)], 0.7);
        assert_relative_eq!(sm[0], -0.2);

        // 2-D: C adds to a diagonal entry, p enters through the manifold row.
        let k2 = DMatrix::identity(2, 2) * 0.5;
        let s2 = DVector::zeros(2);
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        let m_row = RowDVector::from_vec(vec![0.0, 1.0]);
        let (km, sm) = switch_jump(
            &k2,
            &s2,
            &DMatrix::identity(2, 2),
            &c,
            &DVector::zeros(2),
            0.3,
            Some(&m_row),
            &DVector::zeros(2),
        );
        assert_relative_eq!(km[(0, 0)], 1.5);
        assert_relative_eq!(km[(1, 1)], 0.5);
        assert_relative_eq!(sm[0], 0.0);
        assert_relative_eq!(sm[1], 0.3);
    }

    #[test]
    fn feedback_hand_value() {
        let u = feedback(
            &DMatrix::from_element(1, 1, 2.0),
            &DVector::from_vec(vec![1.0]),
            &DVector::from_vec(vec![3.0]),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert_relative_eq!(u[0], -7.0);
        let u0 = feedback(
            &DMatrix::from_element(1, 1, 2.0),
            &DVector::zeros(1),
            &DVector::zeros(1),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert_relative_eq!(u0[0], 0.0);
    }

    #[test]
    fn minimized_hamiltonian_hand_value() {
        let (stage, cost) = scalar_stage();
        // x = 1, K = 2, s = 0, A = 0, B = R = L = 1: the reconstructed
        // adjoint is K x + s = 2, the minimizing control -2, and
        // H = x^2/2 + u^2/2 + lambda u = 1/2 + 2 - 4 = -3/2.
        let h = hamiltonian_min_value(
            0.0,
            &DVector::from_vec(vec![1.0]),
            &DMatrix::from_element(1, 1, 2.0),
            &DVector::zeros(1),
            &stage,
            &cost,
        )
        .unwrap();
        assert_relative_eq!(h, -1.5);
        // At x = r with zero pair the Hamiltonian vanishes.
        let h0 = hamiltonian_min_value(
            0.0,
            &DVector::zeros(1),
            &DMatrix::zeros(1, 1),
            &DVector::zeros(1),
            &stage,
            &cost,
        )
        .unwrap();
        assert_relative_eq!(h0, 0.0);
    }

    #[test]
    fn degenerate_switch_is_invisible() {
        // P = I, C = 0, identical stages: the two-stage solution matches
        // the single-stage one.
        let (stage, stage_cost) = scalar_stage();
        let sys2 = LqHybridSystem {
            locations: vec![stage.clone(), stage.clone()],
            switches: vec![LqSwitch {
                p_mat: DMatrix::identity(1, 1),
                offset: DVector::zeros(1),
                manifold: None,
            }],
        };
        let cost2 = LqCost {
            stages: vec![stage_cost.clone(), stage_cost.clone()],
            switch_weights: vec![(DMatrix::zeros(1, 1), DVector::zeros(1))],
            terminal: (DMatrix::zeros(1, 1), DVector::zeros(1)),
        };
        let opts = LqSolveOptions::default();
        let x0 = DVector::from_vec(vec![1.0]);
        let sol2 = solve_tracking(&sys2, &cost2, &x0, (0.0, 1.0), &[0.5], &[], &opts).unwrap();

        let sys1 = LqHybridSystem {
            locations: vec![stage],
            switches: vec![],
        };
        let cost1 = LqCost {
            stages: vec![stage_cost],
            switch_weights: vec![],
            terminal: (DMatrix::zeros(1, 1), DVector::zeros(1)),
        };
        let sol1 = solve_tracking(&sys1, &cost1, &x0, (0.0, 1.0), &[], &[], &opts).unwrap();
        for &t in &[0.1, 0.3, 0.7, 0.9] {
            assert_relative_eq!(
                sol2.k_at(t)[(0, 0)],
                sol1.k_at(t)[(0, 0)],
                epsilon = 1e-9
            );
            let x2 = sol2.closed_loop.sample(t)[0];
            let x1 = sol1.closed_loop.sample(t)[0];
            assert_relative_eq!(x2, x1, epsilon = 1e-9);
        }
    }

    #[test]
    fn symmetry_and_psd_hold_along_paths() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let stage = LqLocation::constant(a, b, DVector::zeros(2));
        let cost = LqStageCost::constant(
            DMatrix::identity(2, 2),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(2),
        );
        let path = riccati_backward(
            &stage,
            &cost,
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0])),
            DVector::zeros(2),
            0.0,
            (0.0, 4.0),
            1e-3,
        )
        .unwrap();
        for k in &path.k_vals {
            assert!((k - k.transpose()).amax() <= 1e-10);
            let eig = k.clone().symmetric_eigen();
            assert!(eig.eigenvalues.min() >= -1e-8);
        }
    }

    #[test]
    fn non_positive_r_is_rejected() {
        let (stage, _) = scalar_stage();
        let bad = LqCost {
            stages: vec![LqStageCost::constant(
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 0.0),
                DVector::zeros(1),
            )],
            switch_weights: vec![],
            terminal: (DMatrix::zeros(1, 1), DVector::zeros(1)),
        };
        let sys = LqHybridSystem {
            locations: vec![stage],
            switches: vec![],
        };
        let err = solve_tracking(
            &sys,
            &bad,
            &DVector::from_vec(vec![1.0]),
            (0.0, 1.0),
            &[],
            &[],
            &LqSolveOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotPositive(_)));
    }
}
