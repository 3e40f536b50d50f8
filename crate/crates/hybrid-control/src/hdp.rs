//! Dynamic programming on tensor grids: a semi-Lagrangian backward solver
//! for the hybrid value functions, one grid per (location, remaining-switch
//! count) stage, plus value-gradient extraction, a pointwise equation
//! residual and an empirical Lipschitz estimate.
//!
//! The backward step is `V(t - dt, x) = min_u { l(x,u) dt + V(t, x + dt f(x,u)) }`
//! with multilinear interpolation at the characteristic feet, a discretized
//! control lattice and one local golden-section refinement around the
//! lattice argmin. Where a stage allows switching (everywhere for controlled
//! stages, on the manifold band for autonomous ones) the update takes the
//! minimum with the composed value of the next stage at the same time slice.
//! Stages with remaining switches close their terminal slice with the same
//! composition, so every stored value is finite.

use nalgebra::DVector;

use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::system::{HybridSystem, LocationSequence};
use crate::types::{golden_section, Control, Loc, State, SwitchKind};

const MAX_GRID_DIM: usize = 3;

/// One uniform grid axis.
#[derive(Debug, Clone)]
pub struct Axis {
    pub lo: f64,
    pub dx: f64,
    pub n: usize,
}

impl Axis {
    pub fn hi(&self) -> f64 {
        self.lo + self.dx * (self.n - 1) as f64
    }
}

/// Grid resolution and the control discretization of one stage.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub dx: Vec<f64>,
    pub dt: f64,
    /// Control lattice levels per control axis.
    pub control_levels: usize,
    /// Refine the lattice argmin with one local golden-section search.
    pub golden_refine: bool,
    /// Keep the per-node argmin control table.
    pub store_policy: bool,
}

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, dx: Vec<f64>, dt: f64) -> Self {
        GridSpec {
            lo,
            hi,
            dx,
            dt,
            control_levels: 41,
            golden_refine: true,
            store_policy: true,
        }
    }

    /// Same grid with both resolutions halved.
    pub fn refined(&self) -> Self {
        GridSpec {
            dx: self.dx.iter().map(|d| 0.5 * d).collect(),
            dt: 0.5 * self.dt,
            ..self.clone()
        }
    }

    fn axes(&self) -> Result<Vec<Axis>> {
        if self.lo.len() != self.hi.len() || self.lo.len() != self.dx.len() {
            return Err(Error::Config("grid spec dimension mismatch".into()));
        }
        if self.lo.len() > MAX_GRID_DIM {
            return Err(Error::Config(format!(
                "grids support up to {MAX_GRID_DIM} dimensions"
            )));
        }
        self.lo
            .iter()
            .zip(self.hi.iter())
            .zip(self.dx.iter())
            .map(|((&lo, &hi), &dx)| {
                if !(dx > 0.0 && hi > lo) {
                    return Err(Error::Config("degenerate grid axis".into()));
                }
                let n = ((hi - lo) / dx).round() as usize + 1;
                Ok(Axis { lo, dx, n })
            })
            .collect()
    }
}

/// Tabulated value function of one (location, remaining switches) stage.
pub struct ValueGrid {
    pub q: Loc,
    pub remaining: usize,
    pub t0: f64,
    pub dt: f64,
    /// Number of time slices; slice `k` sits at `t0 + k dt`.
    pub n_t: usize,
    pub axes: Vec<Axis>,
    strides: Vec<usize>,
    n_nodes: usize,
    values: Vec<f64>,
    policy: Option<Vec<f64>>,
    control_dim: usize,
    /// Characteristic feet clamped to the box during precomputation.
    pub boundary_clamps: usize,
}

#[derive(Clone, Copy)]
struct Stencil {
    base: usize,
    frac: [f64; MAX_GRID_DIM],
    clamped: bool,
}

fn make_strides(axes: &[Axis]) -> Vec<usize> {
    // Row-major: last axis contiguous.
    let d = axes.len();
    let mut strides = vec![1usize; d];
    for j in (0..d.saturating_sub(1)).rev() {
        strides[j] = strides[j + 1] * axes[j + 1].n;
    }
    strides
}

/// Borrowed grid geometry, usable while the value storage is split for
/// writing.
#[derive(Clone, Copy)]
struct Geom<'a> {
    axes: &'a [Axis],
    strides: &'a [usize],
}

impl<'a> Geom<'a> {
    fn dim(&self) -> usize {
        self.axes.len()
    }

    fn node_coords(&self, mut flat: usize) -> DVector<f64> {
        let d = self.dim();
        let mut x = DVector::zeros(d);
        for j in 0..d {
            let i = flat / self.strides[j];
            flat %= self.strides[j];
            x[j] = self.axes[j].lo + self.axes[j].dx * i as f64;
        }
        x
    }
}

fn stencil_at(axes: &[Axis], strides: &[usize], pos: &[f64]) -> Stencil {
    let d = axes.len();
    let mut base = 0usize;
    let mut frac = [0.0; MAX_GRID_DIM];
    let mut clamped = false;
    for j in 0..d {
        let mut s = (pos[j] - axes[j].lo) / axes[j].dx;
        if s < 0.0 {
            s = 0.0;
            clamped = true;
        }
        let max_s = (axes[j].n - 1) as f64;
        if s > max_s {
            s = max_s;
            clamped = true;
        }
        let mut cell = s.floor() as usize;
        if cell >= axes[j].n - 1 {
            cell = axes[j].n.saturating_sub(2);
        }
        frac[j] = (s - cell as f64).clamp(0.0, 1.0);
        base += cell * strides[j];
    }
    Stencil { base, frac, clamped }
}

#[inline]
fn apply_stencil(vals: &[f64], st: &Stencil, strides: &[usize], d: usize) -> f64 {
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut idx = st.base;
        let mut w = 1.0;
        for j in 0..d {
            if corner >> j & 1 == 1 {
                idx += strides[j];
                w *= st.frac[j];
            } else {
                w *= 1.0 - st.frac[j];
            }
        }
        acc += w * vals[idx];
    }
    acc
}

impl ValueGrid {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn tf(&self) -> f64 {
        self.t0 + self.dt * (self.n_t - 1) as f64
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_nodes..(k + 1) * self.n_nodes]
    }

    /// Coordinates of a flat node index.
    pub fn node_coords(&self, mut flat: usize) -> DVector<f64> {
        let d = self.dim();
        let mut x = DVector::zeros(d);
        for j in 0..d {
            let i = flat / self.strides[j];
            flat %= self.strides[j];
            x[j] = self.axes[j].lo + self.axes[j].dx * i as f64;
        }
        x
    }

    /// Nearest time-slice index for `t`.
    pub fn slice_index_nearest(&self, t: f64) -> usize {
        let k = ((t - self.t0) / self.dt).round() as isize;
        k.clamp(0, self.n_t as isize - 1) as usize
    }

    fn check_inside(&self, x: &State, margin_cells: f64) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
                context: "grid point".into(),
            });
        }
        for j in 0..self.dim() {
            let m = margin_cells * self.axes[j].dx;
            if x[j] < self.axes[j].lo + m - 1e-12 || x[j] > self.axes[j].hi() - m + 1e-12 {
                return Err(Error::GridDomain(format!(
                    "x[{j}] = {} outside [{}, {}] with margin {m}",
                    x[j],
                    self.axes[j].lo,
                    self.axes[j].hi()
                )));
            }
        }
        Ok(())
    }

    /// Multilinear interpolation of the value on slice `k`.
    pub fn value_on_slice(&self, k: usize, x: &State) -> f64 {
        let mut pos = [0.0; MAX_GRID_DIM];
        for j in 0..self.dim() {
            pos[j] = x[j];
        }
        let st = stencil_at(&self.axes, &self.strides, &pos[..self.dim()]);
        apply_stencil(self.slice(k), &st, &self.strides, self.dim())
    }

    /// Value at `(t, x)` using the nearest time slice.
    pub fn value(&self, t: f64, x: &State) -> Result<f64> {
        self.check_inside(x, 0.0)?;
        Ok(self.value_on_slice(self.slice_index_nearest(t), x))
    }

    /// Central-difference gradient of the interpolated value at the nearest
    /// time slice, with step `dx` per axis. The probe points must stay
    /// inside the box.
    pub fn value_gradient(&self, t: f64, x: &State) -> Result<DVector<f64>> {
        self.check_inside(x, 1.0)?;
        let k = self.slice_index_nearest(t);
        let d = self.dim();
        let mut g = DVector::zeros(d);
        let mut xp = x.clone();
        let mut xm = x.clone();
        for j in 0..d {
            let h = self.axes[j].dx;
            xp[j] = x[j] + h;
            xm[j] = x[j] - h;
            g[j] = (self.value_on_slice(k, &xp) - self.value_on_slice(k, &xm)) / (2.0 * h);
            xp[j] = x[j];
            xm[j] = x[j];
        }
        Ok(g)
    }

    /// Stored argmin control nearest to `(t, x)`, when the policy table was
    /// kept.
    pub fn policy_at(&self, t: f64, x: &State) -> Option<DVector<f64>> {
        let table = self.policy.as_ref()?;
        let k = self.slice_index_nearest(t);
        let mut flat = 0usize;
        for j in 0..self.dim() {
            let i = ((x[j] - self.axes[j].lo) / self.axes[j].dx).round() as isize;
            let i = i.clamp(0, self.axes[j].n as isize - 1) as usize;
            flat += i * self.strides[j];
        }
        let m = self.control_dim;
        let off = (k * self.n_nodes + flat) * m;
        Some(DVector::from_column_slice(&table[off..off + m]))
    }

    pub fn has_policy(&self) -> bool {
        self.policy.is_some()
    }
}

/// Control lattice over the box `U_q`: uniform levels per axis.
fn control_lattice(lo: &DVector<f64>, hi: &DVector<f64>, levels: usize) -> Vec<DVector<f64>> {
    let m = lo.len();
    if m == 0 {
        return vec![DVector::zeros(0)];
    }
    let per_axis: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            if levels <= 1 || hi[j] <= lo[j] {
                vec![0.5 * (lo[j] + hi[j])]
            } else {
                (0..levels)
                    .map(|k| lo[j] + (hi[j] - lo[j]) * k as f64 / (levels - 1) as f64)
                    .collect()
            }
        })
        .collect();
    let mut lattice = vec![Vec::new()];
    for axis in &per_axis {
        let mut next = Vec::with_capacity(lattice.len() * axis.len());
        for head in &lattice {
            for &v in axis {
                let mut h = head.clone();
                h.push(v);
                next.push(h);
            }
        }
        lattice = next;
    }
    lattice.into_iter().map(DVector::from_vec).collect()
}

/// Verified control-affine model for scalar controls: `f(x, u) = a + b u`
/// and `l(x, u)` quadratic in `u`. Lets the golden refinement move along
/// the characteristic line without calling the field closure.
struct AffineModel {
    foot_base: Vec<f64>, // n_nodes * d : x + dt (a(x) + b(x) u_ref) - dt b u_ref
    foot_dir: Vec<f64>,  // n_nodes * d : dt b(x)
    l_coef: Vec<[f64; 3]>, // l(x,u) = c0 + c1 u + c2 u^2
}

struct StagePre {
    lattice: Vec<DVector<f64>>,
    feet: Vec<Stencil>,
    run_dt: Vec<f64>,
    affine: Option<AffineModel>,
    u_lo: f64,
    u_hi: f64,
    comp: Option<CompositionPre>,
    clamps: usize,
}

struct CompositionPre {
    stencil: Vec<Stencil>,
    add_cost: Vec<f64>,
    band: Vec<bool>,
}

fn quadratic_through(u: [f64; 3], v: [f64; 3]) -> [f64; 3] {
    // Unique quadratic through three points with distinct abscissae.
    let d01 = (v[1] - v[0]) / (u[1] - u[0]);
    let d12 = (v[2] - v[1]) / (u[2] - u[1]);
    let c2 = (d12 - d01) / (u[2] - u[0]);
    let c1 = d01 - c2 * (u[0] + u[1]);
    let c0 = v[0] - u[0] * (c1 + c2 * u[0]);
    [c0, c1, c2]
}

fn precompute_stage(
    sys: &HybridSystem,
    cost: &CostSpec,
    q: Loc,
    grid: &ValueGrid,
    spec: &GridSpec,
    next: Option<(&ValueGrid, &crate::system::SequenceStep)>,
) -> Result<StagePre> {
    let d = grid.dim();
    let n_nodes = grid.n_nodes;
    let (u_lo_v, u_hi_v) = sys.control_bounds(q);
    let lattice = control_lattice(u_lo_v, u_hi_v, spec.control_levels);
    let n_lat = lattice.len();
    let field = sys.field(q);
    let running = cost.running(q);

    let mut feet = Vec::with_capacity(n_nodes * n_lat);
    let mut run_dt = Vec::with_capacity(n_nodes * n_lat);
    let mut clamps = 0usize;
    let mut pos = [0.0; MAX_GRID_DIM];
    for node in 0..n_nodes {
        let x = grid.node_coords(node);
        for u in &lattice {
            let f = field(&x, u);
            for j in 0..d {
                pos[j] = x[j] + spec.dt * f[j];
            }
            let st = stencil_at(&grid.axes, &grid.strides, &pos[..d]);
            if st.clamped {
                clamps += 1;
            }
            feet.push(st);
            run_dt.push(running(&x, u) * spec.dt);
        }
    }

    // Probe a control-affine / control-quadratic structure for scalar
    // controls; verified on sample nodes before use.
    let m = sys.control_dim(q);
    let affine = if m == 1 && u_hi_v[0] > u_lo_v[0] && spec.golden_refine {
        let u_mid = 0.5 * (u_lo_v[0] + u_hi_v[0]);
        let half = 0.5 * (u_hi_v[0] - u_lo_v[0]);
        let probes = [u_mid - half, u_mid, u_mid + half];
        let check_nodes: Vec<usize> = [0, n_nodes / 3, n_nodes / 2, 2 * n_nodes / 3]
            .iter()
            .map(|&i| i.min(n_nodes - 1))
            .collect();
        let mut ok = true;
        for &node in &check_nodes {
            let x = grid.node_coords(node);
            let f0 = field(&x, &DVector::from_vec(vec![probes[0]]));
            let f2 = field(&x, &DVector::from_vec(vec![probes[2]]));
            let b = (&f2 - &f0) / (probes[2] - probes[0]);
            let a = &f0 - &b * probes[0];
            let u_chk = u_mid + 0.37 * half;
            let f_chk = field(&x, &DVector::from_vec(vec![u_chk]));
            let model = &a + &b * u_chk;
            if (&f_chk - &model).amax() > 1e-9 * (1.0 + f_chk.amax()) {
                ok = false;
                break;
            }
            let lv = [
                running(&x, &DVector::from_vec(vec![probes[0]])),
                running(&x, &DVector::from_vec(vec![probes[1]])),
                running(&x, &DVector::from_vec(vec![probes[2]])),
            ];
            let c = quadratic_through(probes, lv);
            let l_chk = running(&x, &DVector::from_vec(vec![u_chk]));
            let l_model = c[0] + c[1] * u_chk + c[2] * u_chk * u_chk;
            if (l_chk - l_model).abs() > 1e-9 * (1.0 + l_chk.abs()) {
                ok = false;
                break;
            }
        }
        if ok {
            let mut foot_base = vec![0.0; n_nodes * d];
            let mut foot_dir = vec![0.0; n_nodes * d];
            let mut l_coef = vec![[0.0; 3]; n_nodes];
            for node in 0..n_nodes {
                let x = grid.node_coords(node);
                let f0 = field(&x, &DVector::from_vec(vec![probes[0]]));
                let f2 = field(&x, &DVector::from_vec(vec![probes[2]]));
                let b = (&f2 - &f0) / (probes[2] - probes[0]);
                let a = &f0 - &b * probes[0];
                for j in 0..d {
                    foot_base[node * d + j] = x[j] + spec.dt * a[j];
                    foot_dir[node * d + j] = spec.dt * b[j];
                }
                let lv = [
                    running(&x, &DVector::from_vec(vec![probes[0]])),
                    running(&x, &DVector::from_vec(vec![probes[1]])),
                    running(&x, &DVector::from_vec(vec![probes[2]])),
                ];
                l_coef[node] = quadratic_through(probes, lv);
            }
            Some(AffineModel {
                foot_base,
                foot_dir,
                l_coef,
            })
        } else {
            None
        }
    } else {
        None
    };

    // Switch composition into the already-solved next stage.
    let comp = match next {
        None => None,
        Some((next_grid, step)) => {
            let mut stencil = Vec::with_capacity(n_nodes);
            let mut add_cost = Vec::with_capacity(n_nodes);
            let mut band = Vec::with_capacity(n_nodes);
            let jump = sys.jump_map(step.event);
            let manifold = match step.kind {
                SwitchKind::Autonomous => {
                    let target = sys.transition(q, step.event).unwrap();
                    Some(
                        sys.manifold(q, target)
                            .ok_or(Error::NoManifold { from: q, to: target })?,
                    )
                }
                SwitchKind::Controlled => None,
            };
            let max_dx = spec.dx.iter().cloned().fold(0.0_f64, f64::max);
            let mut pos = [0.0; MAX_GRID_DIM];
            for node in 0..n_nodes {
                let x = grid.node_coords(node);
                let xi = match jump {
                    Some(j) => (j.map)(&x),
                    None => x.clone(),
                };
                for j in 0..next_grid.dim() {
                    pos[j] = xi[j];
                }
                stencil.push(stencil_at(
                    &next_grid.axes,
                    &next_grid.strides,
                    &pos[..next_grid.dim()],
                ));
                add_cost.push(cost.switching_value(step.event, &x));
                band.push(match manifold {
                    None => true,
                    Some(m) => {
                        let g = (m.gradient)(&x).norm();
                        (m.value)(&x).abs() <= max_dx * g
                    }
                });
            }
            Some(CompositionPre {
                stencil,
                add_cost,
                band,
            })
        }
    };

    Ok(StagePre {
        lattice,
        feet,
        run_dt,
        affine,
        u_lo: if m == 1 { u_lo_v[0] } else { 0.0 },
        u_hi: if m == 1 { u_hi_v[0] } else { 0.0 },
        comp,
        clamps,
    })
}

/// One backward semi-Lagrangian sweep producing slice `k` values from the
/// continue branch only. Exposed for the scheme's monotonicity tests.
#[allow(clippy::too_many_arguments)]
fn continue_step(
    geom: Geom<'_>,
    pre: &StagePre,
    sys: &HybridSystem,
    cost: &CostSpec,
    q: Loc,
    dt: f64,
    next_vals: &[f64],
    out: &mut [f64],
    policy_out: Option<&mut [f64]>,
    golden: bool,
) {
    let d = geom.dim();
    let n_lat = pre.lattice.len();
    let strides = geom.strides;
    let field = sys.field(q);
    let running = cost.running(q);
    let m = pre.lattice[0].len();
    let mut policy_out = policy_out;

    for node in 0..out.len() {
        let base = node * n_lat;
        let mut best = f64::INFINITY;
        let mut best_lvl = 0usize;
        for lvl in 0..n_lat {
            let v = pre.run_dt[base + lvl]
                + apply_stencil(next_vals, &pre.feet[base + lvl], strides, d);
            if v < best {
                best = v;
                best_lvl = lvl;
            }
        }
        let mut best_u: Option<f64> = None;
        if golden && m == 1 && n_lat > 1 {
            let u_star = pre.lattice[best_lvl][0];
            let du = (pre.u_hi - pre.u_lo) / (n_lat - 1) as f64;
            let lo = (u_star - du).max(pre.u_lo);
            let hi = (u_star + du).min(pre.u_hi);
            let tol = (pre.u_hi - pre.u_lo) * 1e-5;
            let eval_at = |u: f64| -> f64 {
                match &pre.affine {
                    Some(model) => {
                        let fb = &model.foot_base[node * d..node * d + d];
                        let fd = &model.foot_dir[node * d..node * d + d];
                        let c = model.l_coef[node];
                        let mut pos = [0.0; MAX_GRID_DIM];
                        for j in 0..d {
                            pos[j] = fb[j] + u * fd[j];
                        }
                        let st = stencil_at(geom.axes, strides, &pos[..d]);
                        (c[0] + c[1] * u + c[2] * u * u) * dt
                            + apply_stencil(next_vals, &st, strides, d)
                    }
                    None => {
                        let x = geom.node_coords(node);
                        let uv = DVector::from_vec(vec![u]);
                        let f = field(&x, &uv);
                        let mut pos = [0.0; MAX_GRID_DIM];
                        for j in 0..d {
                            pos[j] = x[j] + dt * f[j];
                        }
                        let st = stencil_at(geom.axes, strides, &pos[..d]);
                        running(&x, &uv) * dt + apply_stencil(next_vals, &st, strides, d)
                    }
                }
            };
            let mut obj = |u: f64| eval_at(u);
            let u_ref = golden_section(&mut obj, lo, hi, tol);
            // Keep the refined candidate only if it improves on the lattice.
            let v_ref = eval_at(u_ref);
            if v_ref < best {
                best = v_ref;
                best_u = Some(u_ref);
            }
        }
        out[node] = best;
        if let Some(p) = policy_out.as_deref_mut() {
            let u = match best_u {
                Some(u) => DVector::from_vec(vec![u]),
                None => pre.lattice[best_lvl].clone(),
            };
            p[node * m..(node + 1) * m].copy_from_slice(u.as_slice());
        }
    }
}

/// Solve the stacked value functions of a fixed discrete sequence, innermost
/// stage first. Returns one grid per stage, ordered by segment index
/// (`remaining = L - i`).
pub fn solve_hjb(
    sys: &HybridSystem,
    cost: &CostSpec,
    seq: &LocationSequence,
    span: (f64, f64),
    specs: &[GridSpec],
) -> Result<Vec<ValueGrid>> {
    let num_stages = seq.num_switches() + 1;
    if specs.len() != num_stages {
        return Err(Error::Config(format!(
            "{} grid specs for {} stages",
            specs.len(),
            num_stages
        )));
    }
    let (t0, tf) = span;
    let dt = specs[0].dt;
    let n_t = ((tf - t0) / dt).round() as usize + 1;
    for s in specs {
        if (s.dt - dt).abs() > 1e-12 {
            return Err(Error::Config(
                "all stages of one stack must share the time grid".into(),
            ));
        }
    }
    if ((n_t - 1) as f64 * dt - (tf - t0)).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "dt = {dt} does not divide the horizon [{t0}, {tf}]"
        )));
    }

    let mut stages_rev: Vec<ValueGrid> = Vec::with_capacity(num_stages);
    for i in (0..num_stages).rev() {
        let spec = &specs[i];
        let q = seq.location(i);
        let axes = spec.axes()?;
        for (j, ax) in axes.iter().enumerate() {
            if ax.n < 3 {
                return Err(Error::Config(format!("axis {j} has fewer than 3 nodes")));
            }
        }
        let strides = make_strides(&axes);
        let n_nodes = axes.iter().map(|a| a.n).product();
        let control_dim = sys.control_dim(q).max(1);
        let mut grid = ValueGrid {
            q,
            remaining: num_stages - 1 - i,
            t0,
            dt,
            n_t,
            axes,
            strides,
            n_nodes,
            values: vec![0.0; n_t * n_nodes],
            policy: spec
                .store_policy
                .then(|| vec![0.0; n_t * n_nodes * control_dim]),
            control_dim,
            boundary_clamps: 0,
        };

        let next = if i + 1 < num_stages {
            Some((&stages_rev[num_stages - 2 - i], &seq.steps[i]))
        } else {
            None
        };
        let pre = precompute_stage(sys, cost, q, &grid, spec, next)?;
        grid.boundary_clamps = pre.clamps;

        // Terminal slice: the terminal cost for the innermost stage, the
        // switch composition for every other stage.
        {
            let g = cost.terminal();
            let last = n_t - 1;
            for node in 0..n_nodes {
                let v = match (&pre.comp, next) {
                    (Some(comp), Some((next_grid, _))) => {
                        apply_stencil(
                            next_grid.slice(last),
                            &comp.stencil[node],
                            &next_grid.strides,
                            next_grid.dim(),
                        ) + comp.add_cost[node]
                    }
                    _ => g(&grid.node_coords(node)),
                };
                grid.values[last * n_nodes + node] = v;
            }
        }

        for k in (0..n_t - 1).rev() {
            let geom = Geom {
                axes: &grid.axes,
                strides: &grid.strides,
            };
            let (head, tail) = grid.values.split_at_mut((k + 1) * n_nodes);
            let out = &mut head[k * n_nodes..];
            let next_vals = &tail[..n_nodes];
            let policy_slice = grid
                .policy
                .as_mut()
                .map(|p| &mut p[k * n_nodes * control_dim..(k + 1) * n_nodes * control_dim]);
            continue_step(
                geom,
                &pre,
                sys,
                cost,
                q,
                dt,
                next_vals,
                out,
                policy_slice,
                spec.golden_refine,
            );
            if let (Some(comp), Some((next_grid, _))) = (&pre.comp, next) {
                let next_slice = next_grid.slice(k);
                for node in 0..n_nodes {
                    if comp.band[node] {
                        let sv = apply_stencil(
                            next_slice,
                            &comp.stencil[node],
                            &next_grid.strides,
                            next_grid.dim(),
                        ) + comp.add_cost[node];
                        if sv < out[node] {
                            out[node] = sv;
                        }
                    }
                }
            }
        }
        stages_rev.push(grid);
    }
    stages_rev.reverse();
    Ok(stages_rev)
}

/// Pointwise equation residual `dV/dt + min_u { l + <grad V, f> }` at an
/// interior point, with the time derivative as a forward difference between
/// the nearest slice and its successor.
pub fn hjb_residual(
    sys: &HybridSystem,
    cost: &CostSpec,
    grid: &ValueGrid,
    t: f64,
    x: &State,
) -> Result<f64> {
    let k = grid.slice_index_nearest(t);
    if k + 1 >= grid.n_t {
        return Err(Error::GridDomain(
            "residual needs a successor time slice".into(),
        ));
    }
    let dvdt = (grid.value_on_slice(k + 1, x) - grid.value_on_slice(k, x)) / grid.dt;
    let grad = grid.value_gradient(t, x)?;
    let q = grid.q;
    let (u_lo, u_hi) = sys.control_bounds(q);
    let lattice = control_lattice(u_lo, u_hi, 41);
    let field = sys.field(q);
    let running = cost.running(q);
    let ham = |u: &Control| running(x, u) + grad.dot(&field(x, u));
    let mut best = f64::INFINITY;
    let mut best_lvl = 0usize;
    for (lvl, u) in lattice.iter().enumerate() {
        let v = ham(u);
        if v < best {
            best = v;
            best_lvl = lvl;
        }
    }
    if u_lo.len() == 1 && u_hi[0] > u_lo[0] && lattice.len() > 1 {
        let du = (u_hi[0] - u_lo[0]) / (lattice.len() - 1) as f64;
        let u_star = lattice[best_lvl][0];
        let mut obj = |u: f64| ham(&DVector::from_vec(vec![u]));
        let u_ref = golden_section(
            &mut obj,
            (u_star - du).max(u_lo[0]),
            (u_star + du).min(u_hi[0]),
            (u_hi[0] - u_lo[0]) * 1e-7,
        );
        best = best.min(ham(&DVector::from_vec(vec![u_ref])));
    }
    Ok(dvdt + best)
}

/// Empirical Lipschitz estimate of the tabulated value over a region box:
/// the largest difference quotient over axis-neighbor pairs within a slice
/// and same-node pairs across adjacent slices, excluding the first and the
/// terminal slice.
pub fn estimate_lipschitz(grid: &ValueGrid, region_lo: &[f64], region_hi: &[f64]) -> f64 {
    let d = grid.dim();
    let in_region = |x: &DVector<f64>| {
        (0..d).all(|j| x[j] >= region_lo[j] - 1e-12 && x[j] <= region_hi[j] + 1e-12)
    };
    let mut k_hat: f64 = 0.0;
    let k_range = 1..grid.n_t.saturating_sub(1);
    for k in k_range.clone() {
        let vals = grid.slice(k);
        for node in 0..grid.n_nodes {
            let x = grid.node_coords(node);
            if !in_region(&x) {
                continue;
            }
            for j in 0..d {
                let i = ((x[j] - grid.axes[j].lo) / grid.axes[j].dx).round() as usize;
                if i + 1 < grid.axes[j].n {
                    let mut xn = x.clone();
                    xn[j] += grid.axes[j].dx;
                    if in_region(&xn) {
                        let nb = node + grid.strides[j];
                        k_hat = k_hat.max((vals[nb] - vals[node]).abs() / grid.axes[j].dx);
                    }
                }
            }
            if k + 1 < grid.n_t - 1 {
                let next = grid.slice(k + 1);
                k_hat = k_hat.max((next[node] - vals[node]).abs() / grid.dt);
            }
        }
    }
    k_hat
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::system::SequenceStep;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn translation_system(u_lo: f64, u_hi: f64) -> HybridSystem {
        HybridSystem::builder()
            .location(
                Arc::new(|_x: &State, u: &Control| u.clone()),
                vec![u_lo],
                vec![u_hi],
                1,
            )
            .build()
            .unwrap()
    }

    fn eikonal_cost() -> CostSpec {
        CostSpec::builder()
            .running_with_grad(
                |_x: &State, _u: &Control| 0.0,
                |_x: &State, _u: &Control| DVector::zeros(1),
            )
            .terminal(1, |x: &State| x[0].abs())
            .build()
            .unwrap()
    }

    fn eikonal_grids(dx: f64, dt: f64) -> Vec<ValueGrid> {
        let sys = translation_system(-1.0, 1.0);
        let cost = eikonal_cost();
        let seq = LocationSequence::new(&sys, Loc(0), vec![]).unwrap();
        let spec = GridSpec::new(vec![-2.0], vec![2.0], vec![dx], dt);
        solve_hjb(&sys, &cost, &seq, (0.0, 1.0), &[spec]).unwrap()
    }

    #[test]
    fn eikonal_value_matches_closed_form() {
        // V(t, x) = max(|x| - (tf - t), 0) for x' = u, |u| <= 1, g = |x|.
        let grids = eikonal_grids(1e-2, 1e-2);
        let g = &grids[0];
        let mut max_err: f64 = 0.0;
        for k in 0..g.n_t {
            let t = g.t0 + k as f64 * g.dt;
            let vals = g.slice(k);
            for node in 0..g.n_nodes() {
                let x = g.node_coords(node)[0];
                let exact = (x.abs() - (1.0 - t)).max(0.0);
                max_err = max_err.max((vals[node] - exact).abs());
            }
        }
        assert!(max_err <= 1e-2 + 1e-2, "max node error {max_err}");
    }

    #[test]
    fn terminal_slice_is_exact() {
        let grids = eikonal_grids(1e-2, 1e-2);
        let g = &grids[0];
        let vals = g.slice(g.n_t - 1);
        for node in (0..g.n_nodes()).step_by(7) {
            let x = g.node_coords(node)[0];
            assert_relative_eq!(vals[node], x.abs(), epsilon = 1e-14);
        }
    }

    #[test]
    fn value_gradient_is_exact_for_quadratics_and_linears() {
        let sys = translation_system(-1.0, 1.0);
        let cost = CostSpec::builder()
            .running(|_x: &State, _u: &Control| 0.0)
            .terminal(1, |x: &State| 0.5 * x[0] * x[0])
            .build()
            .unwrap();
        let seq = LocationSequence::new(&sys, Loc(0), vec![]).unwrap();
        let spec = GridSpec::new(vec![-1.0], vec![1.0], vec![0.05], 0.05);
        let grids = solve_hjb(&sys, &cost, &seq, (0.0, 0.2), &[spec]).unwrap();
        let g = &grids[0];
        // At the terminal slice V = x^2/2 exactly: central differences of a
        // quadratic are exact at the nodes.
        let x = DVector::from_vec(vec![0.25]);
        let grad = g.value_gradient(g.tf(), &x).unwrap();
        assert_relative_eq!(grad[0], 0.25, epsilon = 1e-12);

        // A hand-tabulated linear function has an exact gradient.
        let mut lin = ValueGrid {
            q: Loc(0),
            remaining: 0,
            t0: 0.0,
            dt: 0.1,
            n_t: 2,
            axes: vec![
                Axis { lo: -1.0, dx: 0.1, n: 21 },
                Axis { lo: -1.0, dx: 0.1, n: 21 },
            ],
            strides: vec![21, 1],
            n_nodes: 441,
            values: vec![0.0; 2 * 441],
            policy: None,
            control_dim: 1,
            boundary_clamps: 0,
        };
        for k in 0..2 {
            for node in 0..441 {
                let x = lin.node_coords(node);
                lin.values[k * 441 + node] = 3.0 * x[0] - 2.0 * x[1];
            }
        }
        let grad = lin
            .value_gradient(0.0, &DVector::from_vec(vec![0.13, -0.4]))
            .unwrap();
        assert_relative_eq!(grad[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(grad[1], -2.0, epsilon = 1e-12);
    }

    #[test]
    fn eikonal_gradient_is_sign_away_from_kink() {
        let grids = eikonal_grids(1e-2, 1e-2);
        let g = &grids[0];
        let grad = g
            .value_gradient(0.2, &DVector::from_vec(vec![1.5]))
            .unwrap();
        assert!((grad[0] - 1.0).abs() <= 2e-2, "grad {}", grad[0]);
        let grad = g
            .value_gradient(0.2, &DVector::from_vec(vec![-1.5]))
            .unwrap();
        assert!((grad[0] + 1.0).abs() <= 2e-2, "grad {}", grad[0]);
    }

    #[test]
    fn gradient_outside_margin_errors() {
        let grids = eikonal_grids(5e-2, 5e-2);
        let g = &grids[0];
        assert!(g
            .value_gradient(0.2, &DVector::from_vec(vec![1.999]))
            .is_err());
    }

    #[test]
    fn residual_small_at_smooth_points_not_at_kink() {
        let grids = eikonal_grids(1e-2, 1e-2);
        let sys = translation_system(-1.0, 1.0);
        let cost = eikonal_cost();
        let g = &grids[0];
        let r = hjb_residual(&sys, &cost, g, 0.3, &DVector::from_vec(vec![1.2])).unwrap();
        assert!(r.abs() <= 5.0 * (1e-2 + 1e-2), "residual {r}");
        // At the terminal-cone kink x = 0 the value is not differentiable;
        // nothing is asserted there beyond finiteness.
        let r_kink = hjb_residual(&sys, &cost, g, 0.3, &DVector::from_vec(vec![0.0])).unwrap();
        assert!(r_kink.is_finite());
    }

    #[test]
    fn one_step_consistency_with_frozen_dynamics() {
        // l = 0 and a single-point control lattice: one backward step lands
        // exactly on the interpolated terminal data, which is exact for
        // linear g under multilinear interpolation.
        let sys = translation_system(0.7, 0.7);
        let cost = CostSpec::builder()
            .running(|_x: &State, _u: &Control| 0.0)
            .terminal(1, |x: &State| 3.0 * x[0] + 1.0)
            .build()
            .unwrap();
        let seq = LocationSequence::new(&sys, Loc(0), vec![]).unwrap();
        let mut spec = GridSpec::new(vec![-2.0], vec![2.0], vec![0.1], 0.05);
        spec.control_levels = 1;
        let grids = solve_hjb(&sys, &cost, &seq, (0.0, 0.05), &[spec]).unwrap();
        let g = &grids[0];
        let vals = g.slice(0);
        for node in 0..g.n_nodes() {
            let x = g.node_coords(node)[0];
            let foot = x + 0.05 * 0.7;
            if foot <= 2.0 {
                assert_relative_eq!(vals[node], 3.0 * foot + 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn monotone_in_the_next_slice() {
        // Raising next-slice values never lowers the updated slice.
        use rand::{Rng, SeedableRng};
        let sys = translation_system(-1.0, 1.0);
        let cost = eikonal_cost();
        let seq = LocationSequence::new(&sys, Loc(0), vec![]).unwrap();
        let spec = GridSpec::new(vec![-2.0], vec![2.0], vec![0.05], 0.05);
        let grids = solve_hjb(&sys, &cost, &seq, (0.0, 0.05), &[spec.clone()]).unwrap();
        let g = &grids[0];
        let pre = precompute_stage(&sys, &cost, Loc(0), g, &spec, None).unwrap();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _trial in 0..20 {
            let base: Vec<f64> = (0..g.n_nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bumped: Vec<f64> = base
                .iter()
                .map(|v| v + rng.gen_range(0.0..0.5))
                .collect();
            let mut out_base = vec![0.0; g.n_nodes()];
            let mut out_bumped = vec![0.0; g.n_nodes()];
            let geom = Geom {
                axes: &g.axes,
                strides: &g.strides,
            };
            continue_step(
                geom, &pre, &sys, &cost, Loc(0), 0.05, &base, &mut out_base, None, true,
            );
            continue_step(
                geom, &pre, &sys, &cost, Loc(0), 0.05, &bumped, &mut out_bumped, None, true,
            );
            for node in 0..g.n_nodes() {
                assert!(
                    out_bumped[node] >= out_base[node] - 1e-9,
                    "monotonicity violated at node {node}: {} < {}",
                    out_bumped[node],
                    out_base[node]
                );
            }
        }
    }

    #[test]
    fn switch_boundary_dominance_on_first_preset() {
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
        let spec = GridSpec::new(vec![-3.0], vec![3.0], vec![0.05], 0.01);
        let grids = solve_hjb(
            &p.sys,
            &p.cost,
            &seq,
            (0.0, 1.0),
            &[spec.clone(), spec],
        )
        .unwrap();
        let (outer, inner) = (&grids[0], &grids[1]);
        // V(t, q1, x, 1) <= V(t, q2, -x, 0) + c(x) everywhere switching is
        // available (controlled stage: everywhere).
        for k in (0..outer.n_t).step_by(100) {
            for node in (0..outer.n_nodes()).step_by(13) {
                let x = outer.node_coords(node);
                let xi = DVector::from_vec(vec![-x[0]]);
                if xi[0].abs() > 2.95 {
                    continue;
                }
                let lhs = outer.slice(k)[node];
                let rhs = inner.value_on_slice(k, &xi) + 1.0 / (1.0 + x[0] * x[0]);
                assert!(
                    lhs <= rhs + 1e-9,
                    "dominance violated at slice {k}, x = {}",
                    x[0]
                );
            }
        }
    }

    #[test]
    fn lipschitz_estimate_of_quadratic_tabulation() {
        let mut g = ValueGrid {
            q: Loc(0),
            remaining: 0,
            t0: 0.0,
            dt: 0.01,
            n_t: 11,
            axes: vec![Axis { lo: -1.0, dx: 0.01, n: 201 }],
            strides: vec![1],
            n_nodes: 201,
            values: vec![0.0; 11 * 201],
            policy: None,
            control_dim: 1,
            boundary_clamps: 0,
        };
        for k in 0..11 {
            for node in 0..201 {
                let x = -1.0 + 0.01 * node as f64;
                g.values[k * 201 + node] = 0.5 * x * x;
            }
        }
        let k_hat = estimate_lipschitz(&g, &[-1.0], &[1.0]);
        // sup |V'| = 1 on [-1, 1]; the node quotient tends to it from below.
        assert!((k_hat - 1.0).abs() <= 1e-2, "k_hat = {k_hat}");

        for v in g.values.iter_mut() {
            *v = 4.0;
        }
        assert_eq!(estimate_lipschitz(&g, &[-1.0], &[1.0]), 0.0);
    }
}
