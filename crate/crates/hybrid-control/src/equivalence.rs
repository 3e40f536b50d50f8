//! Quantifies the almost-everywhere equality of the shooting adjoint and
//! the value-function gradient along an extremal: pointwise errors per
//! segment, the switch boundary-condition match on both sides, and the grid
//! resolution the comparison ran at.

use nalgebra::DVector;

use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::hdp::ValueGrid;
use crate::hmp::{adjoint_switch_condition, HmpExtremal};
use crate::system::HybridSystem;

/// Sampling controls for [`compare`].
#[derive(Debug, Clone)]
pub struct CompareOptions {
    /// Samples drawn per segment (knot subsampling).
    pub samples_per_segment: usize,
    /// Excluded margin around every switch time, in time-grid cells.
    pub switch_margin_cells: f64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            samples_per_segment: 300,
            switch_margin_cells: 1.0,
        }
    }
}

/// Pointwise comparison along one segment.
#[derive(Debug, Clone)]
pub struct SegmentComparison {
    pub segment: usize,
    pub times: Vec<f64>,
    pub lambda: Vec<DVector<f64>>,
    pub grad_v: Vec<DVector<f64>>,
    /// Infinity-norm error per sample.
    pub abs_err: Vec<f64>,
    pub max_rel: f64,
    pub median_rel: f64,
}

/// Both sides of the switch boundary conditions at one switch.
#[derive(Debug, Clone)]
pub struct SwitchComparison {
    pub index: usize,
    pub time: f64,
    /// Residual of the jump relation applied to the adjoint (zero by
    /// construction of the backward pass, kept as a consistency witness).
    pub adjoint_residual: f64,
    /// Residual of the same relation applied to the value gradient.
    pub gradient_residual: f64,
    pub mismatch: f64,
}

/// Comparison report: per-segment error series, switch boundary data and
/// the grid resolution used.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub segments: Vec<SegmentComparison>,
    pub switches: Vec<SwitchComparison>,
    pub max_rel_error: f64,
    pub median_rel_error: f64,
    /// Relative-error denominator `max(sup |lambda|, 1e-6)`.
    pub denominator: f64,
    /// Fraction of attempted samples that fell inside the grid interior.
    pub coverage: f64,
    pub grid_dx: Vec<f64>,
    pub grid_dt: f64,
}

/// Sample the value gradient along the extremal's state path and pair it
/// with the adjoint. One grid per segment, ordered by segment index; sample
/// times avoid the switch margin, and points leaving the grid interior
/// reduce the coverage fraction instead of failing.
pub fn compare(
    sys: &HybridSystem,
    cost: &CostSpec,
    extremal: &HmpExtremal,
    grids: &[ValueGrid],
    opts: &CompareOptions,
) -> Result<EquivalenceReport> {
    let traj = &extremal.trajectory;
    if grids.len() != traj.segments.len() {
        return Err(Error::Config(format!(
            "{} grids for {} segments",
            grids.len(),
            traj.segments.len()
        )));
    }

    // Relative-error denominator: the adjoint may pass through zero.
    let mut sup_lambda: f64 = 0.0;
    for adj in &extremal.adjoint {
        for v in &adj.values {
            sup_lambda = sup_lambda.max(v.amax());
        }
    }
    let denominator = sup_lambda.max(1e-6);

    let mut attempted = 0usize;
    let mut used = 0usize;
    let mut segments = Vec::with_capacity(traj.segments.len());
    let mut all_rel: Vec<f64> = Vec::new();
    let mut max_rel: f64 = 0.0;

    for (i, seg) in traj.segments.iter().enumerate() {
        let grid = &grids[i];
        let margin = opts.switch_margin_cells * grid.dt;
        let (t_lo, t_hi) = (seg.t_start(), seg.t_end());
        // Clear the margin only around switches; the horizon ends are fair.
        let lo = if i == 0 { t_lo } else { t_lo + margin };
        let hi = if i + 1 == traj.segments.len() {
            t_hi
        } else {
            t_hi - margin
        };
        let mut comparison = SegmentComparison {
            segment: i,
            times: Vec::new(),
            lambda: Vec::new(),
            grad_v: Vec::new(),
            abs_err: Vec::new(),
            max_rel: 0.0,
            median_rel: 0.0,
        };
        let n = opts.samples_per_segment.max(2);
        let mut rels = Vec::new();
        for k in 0..n {
            let t = lo + (hi - lo) * k as f64 / (n - 1) as f64;
            attempted += 1;
            let x = seg.sample(t);
            let grad = match grid.value_gradient(t, &x) {
                Ok(g) => g,
                Err(_) => continue, // outside the interior margin
            };
            used += 1;
            let lam = extremal.adjoint[i].sample(t);
            let err = (&lam - &grad).amax();
            let rel = err / denominator;
            comparison.times.push(t);
            comparison.lambda.push(lam);
            comparison.grad_v.push(grad);
            comparison.abs_err.push(err);
            rels.push(rel);
        }
        if !rels.is_empty() {
            comparison.max_rel = rels.iter().cloned().fold(0.0, f64::max);
            comparison.median_rel = median(&mut rels.clone());
            max_rel = max_rel.max(comparison.max_rel);
            all_rel.extend(rels);
        }
        segments.push(comparison);
    }

    // Switch boundary conditions: the same jump relation evaluated with the
    // adjoint and with the value gradient.
    let mut switches = Vec::new();
    for (j, sw) in traj.switches.iter().enumerate() {
        let lam_minus = extremal.adjoint[j].end_value().clone();
        let lam_plus = extremal.adjoint[j + 1].start_value().clone();
        let p = extremal.p_values[j];
        let lam_expected = adjoint_switch_condition(
            sys,
            cost,
            sw.from,
            sw.event,
            sw.kind,
            &lam_plus,
            &sw.pre_state,
            p,
        )?;
        let adjoint_residual = (&lam_minus - &lam_expected).amax();

        let grad_minus = grids[j].value_gradient(sw.time, &sw.pre_state);
        let grad_plus = grids[j + 1].value_gradient(sw.time, &sw.post_state);
        let gradient_residual = match (grad_minus, grad_plus) {
            (Ok(gm), Ok(gp)) => {
                let expected = adjoint_switch_condition(
                    sys,
                    cost,
                    sw.from,
                    sw.event,
                    sw.kind,
                    &gp,
                    &sw.pre_state,
                    p,
                )?;
                (&gm - &expected).amax()
            }
            _ => f64::NAN,
        };
        switches.push(SwitchComparison {
            index: j,
            time: sw.time,
            adjoint_residual,
            gradient_residual,
            mismatch: (gradient_residual - adjoint_residual).abs(),
        });
    }

    let median_rel_error = if all_rel.is_empty() {
        f64::NAN
    } else {
        median(&mut all_rel)
    };
    Ok(EquivalenceReport {
        segments,
        switches,
        max_rel_error: max_rel,
        median_rel_error,
        denominator,
        coverage: if attempted == 0 {
            0.0
        } else {
            used as f64 / attempted as f64
        },
        grid_dx: grids[0].axes.iter().map(|a| a.dx).collect(),
        grid_dt: grids[0].dt,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
