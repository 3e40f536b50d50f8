//! Problem definitions from structured JSON: affine or polynomial vector
//! fields, affine manifolds and jumps, quadratic costs, or a named built-in.
//! The exact schema is documented in the repository README; all floats are
//! IEEE-754 doubles.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::hdp::GridSpec;
use crate::hmp::MinimizerFn;
use crate::presets::{self, Preset};
use crate::system::{HybridSystem, LocationSequence, SequenceStep};
use crate::types::{Control, Loc, State, SwitchKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    /// Named built-in ("example1", "example2", "lq"); overrides everything
    /// else except the horizon and initial state.
    #[serde(default)]
    pub builtin: Option<String>,
    #[serde(default)]
    pub horizon: Option<[f64; 2]>,
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
    #[serde(default)]
    pub initial_location: Option<usize>,
    #[serde(default)]
    pub locations: Vec<LocationConfig>,
    #[serde(default)]
    pub events: Vec<EventConfig>,
    #[serde(default)]
    pub sequence: Option<SequenceConfig>,
    #[serde(default)]
    pub cost: Option<CostConfig>,
    #[serde(default)]
    pub guess_times: Option<Vec<f64>>,
    #[serde(default)]
    pub guess_p: Option<Vec<f64>>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocationConfig {
    pub state_dim: usize,
    pub field: FieldConfig,
    pub control_lower: Vec<f64>,
    pub control_upper: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldConfig {
    /// `x' = a x + b u + c`.
    Affine {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        #[serde(default)]
        c: Option<Vec<f64>>,
    },
    /// One monomial sum per state component.
    Polynomial { components: Vec<Vec<Monomial>> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coef: f64,
    #[serde(default)]
    pub x_powers: Vec<u32>,
    #[serde(default)]
    pub u_powers: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventConfig {
    pub name: String,
    pub from: usize,
    pub to: usize,
    /// Affine jump `x(+) = p x(-) + offset`; identity when omitted.
    #[serde(default)]
    pub jump: Option<AffineJumpConfig>,
    /// Affine manifold `normal . x + offset = 0`; the transition is
    /// autonomous exactly when present.
    #[serde(default)]
    pub manifold: Option<ManifoldConfig>,
    /// Quadratic switching cost `0.5 (x - d)^T c (x - d)`.
    #[serde(default)]
    pub switching_cost: Option<QuadraticConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineJumpConfig {
    pub p: Vec<Vec<f64>>,
    #[serde(default)]
    pub offset: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldConfig {
    pub normal: Vec<f64>,
    #[serde(default)]
    pub offset: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticConfig {
    pub weight: Vec<Vec<f64>>,
    #[serde(default)]
    pub reference: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    /// Per location: `0.5 (x - r)^T l (x - r) + 0.5 u^T r_weight u`.
    pub running: Vec<RunningCostConfig>,
    pub terminal: QuadraticConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunningCostConfig {
    pub l: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    #[serde(default)]
    pub reference: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    pub initial: usize,
    #[serde(default)]
    pub steps: Vec<SequenceStepConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceStepConfig {
    pub event: String,
    pub kind: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub dx: Vec<f64>,
    pub dt: f64,
}

fn mat(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Config(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{what}: ragged matrix")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn eval_monomials(terms: &[Monomial], x: &State, u: &Control) -> f64 {
    let mut acc = 0.0;
    for t in terms {
        let mut v = t.coef;
        for (j, &p) in t.x_powers.iter().enumerate() {
            if p > 0 {
                v *= x[j].powi(p as i32);
            }
        }
        for (j, &p) in t.u_powers.iter().enumerate() {
            if p > 0 {
                v *= u[j].powi(p as i32);
            }
        }
        acc += v;
    }
    acc
}

/// Load a problem from a JSON file.
pub fn load(path: &Path) -> Result<Preset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ProblemConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("malformed config {}: {e}", path.display())))?;
    build(&cfg)
}

/// Build a problem bundle from a parsed configuration.
pub fn build(cfg: &ProblemConfig) -> Result<Preset> {
    if let Some(name) = &cfg.builtin {
        let mut preset = presets::by_name(name)
            .ok_or_else(|| Error::Config(format!("unknown builtin `{name}`")))?;
        if let Some([t0, tf]) = cfg.horizon {
            preset.t0 = t0;
            preset.tf = tf;
        }
        if let Some(x0) = &cfg.initial_state {
            preset.x0 = DVector::from_vec(x0.clone());
        }
        return Ok(preset);
    }

    if cfg.locations.is_empty() {
        return Err(Error::Config("config needs locations or a builtin".into()));
    }
    let cost_cfg = cfg
        .cost
        .as_ref()
        .ok_or_else(|| Error::Config("config needs a cost section".into()))?;
    if cost_cfg.running.len() != cfg.locations.len() {
        return Err(Error::Config(
            "one running cost per location is required".into(),
        ));
    }

    // Locations.
    let mut builder = HybridSystem::builder();
    let mut affine_controls = Vec::new();
    for (q, loc) in cfg.locations.iter().enumerate() {
        let n = loc.state_dim;
        match &loc.field {
            FieldConfig::Affine { a, b, c } => {
                let a = mat(a, &format!("location {q} field a"))?;
                let b = mat(b, &format!("location {q} field b"))?;
                let c = match c {
                    Some(c) => DVector::from_vec(c.clone()),
                    None => DVector::zeros(n),
                };
                if a.nrows() != n || a.ncols() != n || b.nrows() != n || c.len() != n {
                    return Err(Error::Config(format!("location {q}: field dimensions")));
                }
                let (af, bf, cf) = (a.clone(), b.clone(), c.clone());
                let jac_a = a.clone();
                builder = builder
                    .location(
                        Arc::new(move |x: &State, u: &Control| &af * x + &bf * u + &cf),
                        loc.control_lower.clone(),
                        loc.control_upper.clone(),
                        n,
                    )
                    .field_jacobian(Arc::new(move |_x: &State, _u: &Control| jac_a.clone()));
                affine_controls.push(Some(b));
            }
            FieldConfig::Polynomial { components } => {
                if components.len() != n {
                    return Err(Error::Config(format!(
                        "location {q}: {} polynomial components for dimension {n}",
                        components.len()
                    )));
                }
                let comps = components.clone();
                builder = builder.location(
                    Arc::new(move |x: &State, u: &Control| {
                        DVector::from_iterator(
                            comps.len(),
                            comps.iter().map(|terms| eval_monomials(terms, x, u)),
                        )
                    }),
                    loc.control_lower.clone(),
                    loc.control_upper.clone(),
                    n,
                );
                affine_controls.push(None);
            }
        }
    }

    // Events: jumps, transitions, manifolds.
    for ev in &cfg.events {
        builder = builder.event(&ev.name);
        let from_dim = cfg
            .locations
            .get(ev.from)
            .ok_or_else(|| Error::Config(format!("event `{}`: bad source", ev.name)))?
            .state_dim;
        let to_dim = cfg
            .locations
            .get(ev.to)
            .ok_or_else(|| Error::Config(format!("event `{}`: bad target", ev.name)))?
            .state_dim;
        let (p, offset) = match &ev.jump {
            Some(j) => {
                let p = mat(&j.p, &format!("event `{}` jump", ev.name))?;
                if p.nrows() != to_dim || p.ncols() != from_dim {
                    return Err(Error::Config(format!("event `{}`: jump dimensions", ev.name)));
                }
                let offset = match &j.offset {
                    Some(o) => DVector::from_vec(o.clone()),
                    None => DVector::zeros(to_dim),
                };
                (p, offset)
            }
            None => {
                if from_dim != to_dim {
                    return Err(Error::Config(format!(
                        "event `{}`: identity jump needs equal dimensions",
                        ev.name
                    )));
                }
                (DMatrix::identity(to_dim, from_dim), DVector::zeros(to_dim))
            }
        };
        let (pj, oj, pg) = (p.clone(), offset.clone(), p.clone());
        builder = builder.jump_map(
            &ev.name,
            Arc::new(move |x: &State| &pj * x + &oj),
            Arc::new(move |_x: &State| pg.clone()),
        );
        match &ev.manifold {
            Some(m) => {
                if m.normal.len() != from_dim {
                    return Err(Error::Config(format!(
                        "event `{}`: manifold dimension",
                        ev.name
                    )));
                }
                let normal = DVector::from_vec(m.normal.clone());
                let offset = m.offset;
                let ng = normal.clone();
                builder = builder.autonomous_transition(
                    ev.from,
                    ev.to,
                    &ev.name,
                    Arc::new(move |x: &State| normal.dot(x) + offset),
                    Arc::new(move |_x: &State| ng.clone()),
                );
            }
            None => {
                builder = builder.controlled_transition(ev.from, &ev.name, ev.to);
            }
        }
    }
    let sys = builder.build()?;

    // Quadratic costs with exact gradients.
    let mut cb = CostSpec::builder();
    for (q, rc) in cost_cfg.running.iter().enumerate() {
        let n = cfg.locations[q].state_dim;
        let l = mat(&rc.l, &format!("running cost {q} l"))?;
        let r = mat(&rc.r, &format!("running cost {q} r"))?;
        let reference = match &rc.reference {
            Some(v) => DVector::from_vec(v.clone()),
            None => DVector::zeros(n),
        };
        let (l1, r1, ref1) = (l.clone(), r.clone(), reference.clone());
        let (l2, ref2) = (l, reference);
        cb = cb.running_with_grad(
            move |x: &State, u: &Control| {
                let dx = x - &ref1;
                0.5 * dx.dot(&(&l1 * &dx)) + 0.5 * u.dot(&(&r1 * u))
            },
            move |x: &State, _u: &Control| &l2 * (x - &ref2),
        );
    }
    for ev in &cfg.events {
        let Some(sc) = &ev.switching_cost else {
            continue;
        };
        let event = sys
            .event_by_name(&ev.name)
            .ok_or_else(|| Error::Config(format!("unknown event `{}`", ev.name)))?;
        let c = mat(&sc.weight, &format!("switching cost of `{}`", ev.name))?;
        let d = match &sc.reference {
            Some(v) => DVector::from_vec(v.clone()),
            None => DVector::zeros(c.nrows()),
        };
        let (c1, d1) = (c.clone(), d.clone());
        let (c2, d2) = (c, d);
        cb = cb.switching(
            event,
            move |x: &State| {
                let dx = x - &d1;
                0.5 * dx.dot(&(&c1 * &dx))
            },
            move |x: &State| &c2 * (x - &d2),
        );
    }
    let g = mat(&cost_cfg.terminal.weight, "terminal weight")?;
    let d = match &cost_cfg.terminal.reference {
        Some(v) => DVector::from_vec(v.clone()),
        None => DVector::zeros(g.nrows()),
    };
    let terminal_dim = g.nrows();
    let (g1, d1) = (g.clone(), d.clone());
    let (g2, d2) = (g, d);
    let cost = cb
        .terminal_with_grad(
            terminal_dim,
            move |x: &State| {
                let dx = x - &d1;
                0.5 * dx.dot(&(&g1 * &dx))
            },
            move |x: &State| &g2 * (x - &d2),
        )
        .build()?;

    // Sequence.
    let seq_cfg = cfg
        .sequence
        .as_ref()
        .ok_or_else(|| Error::Config("config needs a sequence section".into()))?;
    let mut steps = Vec::new();
    for s in &seq_cfg.steps {
        let event = sys
            .event_by_name(&s.event)
            .ok_or_else(|| Error::Config(format!("unknown event `{}`", s.event)))?;
        let kind = match s.kind.as_str() {
            "controlled" => SwitchKind::Controlled,
            "autonomous" => SwitchKind::Autonomous,
            other => {
                return Err(Error::Config(format!(
                    "switch kind must be controlled|autonomous, got `{other}`"
                )))
            }
        };
        steps.push(SequenceStep { event, kind });
    }
    let seq = LocationSequence::new(&sys, Loc(seq_cfg.initial), steps)?;

    // Closed-form minimizers for affine-in-control fields with quadratic
    // control cost: u = -R^{-1} B^T lambda, projected onto the box.
    let mut minimizers: Vec<Option<MinimizerFn>> = Vec::new();
    for (q, b) in affine_controls.iter().enumerate() {
        match b {
            Some(b) => {
                let r = mat(&cost_cfg.running[q].r, "r")?;
                let b = b.clone();
                let chol = nalgebra::Cholesky::new(r)
                    .ok_or_else(|| Error::Config(format!("running cost {q}: r not positive")))?;
                minimizers.push(Some(Arc::new(move |_x: &State, lam: &DVector<f64>| {
                    -chol.solve(&(b.transpose() * lam))
                })));
            }
            None => minimizers.push(None),
        }
    }

    let [t0, tf] = cfg
        .horizon
        .ok_or_else(|| Error::Config("config needs a horizon".into()))?;
    let x0 = DVector::from_vec(
        cfg.initial_state
            .clone()
            .ok_or_else(|| Error::Config("config needs an initial state".into()))?,
    );
    let q0 = Loc(cfg.initial_location.unwrap_or(seq_cfg.initial));

    let num_switches = seq.num_switches();
    let guess_times = cfg.guess_times.clone().unwrap_or_else(|| {
        (1..=num_switches)
            .map(|j| t0 + (tf - t0) * j as f64 / (num_switches + 1) as f64)
            .collect()
    });
    let num_autonomous = seq
        .steps
        .iter()
        .filter(|s| s.kind == SwitchKind::Autonomous)
        .count();
    let guess_p = cfg.guess_p.clone().unwrap_or_else(|| vec![0.0; num_autonomous]);

    let grids = match &cfg.grid {
        Some(g) => {
            let spec = GridSpec::new(g.lo.clone(), g.hi.clone(), g.dx.clone(), g.dt);
            vec![spec; num_switches + 1]
        }
        None => {
            let n = cfg.locations[seq_cfg.initial].state_dim;
            let half = 2.0 * (1.0 + x0.amax());
            let dx = if n == 1 { 1e-2 } else { 2.5e-2 };
            let dt = if n == 1 { 1e-3 } else { 2.5e-3 };
            vec![
                GridSpec::new(vec![-half; n], vec![half; n], vec![dx; n], dt);
                num_switches + 1
            ]
        }
    };

    Ok(Preset {
        name: "config",
        sys,
        cost,
        seq,
        q0,
        x0,
        t0,
        tf,
        minimizers,
        guess_times,
        guess_p,
        grids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_lq_json() -> &'static str {
        r#"{
            "horizon": [0.0, 1.0],
            "initial_state": [1.0],
            "locations": [
                {
                    "state_dim": 1,
                    "field": {"affine": {"a": [[0.0]], "b": [[1.0]]}},
                    "control_lower": [-10.0],
                    "control_upper": [10.0]
                }
            ],
            "sequence": {"initial": 0, "steps": []},
            "cost": {
                "running": [{"l": [[1.0]], "r": [[1.0]]}],
                "terminal": {"weight": [[0.0]]}
            }
        }"#
    }

    #[test]
    fn scalar_lq_config_builds_and_solves() {
        let cfg: ProblemConfig = serde_json::from_str(scalar_lq_json()).unwrap();
        let preset = build(&cfg).unwrap();
        assert_eq!(preset.seq.num_switches(), 0);
        let problem = preset.hmp_problem();
        let extremal = crate::hmp::solve(
            &problem,
            &[],
            &[],
            &crate::hmp::HmpSolveOptions::default(),
        )
        .unwrap();
        // Scalar regulator: u(0) = -K(0) x0 = -tanh(1).
        let u0 = extremal.trajectory.segments[0].controls[0][0];
        approx::assert_relative_eq!(u0, -(1.0f64.tanh()), epsilon = 1e-6);
    }

    #[test]
    fn malformed_config_is_rejected() {
        let err = serde_json::from_str::<ProblemConfig>(r#"{"unknown_field": 1}"#);
        assert!(err.is_err());
        let cfg: ProblemConfig = serde_json::from_str(r#"{"locations": []}"#).unwrap();
        assert!(build(&cfg).is_err());
    }

    #[test]
    fn polynomial_field_matches_hand_evaluation() {
        let terms = vec![
            Monomial {
                coef: 2.0,
                x_powers: vec![1, 0],
                u_powers: vec![1],
            },
            Monomial {
                coef: -1.0,
                x_powers: vec![0, 2],
                u_powers: vec![],
            },
        ];
        let x = DVector::from_vec(vec![3.0, 2.0]);
        let u = DVector::from_vec(vec![0.5]);
        // 2 * x1 * u - x2^2 = 3 - 4 = -1.
        assert_eq!(eval_monomials(&terms, &x, &u), -1.0);
    }
}
