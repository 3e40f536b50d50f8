//! Built-in problems: a scalar problem with one controlled switch and a
//! sign-flip jump, a planar problem with one autonomous switch on a velocity
//! manifold, and two linear-quadratic tracking instances.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::cost::CostSpec;
use crate::hdp::GridSpec;
use crate::hmp::MinimizerFn;
use crate::riccati::{LqCost, LqHybridSystem, LqLocation, LqStageCost, LqSwitch};
use crate::system::{HybridSystem, LocationSequence, SequenceStep};
use crate::types::{Control, Loc, State, SwitchKind};

/// A ready-to-solve hybrid optimal control problem.
#[derive(Clone)]
pub struct Preset {
    pub name: &'static str,
    pub sys: HybridSystem,
    pub cost: CostSpec,
    pub seq: LocationSequence,
    pub q0: Loc,
    pub x0: DVector<f64>,
    pub t0: f64,
    pub tf: f64,
    /// Closed-form Hamiltonian minimizers per location.
    pub minimizers: Vec<Option<MinimizerFn>>,
    /// Shooting guesses: one time per switch, one `p` per autonomous switch.
    pub guess_times: Vec<f64>,
    pub guess_p: Vec<f64>,
    /// Default value-grid stack (one spec per sequence stage).
    pub grids: Vec<GridSpec>,
}

impl Preset {
    /// Deterministic multistart grid: switch-time fractions of the horizon
    /// crossed with a few multiplier seeds.
    pub fn guess_grid(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        let num_switches = self.seq.num_switches();
        let num_autonomous = self.guess_p.len();
        if num_switches == 0 {
            return vec![(vec![], vec![])];
        }
        let mut grid = vec![(self.guess_times.clone(), self.guess_p.clone())];
        let p_seeds: Vec<Vec<f64>> = if num_autonomous == 0 {
            vec![vec![]]
        } else {
            [-0.5, 0.0, 0.5]
                .iter()
                .map(|&p| vec![p; num_autonomous])
                .collect()
        };
        for frac in [0.2, 0.35, 0.5, 0.65, 0.8] {
            let times: Vec<f64> = (1..=num_switches)
                .map(|j| {
                    self.t0 + (self.tf - self.t0) * frac * j as f64 / num_switches as f64
                })
                .collect();
            for p in &p_seeds {
                grid.push((times.clone(), p.clone()));
            }
        }
        grid
    }

    pub fn hmp_problem(&self) -> crate::hmp::HmpProblem {
        crate::hmp::HmpProblem {
            sys: self.sys.clone(),
            cost: self.cost.clone(),
            seq: self.seq.clone(),
            x0: self.x0.clone(),
            t0: self.t0,
            tf: self.tf,
            minimizers: self.minimizers.clone(),
        }
    }
}

/// Scalar problem with exponential growth/decay locations, one controlled
/// switch with the sign-flip jump `x -> -x`, a switching cost
/// `1 / (1 + x^2)`, running cost `u^2 / 2` and terminal cost `x^2 / 2`.
pub fn example1() -> Preset {
    let sys = HybridSystem::builder()
        .location(
            Arc::new(|x: &State, u: &Control| {
                DVector::from_vec(vec![x[0] * (1.0 + u[0])])
            }),
            vec![-4.0],
            vec![4.0],
            1,
        )
        .field_jacobian(Arc::new(|_x: &State, u: &Control| {
            DMatrix::from_element(1, 1, 1.0 + u[0])
        }))
        .location(
            Arc::new(|x: &State, u: &Control| {
                DVector::from_vec(vec![x[0] * (u[0] - 1.0)])
            }),
            vec![-4.0],
            vec![4.0],
            1,
        )
        .field_jacobian(Arc::new(|_x: &State, u: &Control| {
            DMatrix::from_element(1, 1, u[0] - 1.0)
        }))
        .event("flip")
        .jump_map(
            "flip",
            Arc::new(|x: &State| -x),
            Arc::new(|_x: &State| DMatrix::from_element(1, 1, -1.0)),
        )
        .controlled_transition(0, "flip", 1)
        .build()
        .unwrap();
    let flip = sys.event_by_name("flip").unwrap();

    let cost = CostSpec::builder()
        .running_with_grad(
            |_x: &State, u: &Control| 0.5 * u[0] * u[0],
            |_x: &State, _u: &Control| DVector::zeros(1),
        )
        .running_with_grad(
            |_x: &State, u: &Control| 0.5 * u[0] * u[0],
            |_x: &State, _u: &Control| DVector::zeros(1),
        )
        .switching(
            flip,
            |x: &State| 1.0 / (1.0 + x[0] * x[0]),
            |x: &State| {
                DVector::from_vec(vec![-2.0 * x[0] / (1.0 + x[0] * x[0]).powi(2)])
            },
        )
        .terminal_with_grad(
            1,
            |x: &State| 0.5 * x[0] * x[0],
            |x: &State| x.clone(),
        )
        .build()
        .unwrap();

    let seq = LocationSequence::new(
        &sys,
        Loc(0),
        vec![SequenceStep {
            event: flip,
            kind: SwitchKind::Controlled,
        }],
    )
    .unwrap();

    let minimizer: MinimizerFn = Arc::new(|x: &State, lam: &DVector<f64>| {
        DVector::from_vec(vec![-lam[0] * x[0]])
    });
    let grid = GridSpec::new(vec![-3.2], vec![3.2], vec![1e-2], 1e-3);

    Preset {
        name: "example1",
        sys,
        cost,
        seq,
        q0: Loc(0),
        x0: DVector::from_vec(vec![1.0]),
        t0: 0.0,
        tf: 1.0,
        minimizers: vec![Some(minimizer.clone()), Some(minimizer)],
        guess_times: vec![0.5],
        guess_p: vec![],
        grids: vec![grid.clone(), grid],
    }
}

/// Planar problem: an oscillator location switching autonomously on the
/// manifold `x2 = 0` into a double-integrator location, identity jump,
/// switching cost `x1^2 / 2` and terminal velocity tracking
/// `(x2 - v_ref)^2 / 2` with `v_ref = 1`.
pub fn example2() -> Preset {
    let sys = HybridSystem::builder()
        .location(
            Arc::new(|x: &State, u: &Control| {
                DVector::from_vec(vec![x[1], -x[0] + u[0]])
            }),
            vec![-6.0],
            vec![6.0],
            2,
        )
        .field_jacobian(Arc::new(|_x: &State, _u: &Control| {
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0])
        }))
        .location(
            Arc::new(|x: &State, u: &Control| DVector::from_vec(vec![x[1], u[0]])),
            vec![-6.0],
            vec![6.0],
            2,
        )
        .field_jacobian(Arc::new(|_x: &State, _u: &Control| {
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])
        }))
        .event("touch")
        .jump_map(
            "touch",
            Arc::new(|x: &State| x.clone()),
            Arc::new(|_x: &State| DMatrix::identity(2, 2)),
        )
        .autonomous_transition(
            0,
            1,
            "touch",
            Arc::new(|x: &State| x[1]),
            Arc::new(|_x: &State| DVector::from_vec(vec![0.0, 1.0])),
        )
        .build()
        .unwrap();
    let touch = sys.event_by_name("touch").unwrap();
    let v_ref = 1.0;

    let cost = CostSpec::builder()
        .running_with_grad(
            |_x: &State, u: &Control| 0.5 * u[0] * u[0],
            |_x: &State, _u: &Control| DVector::zeros(2),
        )
        .running_with_grad(
            |_x: &State, u: &Control| 0.5 * u[0] * u[0],
            |_x: &State, _u: &Control| DVector::zeros(2),
        )
        .switching(
            touch,
            |x: &State| 0.5 * x[0] * x[0],
            |x: &State| DVector::from_vec(vec![x[0], 0.0]),
        )
        .terminal_with_grad(
            2,
            move |x: &State| 0.5 * (x[1] - v_ref) * (x[1] - v_ref),
            move |x: &State| DVector::from_vec(vec![0.0, x[1] - v_ref]),
        )
        .build()
        .unwrap();

    let seq = LocationSequence::new(
        &sys,
        Loc(0),
        vec![SequenceStep {
            event: touch,
            kind: SwitchKind::Autonomous,
        }],
    )
    .unwrap();

    let minimizer: MinimizerFn = Arc::new(|_x: &State, lam: &DVector<f64>| {
        DVector::from_vec(vec![-lam[1]])
    });
    let grid = GridSpec {
        store_policy: false,
        ..GridSpec::new(
            vec![-1.0, -1.5],
            vec![3.0, 1.5],
            vec![2.5e-2, 2.5e-2],
            2.5e-3,
        )
    };

    Preset {
        name: "example2",
        sys,
        cost,
        seq,
        q0: Loc(0),
        x0: DVector::from_vec(vec![0.0, 1.0]),
        t0: 0.0,
        tf: 4.0,
        minimizers: vec![Some(minimizer.clone()), Some(minimizer)],
        guess_times: vec![std::f64::consts::FRAC_PI_2],
        guess_p: vec![0.0],
        grids: vec![grid.clone(), grid],
    }
}

/// Classical scalar regulator with no switches: `x' = u`,
/// `l = (x^2 + u^2) / 2`, zero terminal weight. Its Riccati gain is
/// `K(t) = tanh(tf - t)`.
pub fn lqr_scalar() -> Preset {
    let sys = HybridSystem::builder()
        .location(
            Arc::new(|_x: &State, u: &Control| u.clone()),
            vec![-10.0],
            vec![10.0],
            1,
        )
        .field_jacobian(Arc::new(|_x: &State, _u: &Control| DMatrix::zeros(1, 1)))
        .build()
        .unwrap();
    let cost = CostSpec::builder()
        .running_with_grad(
            |x: &State, u: &Control| 0.5 * (x[0] * x[0] + u[0] * u[0]),
            |x: &State, _u: &Control| x.clone(),
        )
        .terminal_with_grad(1, |_x: &State| 0.0, |_x: &State| DVector::zeros(1))
        .build()
        .unwrap();
    let seq = LocationSequence::new(&sys, Loc(0), vec![]).unwrap();
    let minimizer: MinimizerFn =
        Arc::new(|_x: &State, lam: &DVector<f64>| DVector::from_vec(vec![-lam[0]]));
    Preset {
        name: "lq",
        sys,
        cost,
        seq,
        q0: Loc(0),
        x0: DVector::from_vec(vec![1.0]),
        t0: 0.0,
        tf: 1.0,
        minimizers: vec![Some(minimizer)],
        guess_times: vec![],
        guess_p: vec![],
        grids: vec![GridSpec::new(vec![-2.0], vec![2.0], vec![1e-2], 1e-3)],
    }
}

/// Linear-quadratic data of [`lqr_scalar`]: `A = 0`, `B = L = R = 1`,
/// `G = 0`, no switches.
pub fn lq_tanh_instance() -> (LqHybridSystem, LqCost) {
    let sys = LqHybridSystem {
        locations: vec![LqLocation::constant(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
        )],
        switches: vec![],
    };
    let cost = LqCost {
        stages: vec![LqStageCost::constant(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
        )],
        switch_weights: vec![],
        terminal: (DMatrix::zeros(1, 1), DVector::zeros(1)),
    };
    (sys, cost)
}

/// The planar preset written as linear-quadratic tracking data: oscillator
/// and double-integrator rows, identity jump, `C = diag(1, 0)`, manifold row
/// `(0, 1)`, `G = diag(0, 1)` with terminal reference `(0, v_ref)`.
pub fn lq_example2_shaped() -> (LqHybridSystem, LqCost) {
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let sys = LqHybridSystem {
        locations: vec![
            LqLocation::constant(
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
                b.clone(),
                DVector::zeros(2),
            ),
            LqLocation::constant(
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
                b,
                DVector::zeros(2),
            ),
        ],
        switches: vec![LqSwitch {
            p_mat: DMatrix::identity(2, 2),
            offset: DVector::zeros(2),
            manifold: Some((RowDVector::from_vec(vec![0.0, 1.0]), 0.0)),
        }],
    };
    let stage = LqStageCost::constant(
        DMatrix::zeros(2, 2),
        DMatrix::from_element(1, 1, 1.0),
        DVector::zeros(2),
    );
    let cost = LqCost {
        stages: vec![stage.clone(), stage],
        switch_weights: vec![(
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])),
            DVector::zeros(2),
        )],
        terminal: (
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0])),
            DVector::from_vec(vec![0.0, 1.0]),
        ),
    };
    (sys, cost)
}

/// Look a preset up by name.
pub fn by_name(name: &str) -> Option<Preset> {
    match name {
        "example1" => Some(example1()),
        "example2" => Some(example2()),
        "lq" => Some(lqr_scalar()),
        _ => None,
    }
}
