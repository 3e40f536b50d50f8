//! Error type shared across the toolkit.

use thiserror::Error;

use crate::types::{EventId, Loc};

/// Errors raised by construction, simulation and the solvers.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("transition not defined for location {loc:?} and event {event:?}")]
    TransitionUndefined { loc: Loc, event: EventId },

    #[error("no autonomous transition from {from:?} to {to:?} (no switching manifold)")]
    NoManifold { from: Loc, to: Loc },

    #[error("state blow-up at t = {time}: non-finite state encountered")]
    Blowup { time: f64 },

    #[error("manifold termination instant at t = {time}: |grad m . f| = {rate:.3e} below transversality floor")]
    ManifoldTermination { time: f64, rate: f64 },

    #[error("switch budget exhausted: more than {max_switches} switches before t = {time}")]
    SwitchBudgetExhausted { max_switches: usize, time: f64 },

    #[error("ambiguous switch near t = {time}: controlled and autonomous switch inside one integration step")]
    AmbiguousSwitch { time: f64 },

    #[error("control out of bounds at t = {time}: component {component} = {value} outside [{lo}, {hi}]")]
    ControlOutOfBounds {
        time: f64,
        component: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("schedule invalid: {0}")]
    InvalidSchedule(String),

    #[error("sequence invalid: {0}")]
    InvalidSequence(String),

    #[error("solver did not converge: best residual {residual:.3e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("singular Jacobian in the shooting iteration; try a different initial guess")]
    SingularJacobian,

    #[error("point outside grid interior: {0}")]
    GridDomain(String),

    #[error("transversality guard: |grad m . f| = {rate:.3e} below floor {floor:.3e} at t = {time}")]
    TransversalityFloor { time: f64, rate: f64, floor: f64 },

    #[error("matrix not symmetric positive (semi)definite: {0}")]
    NotPositive(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
