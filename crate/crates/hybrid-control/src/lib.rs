//! A toolkit for hybrid optimal control: simulation of systems with
//! autonomous and controlled switchings and state jumps, a minimum-principle
//! shooting solver, dynamic-programming value grids, a Riccati formalism for
//! linear-quadratic hybrid tracking, and cross-method verification that the
//! shooting adjoint equals the value-function gradient along optimal
//! trajectories.
//!
//! Start from the [`presets`] module for ready-made problems, or build a
//! [`system::HybridSystem`] and [`cost::CostSpec`] directly. The runnable
//! examples in `examples/` walk through every major capability.

pub mod config;
pub mod cost;
pub mod equivalence;
pub mod error;
pub mod export;
pub mod hdp;
pub mod hmp;
pub mod oracle;
pub mod presets;
pub mod riccati;
pub mod sensitivity;
pub mod shooting;
pub mod simulator;
pub mod system;
pub mod trajectory;
pub mod types;

pub mod cli;

pub use error::{Error, Result};
pub use types::{Control, EventId, Loc, State, SwitchKind};
