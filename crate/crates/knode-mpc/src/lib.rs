//! Hybrid quadrotor dynamics learning and model predictive control, in simulation.
//!
//! The crate builds a small pipeline around a 12-state quadrotor:
//!
//! * [`dynamics`] — first-principles rigid-body model, a synthetic "true" plant with
//!   aerodynamic drag, and fixed-step RK4 / adaptive RK45 integrators;
//! * [`models`] — a hand-rolled MLP residual (hybrid model) and a Gaussian-process
//!   baseline, both correcting the nominal derivative;
//! * [`training`] — one-step-ahead prediction loss with exact reverse-mode gradients
//!   through the RK4 stages, optimized with Adam;
//! * [`control`] — single-shooting Gauss-Newton SQP tracking MPC with a Riccati
//!   backward pass, plus closed-loop simulation against an arbitrary plant;
//! * [`eval`] — reference generation, dynamic time warping, and the prediction /
//!   tracking experiment harnesses;
//! * [`config`], [`io`], [`cli`] — TOML run configuration, CSV/JSON artifacts, and the
//!   command-line pipeline (`generate`, `train`, `evaluate`, `run-all`).

pub mod cli;
pub mod config;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod io;
pub mod models;
pub mod training;

pub use error::{Error, Result};
