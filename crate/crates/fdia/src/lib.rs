//! A testbed for stealthy false data injection against neural AC state
//! estimation in small power grids.
//!
//! The library covers the full experimental loop:
//!
//! - [`grid`]: case parsing, admittance matrix, the measurement function
//!   `h(x)` and its Jacobian;
//! - [`powerflow`]: Newton-Raphson AC power flow and synthetic
//!   state-measurement dataset generation under load scaling and noise;
//! - [`wls`]: weighted-least-squares estimation and chi-square bad-data
//!   detection;
//! - [`ann`]: a multilayer-perceptron state estimator trained with a
//!   measurement-residual loss, with exact input gradients;
//! - [`attack`]: the constrained attack formulation plus two solvers, a
//!   differential-evolution search and an SQP descent;
//! - [`harness`]: scenario grids, metrics and report files.
//!
//! See the guide in `book/` for a narrative walk-through; every snippet
//! there compiles against this crate.

pub mod ann;
pub mod attack;
pub mod cases;
pub mod error;
pub mod grid;
pub mod harness;
pub mod powerflow;
pub mod rng;
pub mod wls;

pub mod book;

pub use error::{Error, Result};
