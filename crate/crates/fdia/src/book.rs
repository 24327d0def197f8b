//! The guide's chapters double as doc-tests: every fenced snippet in
//! `book/src` compiles and runs against this crate via the modules
//! below, so the narrative cannot drift from the API.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/grid-model.md")]
pub mod grid_model {}

#[doc = include_str!("../../../book/src/power-flow.md")]
pub mod power_flow {}

#[doc = include_str!("../../../book/src/state-estimation.md")]
pub mod state_estimation {}

#[doc = include_str!("../../../book/src/neural-estimator.md")]
pub mod neural_estimator {}

#[doc = include_str!("../../../book/src/attacks.md")]
pub mod attacks {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
