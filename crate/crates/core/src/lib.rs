//! Offline Q-learning for ventilator settings with conformal action
//! filtering.
//!
//! The crate covers the whole desk-scale pipeline: a synthetic ICU
//! ventilation simulator ([`sim`]), dataset preparation ([`mdp`]), a small
//! dense network engine ([`nn`]), offline learners ([`agents`]), split
//! conformal calibration and uncertainty-aware action selection
//! ([`conformal`]), fitted Q evaluation and reporting ([`eval`]), and the
//! file-driven command pipeline ([`pipeline`]).

pub mod agents;
pub mod config;
pub mod conformal;
pub mod error;
pub mod eval;
pub mod io_util;
pub mod mdp;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
