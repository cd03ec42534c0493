//! Deterministic adversarial simulation harness.
//!
//! The pieces, in dependency order: [`faults`] describes what the
//! adversary may do, [`engine`] executes a node graph under one clock and
//! one seed, [`checkers`] judges the resulting trace, and [`scenario`]
//! ties them together behind a TOML configuration.

pub mod checkers;
pub mod engine;
pub mod faults;
pub mod scenario;

pub use checkers::{Outcome, Verdict};
pub use engine::{Engine, LatencyModel};
pub use faults::{ByzMode, FaultPlan};
pub use scenario::{
    minimize_failure, run_batch, run_batch_sequential, run_scenario, run_seeded, RunReport,
    ScenarioConfig, ScenarioError,
};
