//! Indistinguishability games for anonymous communication: notions built
//! from property atoms, a challenger, leaky ideal protocols, attack scripts,
//! the implication hierarchy and an experiment harness.

pub mod adversaries;
pub mod challenger;
pub mod harness;
pub mod hierarchy;
pub mod model;
pub mod notions;
pub mod props;
pub mod protocols;
mod suites;
