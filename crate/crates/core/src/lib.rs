//! Simulation and analysis toolkit for auditor-gated, rollback-resistant
//! stateful secure aggregation with correlated DP-FTRL noise.

pub mod encoding;
pub mod primitives;
pub mod dpftrl;
pub mod evidence;
pub mod enclave;
pub mod actors;
pub mod sim;
pub mod analysis;
