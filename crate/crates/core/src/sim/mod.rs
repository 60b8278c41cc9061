//! Deterministic simulation of a deployment, plus the checkers and the
//! trusted-party reference used to judge its runs.

pub mod config;
pub mod ideal;
pub mod integrity;
pub mod linearizability;
pub mod log;
pub mod scheduler;
pub mod suite;
pub mod world;

pub use config::{CrashSpec, SimError, StrategyChoice, WorldConfig};
pub use integrity::{check_integrity, IntegrityVerdict};
pub use linearizability::{check_linearizable, LinearizabilityVerdict};
pub use log::{Event, EventLog, LogError, ProcessId, Record};
pub use world::{run, GroundTruth, MessageSizes, RoundRecord, RunResult, World};
