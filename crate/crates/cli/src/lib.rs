//! Library side of the `noticekv` command: workload specs, the stress
//! runner and the single-threaded subcommands.

pub mod commands;
pub mod stress;
pub mod workload;

pub use stress::{run_stress, RunStats, StressError};
pub use workload::{Mix, SpecError, WorkloadSpec};
