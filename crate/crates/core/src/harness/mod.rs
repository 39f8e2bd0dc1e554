//! Experiment orchestration behind the command-line tool.

pub mod commands;
pub mod config;
pub mod train;

pub use commands::{bound_cmd, evaluate, simulate_cmd, stats_cmd};
pub use config::{Method, RunConfig};
pub use train::{train, RunRecord};
