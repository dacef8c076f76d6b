//! Library behind the `metatuner` binary: configuration, run directories,
//! checkpoint loading and the command implementations.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod rundir;
pub mod workflow;

pub use config::{LoraSection, RunConfig, TrainSplit};
pub use rundir::{RunDir, RUNNING_MARKER};
