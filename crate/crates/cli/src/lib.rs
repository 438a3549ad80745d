//! Command-line front end: configuration, training runs, evaluation, sweeps and diagnostics.

pub mod config;
pub mod runs;
pub mod stats;

pub use config::{Mode, RunConfig, SweepSpec};
