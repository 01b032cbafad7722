//! Command-line harness around `cclqr-core`: JSON run configurations,
//! experiments and their CSV, summary and plot-script outputs.

pub mod config;
pub mod experiments;
pub mod report;

pub use config::{ConfigError, Experiment, RunConfig};
pub use experiments::{run, RunError, RunOutcome};
