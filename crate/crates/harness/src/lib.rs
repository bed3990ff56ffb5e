//! Config-driven experiment harness: stage runner, run directories,
//! experiment sweeps and report rendering on top of `utilgen-core`.

pub mod config;
pub mod error;
pub mod experiments;
pub mod report;
pub mod run;
pub mod stages;

pub use config::{ExperimentConfig, Regime, TaskKind};
pub use error::{Error, Result};
pub use experiments::{reusability_experiment, run_pipeline, scaling_experiment};
pub use report::emit_report;
pub use run::{RunDir, Table};
