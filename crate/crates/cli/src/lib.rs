//! Experiment pipeline behind the `forgetedit` command: configuration,
//! method registry, resumable stages and report assembly.

pub mod config;
pub mod pipeline;
pub mod registry;
pub mod report;
pub mod stage;

pub use config::ExperimentConfig;
pub use pipeline::{run_pipeline, Goal, RunManifest, RunOptions};
pub use registry::{parse_selection, Editor, Method};
pub use report::emit_report;
