//! Experiment runner for decision-dependent stochastic approximation.
//!
//! A TOML config names a kernel family, an update map and a set of analyses;
//! [`run_experiment`] executes them and writes CSV/JSON/SVG outputs together
//! with a `manifest.json` that is sufficient to reproduce the run.

pub mod config;
pub mod error;
pub mod manifest;
pub mod output;
pub mod pipeline;
pub mod registry;
pub mod svg;

pub use config::{load_config, Analysis, ExperimentConfig, KernelSpec, MapSpec, ProblemSpec, Tuning};
pub use error::{ConfigError, FieldError, LabError};
pub use manifest::RunManifest;
pub use pipeline::{run_experiment, RunOptions, RunOutcome};
