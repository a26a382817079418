//! Command-line experiments: configuration, reproduction presets, CSV/SVG output and
//! the `verify` property suite.

pub mod commands;
pub mod config;
pub mod output;
pub mod presets;
pub mod verify;

pub use commands::{run, Command};
pub use config::{Experiment, ExperimentConfig};
pub use verify::{run_verify, FlippedClassifierGradient, Functionals, Reference, VerifyReport};
