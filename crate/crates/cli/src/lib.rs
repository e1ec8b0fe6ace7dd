//! Configuration, seed derivation and stage orchestration for the
//! `topoprep` command.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod seeds;

pub use config::{ExperimentConfig, Mode};
pub use error::{CliError, CliResult};
pub use pipeline::{run_experiment, run_pipeline};
pub use seeds::derive_seeds;
