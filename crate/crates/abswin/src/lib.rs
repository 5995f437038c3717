//! File formats, experiment commands, and the attention latency harness
//! around `abswin-core`.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use config::{ExperimentConfig, Task};
pub use error::{CliError, CliResult};
