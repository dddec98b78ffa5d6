//! Library side of the command-line pipeline, so integration tests can
//! drive each stage directly.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use commands::{
    cmd_attack, cmd_evaluate, cmd_fit_detector, cmd_report, cmd_synth_data, cmd_train, Paths,
};
pub use config::RunConfig;
pub use error::CliError;
