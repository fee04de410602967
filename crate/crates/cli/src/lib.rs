//! Command-line orchestration of the skeleton emotion pipeline: experiment
//! configs, run directories and the stages behind each verb.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod run;

pub use commands::{execute, Cli};
pub use config::ExperimentConfig;
