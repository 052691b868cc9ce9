//! Command-line front end for semantic image translation.

pub mod config;
pub mod run;

pub use config::{Backend, RunConfig, Settings};
pub use run::{eval, replay, translate, EvalOptions, Outcome, RunManifest, Status};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}
