//! The `dynlab` pipeline: configure and train a toy model, analyze how each
//! layer's residual-stream writes converge, and compare runs.
//!
//! Each command is a plain function returning [`CliError`] on failure so the
//! binary can map it onto the exit-code contract (1 runtime, 2 usage).

pub mod analyze;
pub mod compare;
pub mod config;
pub mod corpus;
pub mod error;
pub mod report;
pub mod train;

pub use analyze::cmd_analyze;
pub use compare::{cmd_compare, CompareReport};
pub use config::RunConfig;
pub use error::CliError;
pub use train::{cmd_train, TrainOptions};
