//! Command-line driver and file formats for `nfdrl-core`.
//!
//! Runs are configured with a flat JSON object whose keys are the training
//! hyperparameters plus `env`. Outputs are CSV tables with 17 significant
//! digits, JSON-lines property reports and JSON checkpoints, all written
//! atomically.

pub mod cli;
pub mod config;
pub mod formats;
