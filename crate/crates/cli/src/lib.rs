//! Experiment runner behind the `flowcem` binary: config files, the
//! pretrain / train-rl / ablation / sensitivity / decode-study / plotdata
//! commands and their CSV outputs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod decode;
pub mod error;
pub mod manifest;
pub mod plot;
pub mod stats;

pub use config::{ExperimentConfig, Mode};
pub use error::{CliError, Result};
