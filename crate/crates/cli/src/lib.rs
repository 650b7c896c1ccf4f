//! Experiment orchestration for the `lads` command-line tool.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod commands;
pub mod experiment;
