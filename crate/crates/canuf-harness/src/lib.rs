//! Experiment harness around the constraint-aware regression library:
//! config handling, dataset plumbing, synthetic task generators, training,
//! evaluation, and the CLI command implementations.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod seeds;
pub mod stats;
pub mod synthetic;
pub mod train;
