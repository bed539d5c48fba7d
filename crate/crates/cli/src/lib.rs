//! Configuration, orchestration and output for the `fbtwa` command.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod compare;
pub mod config;
pub mod output;
pub mod presets;
pub mod runner;
pub mod snapshot;
