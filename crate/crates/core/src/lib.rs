//! Feedback cooling of Bose gases: two-mode and one-dimensional field solvers.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod cf_twa;
pub mod error;
pub mod field;
pub mod kraus;
pub mod npw;
pub mod rng;
pub mod schedule;
pub mod spin;
pub mod stats;

pub use error::{Error, Result};
