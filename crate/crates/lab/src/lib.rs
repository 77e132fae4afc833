//! Experiment harness, file formats and command line for `sgvi-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod harness;
pub mod report;
pub mod run;

pub use error::{LabError, LabResult};
