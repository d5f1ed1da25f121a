//! Experiment harness: configuration, the end-to-end protocol, baselines,
//! sweeps, exports and the verification suite.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod experiments;
pub mod projection;
pub mod protocol;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
