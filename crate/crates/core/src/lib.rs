//! Data-heterogeneity bounds for federated averaging and a Stackelberg
//! incentive mechanism built on them.
//!
//! The crate is `no_std` with `alloc`. File formats, the CLI and experiment
//! drivers live in the `fedgame` crate.

#![no_std]
// NaN must fail range checks, so `!(x > 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bounds;
pub mod config;
pub mod data;
pub mod dist;
pub mod error;
pub mod mechanism;
pub mod model;
pub mod rng;
pub mod roots;
pub mod train;

pub use config::{learning_rate, validate_config, HyperParams, Schedule, Severity, Violation};
pub use data::{sample_dataset, GaussianTask, LabeledDataset};
pub use dist::{
    delta_to_effort, effort_to_delta, make_label_distribution, wasserstein_delta, EffortMap,
    LabelDistribution, PartitionMode, PartitionSpec,
};
pub use error::{Error, Result};
pub use model::{Architecture, ModelParams, ModelShape};
pub use rng::RngStream;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
