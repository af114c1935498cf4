//! Class-incremental learning from a sequence of tasks. Each task trains an
//! out-of-distribution aware classifier on top of a shared trunk; hard
//! attention masks keep earlier tasks' trunk units frozen, and task identity
//! at test time is inferred from the per-task scores.

pub mod augment;
pub mod autodiff;
pub mod calibration;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod masknet;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
