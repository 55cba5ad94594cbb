//! Typicality-sampling minibatch SGD.
//!
//! The crate covers the full pipeline: synthetic data generation, an exact
//! t-SNE embedding, Gaussian KDE on the embedding to split the training set
//! into a high-density stratum `H` and the remainder `L`, stratified batch
//! selection, SGD/Adam training loops, and an analysis layer that evaluates
//! closed-form expected gradient errors against exhaustive batch enumeration
//! and Monte-Carlo estimates.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod data;
pub mod density;
pub mod embedding;
mod error;
pub mod models;
pub mod optimize;
pub mod rng;
pub mod sampling;

pub use analysis::{ErrorReport, Scheme};
pub use data::Dataset;
pub use density::{BandwidthRule, DensityMap, GradientReading, Partition};
pub use embedding::{Embedding, TsneConfig};
pub use error::{Error, Result};
pub use models::{GradientFamily, Model, ModelKind, ModelSpec};
pub use optimize::{Optimizer, TrainConfig, TrainTrace};
pub use sampling::{Batch, BatchPlan, Sampler, Stratum};

/// Version string embedded in output file headers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
