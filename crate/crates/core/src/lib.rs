//! Identity-free personalization: per-user embedding distributions trained on
//! device, anonymous uploads, cloud fine-tuning, and the attacker-side
//! analysis of how well uploads can be traced back to users.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod cloud;
pub mod dist;
pub mod error;
pub mod model;
pub mod scalar;
pub mod special;
pub mod synth;
pub mod trainer;
pub mod wire;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision aliases, the default scalar.
pub type Dist = dist::EmbeddingDist<f64>;
pub type Model = model::Mlp<f64>;
pub type Record = cloud::AnonymousRecord<f64>;
pub type Dataset = cloud::CloudDataset<f64>;
pub type Task = synth::SyntheticTask<f64>;
pub type Trainer = trainer::TrainerConfig<f64>;

/// Single-precision aliases.
pub type DistF32 = dist::EmbeddingDist<f32>;
pub type ModelF32 = model::Mlp<f32>;
pub type TrainerF32 = trainer::TrainerConfig<f32>;
