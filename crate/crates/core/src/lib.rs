//! Federated soft-prompt tuning over a frozen toy transformer.
//!
//! Only an `m x d` prompt is trained and exchanged; the backbone is built
//! once from a seed and never changes. Numeric code is generic over
//! [`Scalar`] (`f32` or `f64`); the aliases below fix it to `f64`, with
//! `*F32` variants for single precision.

pub mod data;
pub mod error;
pub mod fed;
pub mod metrics;
pub mod model;
pub mod privacy;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Prompt = model::PromptTensor<f64>;
pub type PromptF32 = model::PromptTensor<f32>;
pub type Backbone = model::FrozenBackbone<f64>;
pub type BackboneF32 = model::FrozenBackbone<f32>;
pub type Update = fed::ClientUpdateMsg<f64>;
pub type UpdateF32 = fed::ClientUpdateMsg<f32>;
pub type Experiment = fed::Experiment<f64>;
pub type ExperimentF32 = fed::Experiment<f32>;
