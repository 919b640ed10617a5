//! Spec-conditioned autoregressive sizing of analog circuit templates.

pub mod autograd;
pub mod datagen;
pub mod error;
pub mod evaluate;
pub mod grammar;
pub mod model;
pub mod optim;
pub mod rank;
pub mod rl;
pub mod scalar;
pub mod search;
pub mod simulate;
pub mod tensor;
pub mod tokenizer;
pub mod topology;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ModelF32 = model::Model<f32>;
pub type ModelF64 = model::Model<f64>;
pub type RewardModelF32 = rank::RewardModel<f32>;
pub type RewardModelF64 = rank::RewardModel<f64>;
