//! Multiplication-reduced vision-transformer primitives: shift and add
//! reparameterized kernels, binarized linear attention, a latency-aware
//! Mult/Shift mixture of experts, a toy ViT training pipeline and an
//! analytical energy model.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod moe;
pub mod param;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use attention::{Attention, AttentionConfig, AttnMode};
pub use cost::{CostTable, Format, LayerDesc, Op, OpCount};
pub use data::{Dataset, SyntheticSpec};
pub use error::{Error, Result};
pub use layers::{Linear, LinearMode, Mlp, Module};
pub use model::{ModelConfig, Stage2Plan, TrainConfig, Vit};
pub use moe::{MoeConfig, MoeLayer, Router};
pub use param::{Param, Params};
pub use quant::{AddLinear, QuantConfig, ScaleMode, ShiftLinear};
pub use rng::Rng;
pub use tensor::Tensor;
