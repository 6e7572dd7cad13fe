//! Parameter-efficient deep metric learning for multi-modal 3D detection.
//!
//! Heterogeneous sensor modalities are encoded by frozen backbones wrapped
//! with LoRA and bottleneck adapters, projected into a shared unit-norm
//! embedding space, fused with masked cross-attention and gating, and decoded
//! by a per-candidate detection head. Training combines focal classification,
//! IoU and orientation regression, cross-modal triplet alignment and temporal
//! consistency. Everything runs on a deterministic synthetic driving world.

// `!(x > 0.0)` is deliberate in validation: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod peft;
pub mod report;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
pub use tensor::{Graph, ParameterSet, Tensor, Var};
