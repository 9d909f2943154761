//! Continual semantic segmentation at desk scale.
//!
//! A small fully convolutional network is trained over a sequence of steps,
//! each adding classes. The frozen previous model supervises distillation of
//! channel-decoupled features and relevance maps, and it also supplies
//! uncertainty-aware pseudo labels for old classes.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::field_reassign_with_default)]

pub mod autograd;
pub mod data;
pub mod decouple;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod net;
pub mod pseudo;
pub mod relevance;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
