//! Block-diffusion speculative decoding at desk scale.
//!
//! A small autoregressive target transformer is accelerated by a block
//! drafter that fills a whole block of masked slots in one forward pass,
//! conditioned on fused target hidden features injected into every drafter
//! layer's keys and values. Verification keeps the output distribution of the
//! target exactly.

// Mask rows are span lists, often of one span; `!(x > 0.0)` rejects NaN too.
#![allow(clippy::single_range_in_vec_init, clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod manifest;
pub mod model;
pub mod numkernel;
pub mod rng;
pub mod scalar;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Param, ParamVisitor, Tensor};

pub type Target = model::TargetModel<f32>;
pub type Drafter = model::DraftModel<f32>;
pub type TargetCache = model::TargetKVCache<f32>;
pub type DraftCache = model::DraftKVCache<f32>;
