//! Dense tensor math, reverse-mode autodiff and the optimizer.

pub mod gradcheck;
pub mod kernels;
pub mod mask;
pub mod optim;
pub mod tape;

pub use mask::{AttnMask, MaskBuilder};
pub use optim::{AdamW, AdamWConfig, CosineSchedule, StepStats};
pub use tape::{Gradients, Tape, Var};
