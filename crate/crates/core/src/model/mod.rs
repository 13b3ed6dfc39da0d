//! Target and drafter transformers.

pub mod draft;
pub mod fusion;
pub mod layers;
pub mod target;

pub use draft::{DraftBlock, DraftConfig, DraftKVCache, DraftMode, DraftModel};
pub use fusion::{FusedContext, Fusion};
pub use target::{
    select_tap_layers, train_target, TapSet, TargetConfig, TargetKVCache, TargetModel,
    TargetTrainConfig,
};
