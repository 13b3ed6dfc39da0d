//! Oracles shared between integration test targets. Each target uses a
//! different subset.
#![allow(dead_code, clippy::single_range_in_vec_init)]

pub mod gradients;
