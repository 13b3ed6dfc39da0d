//! Counter-based randomness.
//!
//! Every random draw is addressed by `(seed, domain, counter...)` rather than
//! by its order in a stream, so sampling at a given absolute position yields
//! the same value no matter how decoding was split into cycles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Separates independent uses of the same seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Task = 2,
    Anchors = 3,
    Shuffle = 4,
    TargetSample = 5,
    DraftSample = 6,
    Accept = 7,
    Residual = 8,
    Split = 9,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A fresh generator keyed by `(seed, domain, counters)`.
pub fn keyed_rng(seed: u64, domain: Domain, counters: &[u64]) -> ChaCha8Rng {
    let mut stream = splitmix(domain as u64);
    for &c in counters {
        stream = splitmix(stream ^ c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One uniform draw in `[0, 1)`.
pub fn keyed_uniform(seed: u64, domain: Domain, counters: &[u64]) -> f64 {
    keyed_rng(seed, domain, counters).gen::<f64>()
}

/// Inverse-CDF draw from an unnormalised non-negative weight vector.
pub fn sample_categorical(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}
