//! Deterministic seed derivation.
//!
//! Every random draw in the crate flows from a user seed through
//! [`derive_seed`] so that independent components (init, shuffling, dropout,
//! per-trial synthesis, ...) get decorrelated but fully reproducible streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a tag path.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = mix(base);
    for &t in tags {
        s = mix(s ^ mix(t));
    }
    s
}

/// ChaCha stream for a derived seed.
pub fn derived_rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream-purpose tags. Distinct constants keep streams independent.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const VAL_SPLIT: u64 = 4;
    pub const TARGET_SUBSET: u64 = 5;
    pub const SYNTH_CLASS: u64 = 6;
    pub const SYNTH_TRIAL: u64 = 7;
    pub const SHIFT_MATRIX: u64 = 8;
    pub const SHIFT_NOISE: u64 = 9;
    pub const DOMAIN_CLF: u64 = 10;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_tag_sensitive() {
        assert_eq!(derive_seed(42, &[1, 2]), derive_seed(42, &[1, 2]));
        assert_ne!(derive_seed(42, &[1, 2]), derive_seed(42, &[2, 1]));
        assert_ne!(derive_seed(42, &[1]), derive_seed(43, &[1]));
    }
}
