//! Seed derivation and the generator used everywhere randomness is needed.
//!
//! Every random stream in the pipeline comes from a [`ChaCha8Rng`] whose
//! 64-bit seed is derived from a master seed and a small tuple of
//! identifiers through [`derive_seed`]. ChaCha output is value-stable across
//! platforms, so any record can be regenerated in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifier of the generator algorithm, written into dataset manifests.
pub const PRNG_ID: &str = "chacha8/rand_chacha-0.9";

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed` one word at a time. Order matters.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Stream tags keep independently derived seeds from colliding.
pub(crate) const TAG_SAMPLE: u64 = 0x5341_4d50;
pub(crate) const TAG_NOISE: u64 = 0x4e4f_4953;
pub(crate) const TAG_SPLIT: u64 = 0x5350_4c54;
pub(crate) const TAG_SHUFFLE: u64 = 0x5348_5546;
pub(crate) const TAG_EPOCH: u64 = 0x4550_4f43;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_order_sensitive() {
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
    }

    #[test]
    fn mix_matches_reference_splitmix() {
        // First output of the reference SplitMix64 generator seeded with 0.
        assert_eq!(mix64(0), 0xE220_A839_7B1D_CDAF);
    }
}
