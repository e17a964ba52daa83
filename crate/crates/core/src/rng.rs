//! Deterministic RNG streams keyed by `(seed, stream ids…)`.
//!
//! Every random draw in the toolkit comes from a stream derived this way, so
//! results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds stream identifiers into a seed.
pub fn derive_seed(seed: u64, streams: &[u64]) -> u64 {
    streams
        .iter()
        .fold(splitmix64(seed), |acc, &s| splitmix64(acc ^ splitmix64(s.wrapping_add(0x632b_e59b_d9b4_e019))))
}

pub fn stream(seed: u64, streams: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, streams))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        let d: u64 = stream(8, &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
