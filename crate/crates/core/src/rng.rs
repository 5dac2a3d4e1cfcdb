//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run
//! seed and a short domain path, so adding a consumer never perturbs the
//! draws seen by another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream for `seed` under the given domain path.
pub fn stream(seed: u64, domain: &[u64]) -> StreamRng {
    let mixed = domain
        .iter()
        .fold(splitmix64(seed), |acc, &d| splitmix64(acc ^ splitmix64(d)));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Domain tags used by the pipeline.
pub mod domain {
    pub const SPLIT: u64 = 1;
    pub const TARGET_INIT: u64 = 2;
    pub const TARGET_TRAIN: u64 = 3;
    pub const ATTACKER_INIT: u64 = 4;
    pub const ATTACKER_TRAIN: u64 = 5;
    pub const CANDIDATE: u64 = 6;
    pub const DATASET: u64 = 7;
    pub const REFERENCE: u64 = 8;
    pub const FINAL_EVAL: u64 = 9;
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
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
