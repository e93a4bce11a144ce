//! Deterministic random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream whose
//! 64-bit seed is derived from `(seed, purpose tag, index)` with a SplitMix64
//! finaliser. Streams for different purposes or batch items never overlap in
//! practice, and results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for the sub-stream `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let h = splitmix64(seed ^ splitmix64(tag_hash(tag)));
    splitmix64(h ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn stream(seed: u64, tag: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tag, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| stream(7, "lm", 3).random()).collect();
        let b: Vec<u64> = (0..4).map(|_| stream(7, "lm", 3).random()).collect();
        assert_eq!(a, b);
        assert_ne!(derive_seed(7, "lm", 3), derive_seed(7, "lm", 4));
        assert_ne!(derive_seed(7, "lm", 3), derive_seed(7, "seq", 3));
        assert_ne!(derive_seed(7, "lm", 3), derive_seed(8, "lm", 3));
    }
}
