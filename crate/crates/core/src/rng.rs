//! Seeded random streams.
//!
//! Every stochastic step in the pipeline draws from a `ChaCha8Rng` whose seed
//! is derived from a master seed and a stream tag, so that independent
//! consumers (shuffling, dropout, per-year sampling) never share a sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and a textual stream tag.
#[inline(never)]
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = mix(master);
    for b in tag.bytes() {
        h = mix(h ^ u64::from(b));
    }
    h
}

/// Derives a child seed from `master`, a tag and an integer index.
pub fn derive_seed_indexed(master: u64, tag: &str, index: u64) -> u64 {
    mix(derive_seed(master, tag) ^ mix(index))
}

pub fn stream(master: u64, tag: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(master, tag))
}

pub fn stream_indexed(master: u64, tag: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed_indexed(master, tag, index))
}
