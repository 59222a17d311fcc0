//! Child-seed derivation.
//!
//! Every random stream in the crate descends from one user seed. Subsystems
//! derive their own seed from `(parent, purpose-tag)` with a stable hash, so
//! adding a new consumer never perturbs the streams of existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a purpose tag.
pub fn child_seed(parent: u64, tag: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in parent.to_le_bytes().iter().chain(tag.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

/// Same as [`child_seed`] with an additional integer index (epoch, step, ...).
pub fn indexed_seed(parent: u64, tag: &str, index: u64) -> u64 {
    splitmix64(child_seed(parent, tag) ^ splitmix64(index))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
