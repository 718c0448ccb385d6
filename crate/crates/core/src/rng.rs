//! Seed derivation. Every random stream is a Xoshiro256++ generator seeded
//! from a master seed and a purpose label through SplitMix64, so streams are
//! independent of the order in which they are created.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// One SplitMix64 output step.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Sub-seed for a named purpose.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(tag)))
}

/// Sub-seed for a named purpose and an index path, e.g. (subject, repeat).
pub fn cell_seed(seed: u64, tag: &str, path: &[u64]) -> u64 {
    path.iter().fold(sub_seed(seed, tag), |s, &p| splitmix64(s ^ splitmix64(p)))
}

pub fn stream(seed: u64, tag: &str) -> Rng {
    Rng::seed_from_u64(sub_seed(seed, tag))
}

pub fn cell_stream(seed: u64, tag: &str, path: &[u64]) -> Rng {
    Rng::seed_from_u64(cell_seed(seed, tag, path))
}
