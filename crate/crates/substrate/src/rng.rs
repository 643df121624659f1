//! Named random streams.
//!
//! Every stochastic choice draws from a ChaCha8 stream whose 64-bit seed is
//! `splitmix64(seed ^ fnv1a64(name) ^ splitmix64(index))`. Streams with
//! different names are independent, so adding a draw to one stream never
//! perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn stream(seed: u64, name: &str) -> Rng {
    indexed_stream(seed, name, 0)
}

/// A stream keyed by `(seed, name, index)`, e.g. one per training step.
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> Rng {
    let mixed = splitmix64(seed ^ fnv1a64(name.as_bytes()) ^ splitmix64(index));
    ChaCha8Rng::seed_from_u64(mixed)
}
