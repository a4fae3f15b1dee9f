//! Named random streams derived from one master seed.
//!
//! The derivation is fixed (FNV-1a over the name, SplitMix64 mixing) so
//! streams are stable across platforms and toolchain versions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of stream `name` / `index` under `master`.
pub fn stream_seed(master: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a(name.as_bytes())) ^ splitmix64(index))
}

pub fn stream_rng(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, name, index))
}
