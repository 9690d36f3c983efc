//! Seed derivation for independent random streams.
//!
//! Each consumer (grid noise, fleet sampling, per-client training, DP noise,
//! mask seeds, selection) gets its own ChaCha stream keyed by the master
//! seed, a domain tag and up to two indices. Streams never share state, so
//! toggling one feature or reordering parallel work cannot shift another
//! feature's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags for derived streams.
pub mod stream {
    pub const FLEET: u64 = 0x0F1E;
    pub const PARTITION: u64 = 0xD1C7;
    pub const GRID_NOISE: u64 = 0x6A1D;
    pub const INIT: u64 = 0x1417;
    pub const TRAIN: u64 = 0x7A41;
    pub const SELECT: u64 = 0x5E1E;
    pub const DP_NOISE: u64 = 0xD90E;
    pub const MASK_SEEDS: u64 = 0x3A5C;
    pub const SYNTHETIC: u64 = 0x5A7E;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `master`, a domain tag and two indices into one 64-bit seed.
pub fn derive_seed(master: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ tag);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(17))
}

pub fn stream_rng(master: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, a, b))
}
