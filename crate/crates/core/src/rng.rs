//! Counter-style seed derivation. Every random stream in the crate is a pure
//! function of `(master seed, tag, index)` so results never depend on how work
//! is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent consumers of one master seed apart.
pub mod tag {
    pub const DATA: u64 = 0x6461_7461;
    pub const FOLDS: u64 = 0x666f_6c64;
    pub const DIRECTIONS: u64 = 0x6469_7273;
    pub const MULTIPLIERS: u64 = 0x6d75_6c74;
    pub const REPLICATE: u64 = 0x7265_706c;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ tag) ^ index)
}

pub fn stream(master: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, index))
}
