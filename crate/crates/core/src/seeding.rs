//! Deterministic substream derivation.
//!
//! Every random draw in an experiment comes from a ChaCha stream keyed by the
//! master seed plus a path such as `[drop, block, purpose]`. Adding drops or
//! blocks never perturbs the streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes used as the last path element.
pub mod purpose {
    pub const UE_DROP: u64 = 1;
    pub const LARGE_SCALE: u64 = 2;
    pub const SMALL_SCALE: u64 = 3;
    pub const CELL_FREE_LARGE: u64 = 4;
    pub const CELL_FREE_SMALL: u64 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed from a master seed and a path.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019))))
}

pub fn stream(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
