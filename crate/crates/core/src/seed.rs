//! Seed derivation.
//!
//! Every random stream in the toolchain is derived from one master seed:
//! `derive(master, stream, index) = splitmix64(splitmix64(master ^ stream) ^ index)`.
//! Work items (tasks, Monte Carlo chunks, epochs) get their own stream, so
//! parallel and serial execution draw identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags mixed into the master seed.
pub mod stream {
    pub const GENERATOR_TASK: u64 = 0x6765_6e5f_7461_736b;
    pub const SPLIT: u64 = 0x7370_6c69_7400_0000;
    pub const MODEL_INIT: u64 = 0x6d6f_6465_6c69_6e69;
    pub const INITIAL_STATE: u64 = 0x6830_0000_0000_0000;
    pub const SHUFFLE: u64 = 0x7368_7566_666c_6500;
    pub const MONTE_CARLO: u64 = 0x6d63_7472_6961_6c73;
    pub const IMAGE_PROJECTION: u64 = 0x696d_6770_726f_6a00;
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ stream) ^ index)
}

pub fn rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, index))
}
