//! Seed derivation.
//!
//! Every stochastic step in the workbench draws from a ChaCha stream whose
//! seed is a pure function of a master seed and a path of indices, so any
//! example, tap or Monte-Carlo pass can be regenerated in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `index` under `base`.
pub fn derive(base: u64, index: u64) -> u64 {
    mix64(base ^ mix64(index.wrapping_add(0x2545_F491_4F6C_DD1D)))
}

/// Named sub-streams keep independent draws from colliding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Payload = 1,
    Channel = 2,
    Noise = 3,
    Parameters = 4,
    Pilots = 5,
    Weights = 6,
    Dropout = 7,
    Shuffle = 8,
    Split = 9,
}

pub fn substream(base: u64, stream: Stream) -> u64 {
    derive(base, 0xD1B5_4A32_D192_ED03 ^ stream as u64)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
