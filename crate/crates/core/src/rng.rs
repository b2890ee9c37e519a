//! Seed derivation and generator construction.
//!
//! Every stochastic choice in the pipeline draws from a ChaCha stream keyed by
//! a seed derived from `(base, stream)` so results never depend on call order
//! across unrelated subsystems.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Named sub-streams. Values are arbitrary but frozen: changing one changes
/// every generated artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Scene = 1,
    Target = 2,
    PromptJitter = 3,
    Occlusion = 4,
    Augment = 5,
    Init = 6,
    Shuffle = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: Stream) -> u64 {
    splitmix64(splitmix64(base) ^ (stream as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn derive_indexed(base: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(derive_seed(base, stream) ^ splitmix64(index))
}

pub fn rng_for(base: u64, stream: Stream) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, stream))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
