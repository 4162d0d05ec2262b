//! Reproducible random streams.
//!
//! Every chain draws from its own ChaCha stream keyed by (seed, purpose,
//! example, iteration), so results do not depend on how work is scheduled
//! across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for; keeps streams of different roles disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    WeightInit = 1,
    LatentInit = 2,
    Langevin = 3,
    Masks = 4,
    Sensing = 5,
    Synthesis = 6,
    Fit = 7,
}

pub fn stream(seed: u64, purpose: Purpose, example: usize, iteration: usize) -> ChaCha8Rng {
    let key = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(purpose as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(((iteration as u64) << 32) ^ example as u64);
    rng
}
