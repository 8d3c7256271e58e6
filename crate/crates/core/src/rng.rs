//! Seeded random streams.
//!
//! Every random draw comes from `ChaCha8Rng::seed_from_u64(seed)` moved to
//! stream `purpose << 56 | major << 16 | minor`, so any draw can be
//! reproduced from the master seed and its coordinates alone. For boundary
//! sampling `major` is the optimizer step and `minor` the batch row.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Boundary = 3,
    Eval = 4,
    Synthetic = 5,
}

/// `major` must fit in 40 bits and `minor` in 16.
pub fn stream(seed: u64, purpose: Purpose, major: u64, minor: u64) -> ChaCha8Rng {
    debug_assert!(major < 1 << 40 && minor < 1 << 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose as u64) << 56 | (major & ((1 << 40) - 1)) << 16 | (minor & 0xffff));
    rng
}
