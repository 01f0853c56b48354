//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`), keyed by the
//! 64-bit seed through `SeedableRng::seed_from_u64`, with one ChaCha stream id
//! per consumer. ChaCha8 output is specified bit-for-bit, so a seed reproduces
//! the same draws on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Independent consumers of the seed; each gets its own ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Trace = 1,
    Predictor = 2,
    InitialFill = 3,
}

pub fn stream(seed: u64, which: Stream) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
