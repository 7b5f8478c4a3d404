//! Seeded random streams.
//!
//! Every stochastic operation takes one 64-bit seed. Independent consumers of
//! the same seed draw from distinct ChaCha streams, so adding a consumer never
//! perturbs the draws of another and runs are reproducible bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers for the consumers of a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    BasisRows = 1,
    BasisAssignment = 2,
    Observation = 3,
    Split = 4,
    Init = 5,
    Dropout = 6,
    Subsample = 7,
}

/// A generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    substream(seed, stream, 0)
}

/// A generator for `(seed, stream, index)`, e.g. one dropout mask per iteration.
pub fn substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream as u64) << 48 | (index & 0xFFFF_FFFF_FFFF));
    rng
}
