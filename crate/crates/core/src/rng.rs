//! Seed derivation. Every random draw in a run comes from one `seed`; independent
//! consumers read disjoint ChaCha8 streams of that seed, so adding draws to one consumer
//! never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream numbers handed to [`ChaCha8Rng::set_stream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    TrainData = 0,
    TestData = 1,
    Init = 2,
    Shuffle = 3,
    Sampling = 4,
    Benchmark = 5,
}

pub fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Generator for repetition `index` of an experiment; streams from 1024 upward are
/// reserved for this.
pub fn indexed(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1024 + index);
    rng
}
