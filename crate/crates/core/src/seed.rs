//! Named random streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream families; each family indexes its streams by a counter
/// (optimizer step, epoch, trajectory, ...).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Batch = 2,
    Shuffle = 3,
    Trajectory = 4,
    Evaluation = 5,
    Dataset = 6,
}

/// Independent generator for `(seed, family, index)`.
pub fn stream(seed: u64, family: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((family as u64) << 48) | (index & ((1 << 48) - 1)));
    rng
}
