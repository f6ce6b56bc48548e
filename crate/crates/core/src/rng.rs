//! One seed, independent named sub-streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Noise,
    Env,
    Init,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::Noise => 2,
            Stream::Env => 3,
            Stream::Init => 4,
        }
    }
}

/// Generator for `stream` under `seed`. Streams never overlap, so reseeding
/// one component leaves the others untouched.
pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(which.id());
    r
}

/// Sub-stream for the `index`-th independent worker (episode, sample, ...).
pub fn substream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream(which.id());
    r
}
