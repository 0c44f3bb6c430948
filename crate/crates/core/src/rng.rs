//! Named random substreams derived from one run seed.
//!
//! Every consumer of randomness asks for its own stream so that, for example,
//! changing the data order never perturbs weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    DataOrder,
    Augmentation,
    Stimulation,
    Noise,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::DataOrder => 2,
            Stream::Augmentation => 3,
            Stream::Stimulation => 4,
            Stream::Noise => 5,
        }
    }
}

/// Generator for `stream` under `seed`. `index` separates repeats of the
/// same experiment (e.g. repeat number, epoch).
pub fn substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream.id());
    rng
}
