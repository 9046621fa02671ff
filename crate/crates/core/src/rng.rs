//! Deterministic RNG substreams.
//!
//! Every run owns a single seed; each consumer (data order, augmentation,
//! buffer, weight init) gets its own ChaCha stream derived from it so that
//! changing how many draws one consumer makes never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Augment,
    Buffer,
    Init,
    Means,
    Train,
    Test,
    Eval,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x6461_7461,
            Stream::Augment => 0x6175_676d,
            Stream::Buffer => 0x6275_6666,
            Stream::Init => 0x696e_6974,
            Stream::Means => 0x6d65_616e,
            Stream::Train => 0x7472_6169,
            Stream::Test => 0x7465_7374,
            Stream::Eval => 0x6576_616c,
        }
    }
}

/// SplitMix64 finalizer; decorrelates nearby seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `stream`, for components that take a plain seed.
pub fn derive(seed: u64, stream: Stream) -> u64 {
    mix(seed ^ mix(stream.tag()))
}

pub fn substream(seed: u64, stream: Stream) -> Rng {
    Rng::seed_from_u64(derive(seed, stream))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
