//! Seeded counter-based random streams.
//!
//! Each consumer draws from its own ChaCha stream so that turning one
//! consumer off never shifts the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Init,
    Dropout,
    Sampling,
    Shuffle,
    Synthesis,
    /// Sub-stream of another stream, e.g. one dropout site.
    Sub(u32, u32),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Dropout => 2,
            Stream::Sampling => 3,
            Stream::Shuffle => 4,
            Stream::Synthesis => 5,
            Stream::Sub(a, b) => (u64::from(a) << 32) | u64::from(b) | (1 << 63),
        }
    }
}

pub fn stream(seed: u64, stream: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Stable 32-bit label hash (FNV-1a) for naming sub-streams.
pub fn label_id(label: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in label.bytes() {
        h ^= u32::from(b);
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// Mixes a base seed with a counter (e.g. a training step) into a new seed.
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ counter.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
