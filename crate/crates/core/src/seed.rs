//! Seed derivation.
//!
//! Every random decision in a run is taken from an RNG whose seed is derived
//! from the master seed, a stream tag and an index. Nothing depends on thread
//! scheduling or arrival order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named RNG streams. Distinct tags keep the streams independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Plan,
    Variant,
    Shuffle,
    Simulator,
    Split,
    Latent,
    Labeling,
    Requery,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Plan => 0x706c_616e,
            Stream::Variant => 0x7661_7269,
            Stream::Shuffle => 0x7368_7566,
            Stream::Simulator => 0x7369_6d75,
            Stream::Split => 0x7370_6c74,
            Stream::Latent => 0x6c61_746e,
            Stream::Labeling => 0x6c61_626c,
            Stream::Requery => 0x7265_7175,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed for `(stream, index)` under `master`.
pub fn derive(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ stream.tag().rotate_left(17)) ^ splitmix64(index))
}

/// Seeded RNG for `(stream, index)` under `master`.
pub fn rng(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, index))
}
