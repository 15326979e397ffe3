//! Seed derivation. Every random stream in a run is a pure function of the
//! master seed and a (purpose, index) pair, so skipping or replaying one part
//! of a run never shifts the randomness seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Embedding,
    TaskData,
    Transient,
    Shuffle,
    Dropout,
    Probe,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Embedding => 2,
            Stream::TaskData => 3,
            Stream::Transient => 4,
            Stream::Shuffle => 5,
            Stream::Dropout => 6,
            Stream::Probe => 7,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream.tag()) ^ index)
}

pub fn rng_for(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Packs a task and epoch index into one stream index.
pub fn task_epoch(task: usize, epoch: usize) -> u64 {
    ((task as u64) << 32) | epoch as u64
}
