//! Deterministic counter-based random streams.
//!
//! Every random draw in the pipeline comes from a [`RngStream`] keyed by a
//! global seed and a stream id derived from the work item and stage. ChaCha
//! is counter based, so each (seed, stream) pair is an independent sequence
//! no matter which thread consumes it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage identifiers mixed into stream ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    Iso = 1,
    ShotRead = 2,
    DarkPatch = 3,
    Latent = 4,
    Ancestral = 5,
    Scene = 6,
    SearchNoise = 7,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Child stream for a sub-task, e.g. one row or one stage.
    pub fn derive(&self, part: u64) -> Self {
        Self {
            seed: self.seed,
            stream: mix(self.stream ^ mix(part)),
        }
    }

    pub fn stage(&self, stage: Stage) -> Self {
        self.derive(stage as u64)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}
