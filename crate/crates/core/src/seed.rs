//! Master-seed fan-out.
//!
//! Every consumer draws from its own ChaCha stream keyed by
//! `(master seed, stream id)`, so adding a consumer never shifts another's
//! random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids of the pipelines. Sub-streams pack `(pipeline, index)`.
pub mod streams {
    pub const POOL: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TRIPLETS: u64 = 3;
    pub const LATENT: u64 = 4;
    pub const IMPROVE: u64 = 5;
    pub const REWARD: u64 = 6;
    pub const GATEWAY: u64 = 7;
    pub const HUMANS: u64 = 8;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    master: u64,
}

impl SeedStream {
    pub fn new(master: u64) -> Self {
        SeedStream { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(stream);
        rng
    }

    /// Stream `index` of `pipeline`.
    pub fn sub(&self, pipeline: u64, index: u64) -> ChaCha8Rng {
        self.rng((pipeline << 40) | (index & ((1 << 40) - 1)))
    }

    /// A derived `u64` seed for APIs that take a plain seed.
    pub fn seed(&self, pipeline: u64, index: u64) -> u64 {
        use rand::RngCore;
        self.sub(pipeline, index).next_u64()
    }
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
