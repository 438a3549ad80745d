//! Named, reproducible random streams.
//!
//! Every consumer of randomness owns its own stream so that adding draws to
//! one (say, the channel) never shifts the sequence seen by another.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamId {
    Length,
    Content,
    Channel,
    Shuffle,
    Init,
    Ablation,
    /// Free-form stream for tests and tools.
    Custom(u32),
}

impl StreamId {
    fn word(self) -> u64 {
        match self {
            StreamId::Length => 1,
            StreamId::Content => 2,
            StreamId::Channel => 3,
            StreamId::Shuffle => 4,
            StreamId::Init => 5,
            StreamId::Ablation => 6,
            StreamId::Custom(k) => 0x1_0000_0000 | k as u64,
        }
    }
}

/// A ChaCha stream keyed by `(seed, stream id)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    id: StreamId,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id.word());
        RngStream { seed, id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// Number of 32-bit words drawn so far.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
