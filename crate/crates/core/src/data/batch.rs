//! Deterministic shuffled mini-batch index streams.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Yields index batches over `0..len`, reshuffling at every epoch boundary.
/// A trailing partial batch is dropped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size >= 1 && batch_size <= len, "batch size {batch_size} must be in 1..={len}");
        let mut s = Self {
            order: (0..len).collect(),
            pos: 0,
            batch_size,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let b = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        b
    }
}
