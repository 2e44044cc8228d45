//! Deterministic batch construction over a token shard.
//!
//! The token stream is packed into contiguous, non-overlapping windows of
//! `seq_len` tokens (document boundaries are ignored for packing; a trailing
//! partial window is dropped). Each epoch visits every window exactly once in
//! a seeded shuffled order, and only full batches are yielded.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::shard::CorpusShard;
use crate::error::{Error, Result};
use crate::util::mix_seed;

/// Salt separating the window-shuffle RNG stream from every other consumer
/// of the run seed.
const SHUFFLE_SALT: u64 = 0x5748_4655_5353_4c54;

/// Number of full windows of `seq_len` tokens in the shard.
pub fn window_count(shard: &CorpusShard, seq_len: usize) -> usize {
    if seq_len == 0 {
        0
    } else {
        shard.tokens().len() / seq_len
    }
}

/// The `index`-th window of the shard, in stream order.
pub fn window(shard: &CorpusShard, seq_len: usize, index: usize) -> &[u32] {
    &shard.tokens()[index * seq_len..(index + 1) * seq_len]
}

/// The shuffled window visit order for one epoch. Depends only on
/// `(seed, epoch)` and the window count.
pub fn epoch_order(n_windows: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_windows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SHUFFLE_SALT, epoch));
    order.shuffle(&mut rng);
    order
}

/// Iterator over the full batches of one epoch, each a row-major
/// `batch_size * seq_len` token block.
pub struct EpochBatches<'a> {
    shard: &'a CorpusShard,
    seq_len: usize,
    batch_size: usize,
    order: Vec<usize>,
    next: usize,
}

/// Plans one epoch of batches. Errors if the shard cannot fill even a single
/// batch, since a training loop over an empty epoch would silently do
/// nothing.
pub fn make_batches(
    shard: &CorpusShard,
    seq_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<EpochBatches<'_>> {
    if seq_len == 0 || batch_size == 0 {
        return Err(Error::Config(
            "seq_len and batch_size must be positive".into(),
        ));
    }
    let n_windows = window_count(shard, seq_len);
    if n_windows < batch_size {
        return Err(Error::Data(format!(
            "shard has {} tokens = {n_windows} full windows of {seq_len}, \
             fewer than one batch of {batch_size}",
            shard.tokens().len()
        )));
    }
    Ok(EpochBatches {
        shard,
        seq_len,
        batch_size,
        order: epoch_order(n_windows, seed, epoch),
        next: 0,
    })
}

impl EpochBatches<'_> {
    pub fn n_batches(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

impl Iterator for EpochBatches<'_> {
    type Item = Vec<u32>;

    fn next(&mut self) -> Option<Vec<u32>> {
        if self.next + self.batch_size > self.order.len() {
            return None;
        }
        let mut tokens = Vec::with_capacity(self.batch_size * self.seq_len);
        for &w in &self.order[self.next..self.next + self.batch_size] {
            tokens.extend_from_slice(window(self.shard, self.seq_len, w));
        }
        self.next += self.batch_size;
        Some(tokens)
    }
}
