//! Synthetic order-sensitive corpus generator.
//!
//! Sequences alternate key and value tokens: positions 0, 2, 4, … hold keys
//! drawn uniformly, and each odd position holds the value paired with the key
//! immediately before it under a fixed bijection. A bag of tokens therefore
//! pins down *which* values occur but not *where*, so any model that wants to
//! predict a specific value slot must know which key precedes it — word order
//! carries real information here, by construction.
//!
//! Token id layout for `n_keys = K`:
//!
//! ```text
//! 0 .. K        keys
//! K .. 2K       values (key k pairs with value id K + pairing[k])
//! 2K            padding
//! 2K + 1        mask
//! 2K + 2        beginning-of-sequence
//! ```

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::shard::CorpusShard;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    /// Number of distinct keys (and of distinct values).
    pub n_keys: u32,
    /// Bijection from key index to value index: key `k` pairs with value id
    /// `n_keys + pairing[k]`.
    pub pairing: Vec<u32>,
    /// Tokens per sequence; must be even so key/value pairs tile exactly.
    pub seq_len: usize,
    pub n_sequences: usize,
    /// Seed for drawing the key stream.
    pub seed: u64,
}

/// A uniformly random bijection over `0..n_keys`, deterministic in the seed.
pub fn pairing_from_seed(n_keys: u32, seed: u64) -> Vec<u32> {
    let mut pairing: Vec<u32> = (0..n_keys).collect();
    pairing.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pairing
}

impl SyntheticSpec {
    /// Spec with a seeded random pairing and the default corpus shape
    /// (32 keys, 32-token sequences).
    pub fn with_seeded_pairing(n_sequences: usize, seed: u64, pairing_seed: u64) -> Self {
        let n_keys = 32;
        Self {
            n_keys,
            pairing: pairing_from_seed(n_keys, pairing_seed),
            seq_len: 32,
            n_sequences,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_keys == 0 {
            return Err(Error::Config("n_keys must be positive".into()));
        }
        if self.seq_len == 0 || self.seq_len % 2 != 0 {
            return Err(Error::Config(format!(
                "seq_len must be positive and even, got {}",
                self.seq_len
            )));
        }
        if self.pairing.len() != self.n_keys as usize {
            return Err(Error::Config(format!(
                "pairing has {} entries for {} keys",
                self.pairing.len(),
                self.n_keys
            )));
        }
        let mut seen = vec![false; self.n_keys as usize];
        for &v in &self.pairing {
            if v >= self.n_keys || seen[v as usize] {
                return Err(Error::Config("pairing must be a bijection".into()));
            }
            seen[v as usize] = true;
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> u32 {
        2 * self.n_keys + 3
    }

    pub fn pad_token(&self) -> u32 {
        2 * self.n_keys
    }

    pub fn mask_token(&self) -> u32 {
        2 * self.n_keys + 1
    }

    pub fn bos_token(&self) -> u32 {
        2 * self.n_keys + 2
    }

    /// Value token paired with `key`.
    pub fn value_for(&self, key: u32) -> u32 {
        self.n_keys + self.pairing[key as usize]
    }
}

/// Generates the corpus as a shard, one sequence per document.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<CorpusShard> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tokens = Vec::with_capacity(spec.n_sequences * spec.seq_len);
    let mut boundaries = Vec::with_capacity(spec.n_sequences);
    for _ in 0..spec.n_sequences {
        for _ in 0..spec.seq_len / 2 {
            let key = rng.gen_range(0..spec.n_keys);
            tokens.push(key);
            tokens.push(spec.value_for(key));
        }
        boundaries.push(tokens.len() as u64);
    }
    CorpusShard::new(spec.vocab_size(), tokens, boundaries)
}
