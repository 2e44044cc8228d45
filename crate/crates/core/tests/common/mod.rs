//! Shared fixtures for the acceptance suite: the frozen desk-scale
//! experiment setup and the exhaustive bag-posterior oracle.

use mlmlab::data::{generate_synthetic, pairing_from_seed, CorpusShard, SyntheticSpec};
use mlmlab::error::Result;
use mlmlab::objectives::{MaskScope, ObjectiveKind};
use mlmlab::trainer::{for_each_eval_batch, TrainConfig};

/// Synthetic order-sensitive corpus: 32 keys, 32-token sequences.
pub const N_KEYS: u32 = 32;
pub const SEQ_LEN: usize = 32;
pub const TRAIN_SEQUENCES: usize = 50_000;
pub const VALID_SEQUENCES: usize = 1_000;
const PAIRING_SEED: u64 = 7;
const TRAIN_SEED: u64 = 101;
const VALID_SEED: u64 = 102;

pub fn corpus_spec(n_sequences: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_keys: N_KEYS,
        pairing: pairing_from_seed(N_KEYS, PAIRING_SEED),
        seq_len: SEQ_LEN,
        n_sequences,
        seed,
    }
}

/// The acceptance corpus pair. Train and validation shards share one
/// key-to-value pairing and differ only in their key draws.
pub fn acceptance_corpus() -> (CorpusShard, CorpusShard) {
    let train = generate_synthetic(&corpus_spec(TRAIN_SEQUENCES, TRAIN_SEED)).unwrap();
    let valid = generate_synthetic(&corpus_spec(VALID_SEQUENCES, VALID_SEED)).unwrap();
    (train, valid)
}

/// Frozen desk-scale training configuration for the experiment matrix:
/// 2-layer, d_model 64 models on the synthetic corpus, 5k steps.
///
/// The MLM settings are the deliberate part. Masking hits value positions
/// only (`OddOnly`) and always substitutes the mask token: every key stays
/// visible and the bag of visible tokens is never polluted by random
/// replacements, so the bag-posterior oracle below is the exact
/// bag-of-words-optimal predictor for the masked slots. The 0.5 rate masks
/// about eight of a sequence's sixteen values, which keeps that optimum
/// usefully far from zero loss.
pub fn matrix_base() -> TrainConfig {
    let spec = corpus_spec(0, 0);
    let mut cfg = TrainConfig::default();
    cfg.model.vocab_size = spec.vocab_size() as usize;
    cfg.model.max_seq_len = SEQ_LEN;
    cfg.batch_size = 16;
    cfg.total_steps = 5_000;
    cfg.warmup_steps = 500;
    cfg.eval_interval = 1_000;
    cfg.checkpoint_interval = 0;
    cfg.mlm.mask_token_id = spec.mask_token();
    cfg.mlm.pad_token_id = spec.pad_token();
    cfg.mlm.scope = MaskScope::OddOnly;
    cfg.mlm.mask_rate = 0.5;
    cfg.mlm.p_mask_token = 1.0;
    cfg.mlm.p_random_token = 0.0;
    cfg.mlm.p_keep = 0.0;
    cfg
}

/// Mean NLL and perplexity of the bag-of-words-optimal predictor on exactly
/// the masked slots the evaluator scores.
///
/// An order-invariant model with no position information sees a sequence as
/// a multiset. Under value-only pure masking the visible bag still contains
/// every key, so it determines the multiset of hidden values exactly; what
/// it cannot do is match hidden values to slots. Equivariance forces one
/// shared posterior across a sequence's masked slots, and the best such
/// posterior is the empirical distribution of that sequence's hidden values
/// (count / total). Charging each slot its hidden value's probability under
/// that distribution is therefore a per-sequence lower bound on the
/// evaluation loss of *any* order-invariant model — trained or not — and
/// summing gives the corpus bound.
pub fn bag_posterior_bound(cfg: &TrainConfig, shard: &CorpusShard) -> Result<(f64, f64)> {
    assert_eq!(cfg.objective, ObjectiveKind::Mlm, "the bound is an MLM construction");
    assert_eq!(cfg.mlm.scope, MaskScope::OddOnly, "keys must stay visible");
    assert_eq!(cfg.mlm.p_mask_token, 1.0, "corruption must not pollute the bag");
    let mut total_nll = 0.0f64;
    let mut total_predicted = 0usize;
    for_each_eval_batch(cfg, shard, |batch| {
        for r in 0..batch.rows {
            let row = &batch.targets[r * batch.seq..(r + 1) * batch.seq];
            let hidden: Vec<u32> =
                row.iter().copied().filter(|&t| t != cfg.mlm.ignore_marker).collect();
            let m = hidden.len() as f64;
            for &value in &hidden {
                let count = hidden.iter().filter(|&&t| t == value).count() as f64;
                total_nll -= (count / m).ln();
            }
            total_predicted += hidden.len();
        }
        Ok(())
    })?;
    let mean = total_nll / total_predicted as f64;
    Ok((mean, mean.exp()))
}
