//! The training loop: deterministic batch/mask/dropout streams, Adam with
//! warmup-decay scheduling and global-norm clipping, per-step loss logging,
//! periodic evaluation and checkpointing, and bit-exact resume.
//!
//! Every source of randomness is an independent ChaCha stream derived from
//! the run seed with a salt (initialization, batch shuffling, per-step
//! masking, per-step dropout), so any step of a run can be reproduced in
//! isolation and a resumed run replays exactly the stream an uninterrupted
//! run would have seen. Validation masking uses one fixed seed shared by
//! every run, so models are compared on identical corrupted inputs.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::batches::{epoch_order, window, window_count};
use crate::data::shard::CorpusShard;
use crate::error::{Error, Result};
use crate::model::{
    bind_params, harvest_grads, load_checkpoint, model_forward, rebuild_adam, rebuild_params,
    save_checkpoint, ModelParams,
};
use crate::objectives::{apply_mlm_masking, batch_loss, clm_shift, LmBatch, ObjectiveKind, IGNORE_MARKER};
use crate::scalar::Scalar;
use crate::tensor::optim::{adam_step, clip_global_norm, AdamState};
use crate::tensor::tape::Tape;
use crate::trainer::config::TrainConfig;
use crate::trainer::logs::{EvalEntry, LossLog, TrainEntry};
use crate::util::mix_seed;

/// Salt for the per-step masking RNG stream.
const MASK_SALT: u64 = 0x4d41_534b_5f53_414c;
/// Salt for the per-step dropout RNG stream.
const DROPOUT_SALT: u64 = 0x4452_4f50_5f53_414c;
/// Fixed validation-masking seed, shared by all runs so that every model is
/// evaluated on identical corrupted inputs. Deliberately not derived from the
/// run seed.
const EVAL_MASK_SEED: u64 = 0x4556_414c_5f4d_534b;
const EVAL_MASK_SALT: u64 = 0x4556_414c_5f42_4348;

/// Mutable training state: everything a checkpoint captures.
pub struct TrainState<T: Scalar> {
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    /// Completed optimizer steps; the next step to run.
    pub step: u64,
}

/// A finished (or resumed-and-finished) run.
pub struct RunOutput<T: Scalar> {
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
    pub log: LossLog,
}

fn fresh_adam<T: Scalar>(params: &mut ModelParams<T>) -> AdamState<T> {
    let sizes: Vec<usize> = params.slots().iter().map(|s| s.tensor.numel()).collect();
    AdamState::new(sizes)
}

fn check_shard_vocab(shard: &CorpusShard, cfg: &TrainConfig, which: &str) -> Result<()> {
    if shard.vocab_size() as usize != cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "{which} shard vocab {} does not match model vocab {}",
            shard.vocab_size(),
            cfg.model.vocab_size
        )));
    }
    Ok(())
}

/// Builds the training batch for one global step from the shuffled epoch
/// order, caching the order so consecutive steps of one epoch reuse it.
struct BatchPlan {
    n_windows: usize,
    batches_per_epoch: u64,
    cached_epoch: Option<(u64, Vec<usize>)>,
}

impl BatchPlan {
    fn new(shard: &CorpusShard, cfg: &TrainConfig) -> Result<Self> {
        let seq_len = cfg.model.max_seq_len;
        let n_windows = window_count(shard, seq_len);
        let batches_per_epoch = (n_windows / cfg.batch_size) as u64;
        if batches_per_epoch == 0 {
            return Err(Error::Data(format!(
                "train shard has {} tokens = {n_windows} windows of {seq_len}, \
                 fewer than one batch of {}",
                shard.tokens().len(),
                cfg.batch_size
            )));
        }
        Ok(BatchPlan { n_windows, batches_per_epoch, cached_epoch: None })
    }

    fn tokens_for_step(&mut self, shard: &CorpusShard, cfg: &TrainConfig, step: u64) -> Vec<u32> {
        let epoch = step / self.batches_per_epoch;
        let index = (step % self.batches_per_epoch) as usize;
        if !matches!(&self.cached_epoch, Some((e, _)) if *e == epoch) {
            self.cached_epoch = Some((epoch, epoch_order(self.n_windows, cfg.seed, epoch)));
        }
        let order = &self.cached_epoch.as_ref().unwrap().1;
        let seq_len = cfg.model.max_seq_len;
        let mut tokens = Vec::with_capacity(cfg.batch_size * seq_len);
        for &w in &order[index * cfg.batch_size..(index + 1) * cfg.batch_size] {
            tokens.extend_from_slice(window(shard, seq_len, w));
        }
        tokens
    }
}

fn objective_batch(cfg: &TrainConfig, tokens: &[u32], rows: usize, step: u64) -> Result<LmBatch> {
    match cfg.objective {
        ObjectiveKind::Mlm => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, MASK_SALT, step));
            apply_mlm_masking(tokens, rows, &cfg.mlm, &mut rng)
        }
        ObjectiveKind::Clm => clm_shift(tokens, rows),
    }
}

/// Runs steps `state.step .. config.total_steps`, appending to `log` and
/// invoking `on_checkpoint` after each `checkpoint_interval`-th step.
pub fn run_steps<T: Scalar>(
    cfg: &TrainConfig,
    train_shard: &CorpusShard,
    valid_shard: Option<&CorpusShard>,
    state: &mut TrainState<T>,
    log: &mut LossLog,
    mut on_checkpoint: impl FnMut(&TrainState<T>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if state.step >= cfg.total_steps {
        return Ok(());
    }
    check_shard_vocab(train_shard, cfg, "train")?;
    if let Some(v) = valid_shard {
        check_shard_vocab(v, cfg, "valid")?;
    }
    let schedule = cfg.schedule();
    schedule.validate()?;
    let mut plan = BatchPlan::new(train_shard, cfg)?;
    let adam_hp = cfg.adam_params();
    let clock = Instant::now();
    let mut last_grad_norm = 0.0f64;

    for step in state.step..cfg.total_steps {
        let lr = schedule.lr_at(step);
        let tokens = plan.tokens_for_step(train_shard, cfg, step);
        let batch = objective_batch(cfg, &tokens, cfg.batch_size, step)?;

        state.params.zero_grads();
        let mut tape = Tape::new();
        let binding = bind_params(&mut tape, &state.params);
        let mut dropout_rng = (cfg.model.dropout > 0.0)
            .then(|| ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, DROPOUT_SALT, step)));
        let forward = (|| -> Result<(usize, f64)> {
            let logits = model_forward(
                &mut tape,
                &binding,
                &cfg.model,
                &batch.inputs,
                batch.rows,
                dropout_rng.as_mut(),
            )?;
            let loss_node = tape.cross_entropy_logits(logits, &batch.targets, IGNORE_MARKER)?;
            let loss = tape.scalar_value(loss_node).as_f64();
            Ok((loss_node, loss))
        })();
        let (loss_node, loss) = match forward {
            Ok(pair) => pair,
            // A forward error on a structurally valid batch with non-finite
            // activations is a numerical blow-up, not a usage error.
            Err(_) if !tape.all_finite() || !state.params.all_finite() => {
                return Err(Error::NonFinite { step, lr, grad_norm: last_grad_norm });
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, lr, grad_norm: last_grad_norm });
        }
        tape.backward(loss_node)?;
        harvest_grads(&mut tape, &binding, &mut state.params)?;

        let mut slots = state.params.slots();
        let mut grads: Vec<&mut [T]> = slots
            .iter_mut()
            .map(|s| s.tensor.grad_mut().expect("harvested parameter gradient"))
            .collect();
        let norm = clip_global_norm(&mut grads, cfg.grad_clip)?;
        drop(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite { step, lr, grad_norm: norm });
        }
        last_grad_norm = norm;
        adam_step(&mut slots, &mut state.adam, &adam_hp, lr, cfg.weight_decay)?;
        drop(slots);

        log.push_train(TrainEntry {
            step,
            train_loss: loss,
            lr,
            wall_clock_s: clock.elapsed().as_secs_f64(),
        })?;

        let completed = step + 1;
        state.step = completed;
        if cfg.eval_interval > 0 && completed % cfg.eval_interval == 0 {
            if let Some(valid) = valid_shard {
                let (valid_loss, valid_ppl) = evaluate_ppl(&state.params, cfg, valid)?;
                log.push_eval(EvalEntry { step, valid_loss, valid_ppl })?;
            }
        }
        if cfg.checkpoint_interval > 0
            && completed % cfg.checkpoint_interval == 0
            && completed < cfg.total_steps
        {
            on_checkpoint(state)?;
        }
    }
    Ok(())
}

/// The exact objective batch the evaluator builds for one chunk of windows.
/// MLM corruption draws from one fixed seed per batch index — deliberately
/// not derived from the run seed — so any two models see byte-identical
/// validation inputs, and analysis code can reproduce them.
pub fn eval_objective_batch(
    cfg: &TrainConfig,
    tokens: &[u32],
    rows: usize,
    batch_index: u64,
) -> Result<LmBatch> {
    match cfg.objective {
        ObjectiveKind::Mlm => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(EVAL_MASK_SEED, EVAL_MASK_SALT, batch_index));
            apply_mlm_masking(tokens, rows, &cfg.mlm, &mut rng)
        }
        ObjectiveKind::Clm => clm_shift(tokens, rows),
    }
}

/// Visits every evaluation batch of the shard in stream order: full windows,
/// chunked by `batch_size` (the final chunk may be short).
pub fn for_each_eval_batch(
    cfg: &TrainConfig,
    shard: &CorpusShard,
    mut visit: impl FnMut(&LmBatch) -> Result<()>,
) -> Result<()> {
    check_shard_vocab(shard, cfg, "eval")?;
    let seq_len = cfg.model.max_seq_len;
    let n_windows = window_count(shard, seq_len);
    if n_windows == 0 {
        return Err(Error::Data(format!(
            "evaluation shard has {} tokens, fewer than one window of {seq_len}",
            shard.tokens().len()
        )));
    }
    for (batch_index, windows) in (0..n_windows)
        .collect::<Vec<_>>()
        .chunks(cfg.batch_size)
        .enumerate()
    {
        let mut tokens = Vec::with_capacity(windows.len() * seq_len);
        for &w in windows {
            tokens.extend_from_slice(window(shard, seq_len, w));
        }
        let batch = eval_objective_batch(cfg, &tokens, windows.len(), batch_index as u64)?;
        visit(&batch)?;
    }
    Ok(())
}

/// No-gradient validation pass over every full window of the shard, in
/// stream order. Returns `(mean NLL, ppl)` with `ppl = exp(mean NLL)`.
pub fn evaluate_ppl<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &TrainConfig,
    shard: &CorpusShard,
) -> Result<(f64, f64)> {
    let mut total_nll = 0.0f64;
    let mut total_predicted = 0usize;
    for_each_eval_batch(cfg, shard, |batch| {
        let (mean_nll, n) = batch_loss(params, &cfg.model, batch)?;
        total_nll += mean_nll * n as f64;
        total_predicted += n;
        Ok(())
    })?;
    let mean = total_nll / total_predicted as f64;
    Ok((mean, mean.exp()))
}

fn checkpoint_path(out_dir: &Path, step: u64) -> std::path::PathBuf {
    out_dir.join(format!("checkpoint_{step}.bin"))
}

fn write_run_artifacts<T: Scalar>(
    out_dir: &Path,
    cfg: &TrainConfig,
    state: &TrainState<T>,
    log: &LossLog,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let final_path = out_dir.join("checkpoint_final.bin");
    save_checkpoint(&final_path, &cfg.to_text(), &state.params, &state.adam, state.step)?;
    let train_path = out_dir.join("train_log.csv");
    std::fs::write(&train_path, log.train_csv()).map_err(|e| Error::io(&train_path, e))?;
    let eval_path = out_dir.join("eval_log.csv");
    std::fs::write(&eval_path, log.eval_csv()).map_err(|e| Error::io(&eval_path, e))?;
    Ok(())
}

/// Trains from scratch per the config. With `out_dir` set, interval
/// checkpoints, a final checkpoint, and both loss CSVs are written there.
pub fn train<T: Scalar>(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<RunOutput<T>> {
    cfg.validate()?;
    let train_shard = CorpusShard::read_from_path(&cfg.train_shard)?;
    let valid_shard = match cfg.valid_shard.as_str() {
        "" => None,
        p => Some(CorpusShard::read_from_path(p)?),
    };
    train_on_shards(cfg, &train_shard, valid_shard.as_ref(), out_dir)
}

/// [`train`] on already-loaded shards, for callers running several
/// configurations over one corpus.
pub fn train_on_shards<T: Scalar>(
    cfg: &TrainConfig,
    train_shard: &CorpusShard,
    valid_shard: Option<&CorpusShard>,
    out_dir: Option<&Path>,
) -> Result<RunOutput<T>> {
    cfg.validate()?;
    let mut params = ModelParams::init(&cfg.model, cfg.seed)?;
    let adam = fresh_adam(&mut params);
    let mut state = TrainState { params, adam, step: 0 };
    let mut log = LossLog::new();
    train_into(cfg, train_shard, valid_shard, &mut state, &mut log, out_dir)?;
    Ok(RunOutput { params: state.params, adam: state.adam, log })
}

/// Continues a checkpointed run to its configured end. The configuration is
/// the one embedded in the checkpoint; the returned log covers only the
/// resumed steps.
pub fn resume<T: Scalar>(
    checkpoint: &Path,
    out_dir: Option<&Path>,
) -> Result<(TrainConfig, RunOutput<T>)> {
    let data = load_checkpoint::<T>(checkpoint)?;
    let cfg = TrainConfig::from_text(&data.config_text)?;
    let params = rebuild_params(&cfg.model, &data.params)?;
    let adam = rebuild_adam(&params, &data.adam, data.step)?;
    let train_shard = CorpusShard::read_from_path(&cfg.train_shard)?;
    let valid_shard = match cfg.valid_shard.as_str() {
        "" => None,
        p => Some(CorpusShard::read_from_path(p)?),
    };
    let mut state = TrainState { params, adam, step: data.step };
    let mut log = LossLog::new();
    train_into(&cfg, &train_shard, valid_shard.as_ref(), &mut state, &mut log, out_dir)?;
    Ok((cfg, RunOutput { params: state.params, adam: state.adam, log }))
}

fn train_into<T: Scalar>(
    cfg: &TrainConfig,
    train_shard: &CorpusShard,
    valid_shard: Option<&CorpusShard>,
    state: &mut TrainState<T>,
    log: &mut LossLog,
    out_dir: Option<&Path>,
) -> Result<()> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let config_text = cfg.to_text();
    run_steps(cfg, train_shard, valid_shard, state, log, |s| {
        if let Some(dir) = out_dir {
            save_checkpoint(&checkpoint_path(dir, s.step), &config_text, &s.params, &s.adam, s.step)
        } else {
            Ok(())
        }
    })?;
    if let Some(dir) = out_dir {
        write_run_artifacts(dir, cfg, state, log)?;
    }
    Ok(())
}
