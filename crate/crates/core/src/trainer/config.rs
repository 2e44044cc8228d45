//! Training-run configuration and its flat `key=value` text codec.
//!
//! The text form is the single source of truth for a run: the CLI reads it
//! from a file, and every checkpoint embeds it verbatim so a resumed run
//! reconstructs the exact configuration. Keys mirror field names; the mask
//! schedule is derived from `preset`, so the file surface only expresses the
//! four shipped architectures.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{preset, MaskPolicy, MaskSchedule, ModelConfig, PositionEncodingKind, Precision, Preset};
use crate::objectives::{MlmSpec, ObjectiveKind};
use crate::tensor::optim::{AdamParams, LrSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub preset: Preset,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps between validation passes; 0 disables periodic evaluation.
    pub eval_interval: u64,
    /// Steps between checkpoints; 0 keeps only the final checkpoint.
    pub checkpoint_interval: u64,
    pub train_shard: String,
    pub valid_shard: String,
    /// Masking recipe; consulted only when `objective` is MLM.
    pub mlm: MlmSpec,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: a 2-layer model and a five-thousand-step budget
    /// that fits on one CPU core, with optimizer settings from the standard
    /// encoder-pretraining lineage (betas 0.9/0.98, weight decay 0.01,
    /// gradient clip 0.5) and the byte vocabulary's reserved ids. Dropout
    /// defaults off: runs are then reproducible bit-for-bit regardless of
    /// how the dropout stream is consumed.
    fn default() -> Self {
        let model = ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            vocab_size: 259,
            max_seq_len: 32,
            mask_schedule: MaskSchedule::uniform(MaskPolicy::Bidirectional, 2),
            pe_kind: PositionEncodingKind::Learnable,
            dropout: 0.0,
            precision: Precision::F32,
        };
        TrainConfig {
            objective: ObjectiveKind::Mlm,
            preset: Preset::Bert,
            model,
            batch_size: 16,
            total_steps: 5000,
            warmup_steps: 500,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            adam_epsilon: 1e-6,
            grad_clip: 0.5,
            seed: 1,
            eval_interval: 500,
            checkpoint_interval: 2500,
            train_shard: String::new(),
            valid_shard: String::new(),
            mlm: MlmSpec::standard(257, 256),
        }
    }
}

impl TrainConfig {
    /// Re-derives the mask schedule for a new preset.
    pub fn with_preset(mut self, p: Preset) -> Result<Self> {
        self.model = preset(p, &self.model)?;
        self.preset = p;
        Ok(self)
    }

    pub fn adam_params(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.eval_interval > self.total_steps {
            return Err(Error::Config(format!(
                "eval_interval {} exceeds total_steps {}",
                self.eval_interval, self.total_steps
            )));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.objective == ObjectiveKind::Mlm {
            self.mlm.validate()?;
            let vocab = self.model.vocab_size as u32;
            if self.mlm.mask_token_id >= vocab || self.mlm.pad_token_id >= vocab {
                return Err(Error::Config(format!(
                    "mlm mask/pad ids ({}, {}) outside vocab {vocab}",
                    self.mlm.mask_token_id, self.mlm.pad_token_id
                )));
            }
        }
        if self.objective == ObjectiveKind::Clm && self.model.max_seq_len < 2 {
            return Err(Error::Config("CLM needs sequences of at least 2 tokens".into()));
        }
        Ok(())
    }

    /// Serializes every configuration key as `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "objective={}", self.objective);
        let _ = writeln!(s, "preset={}", self.preset);
        let _ = writeln!(s, "n_layers={}", self.model.n_layers);
        let _ = writeln!(s, "d_model={}", self.model.d_model);
        let _ = writeln!(s, "n_heads={}", self.model.n_heads);
        let _ = writeln!(s, "d_ffn={}", self.model.d_ffn);
        let _ = writeln!(s, "vocab_size={}", self.model.vocab_size);
        let _ = writeln!(s, "max_seq_len={}", self.model.max_seq_len);
        let _ = writeln!(s, "pe_kind={}", self.model.pe_kind);
        let _ = writeln!(s, "dropout={}", self.model.dropout);
        let _ = writeln!(s, "precision={}", self.model.precision);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "total_steps={}", self.total_steps);
        let _ = writeln!(s, "warmup_steps={}", self.warmup_steps);
        let _ = writeln!(s, "peak_lr={}", self.peak_lr);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "beta1={}", self.beta1);
        let _ = writeln!(s, "beta2={}", self.beta2);
        let _ = writeln!(s, "adam_epsilon={}", self.adam_epsilon);
        let _ = writeln!(s, "grad_clip={}", self.grad_clip);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "eval_interval={}", self.eval_interval);
        let _ = writeln!(s, "checkpoint_interval={}", self.checkpoint_interval);
        let _ = writeln!(s, "train_shard={}", self.train_shard);
        let _ = writeln!(s, "valid_shard={}", self.valid_shard);
        let _ = writeln!(s, "mlm_mask_rate={}", self.mlm.mask_rate);
        let _ = writeln!(s, "mlm_p_mask_token={}", self.mlm.p_mask_token);
        let _ = writeln!(s, "mlm_p_random_token={}", self.mlm.p_random_token);
        let _ = writeln!(s, "mlm_p_keep={}", self.mlm.p_keep);
        let _ = writeln!(s, "mlm_mask_token={}", self.mlm.mask_token_id);
        let _ = writeln!(s, "mlm_pad_token={}", self.mlm.pad_token_id);
        let _ = writeln!(s, "mlm_scope={}", self.mlm.scope);
        s
    }

    /// Parses `key=value` text. Unknown or repeated keys are errors; missing
    /// keys keep their defaults; lines starting with `#` and blank lines are
    /// skipped. Values may contain `=` (paths); only the first one splits.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.model = preset(cfg.preset, &cfg.model)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "objective" => self.objective = value.parse()?,
            "preset" => self.preset = value.parse()?,
            "n_layers" => self.model.n_layers = num(key, value)?,
            "d_model" => self.model.d_model = num(key, value)?,
            "n_heads" => self.model.n_heads = num(key, value)?,
            "d_ffn" => self.model.d_ffn = num(key, value)?,
            "vocab_size" => self.model.vocab_size = num(key, value)?,
            "max_seq_len" => self.model.max_seq_len = num(key, value)?,
            "pe_kind" => self.model.pe_kind = value.parse()?,
            "dropout" => self.model.dropout = num(key, value)?,
            "precision" => self.model.precision = value.parse()?,
            "batch_size" => self.batch_size = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "peak_lr" => self.peak_lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_epsilon" => self.adam_epsilon = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "eval_interval" => self.eval_interval = num(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = num(key, value)?,
            "train_shard" => self.train_shard = value.to_string(),
            "valid_shard" => self.valid_shard = value.to_string(),
            "mlm_mask_rate" => self.mlm.mask_rate = num(key, value)?,
            "mlm_p_mask_token" => self.mlm.p_mask_token = num(key, value)?,
            "mlm_p_random_token" => self.mlm.p_random_token = num(key, value)?,
            "mlm_p_keep" => self.mlm.p_keep = num(key, value)?,
            "mlm_mask_token" => self.mlm.mask_token_id = num(key, value)?,
            "mlm_pad_token" => self.mlm.pad_token_id = num(key, value)?,
            "mlm_scope" => self.mlm.scope = value.parse()?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

impl TrainConfig {
    /// Linear warmup to `peak_lr`, then linear decay to zero at the final
    /// step.
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            end_lr: 0.0,
            power: 1.0,
        }
    }

    /// Learning rate applied at `step`; what the loss log records.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.schedule().lr_at(step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::MaskScope;

    #[test]
    fn text_round_trip_is_lossless() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);

        let mut cfg = TrainConfig::default()
            .with_preset(Preset::DecbertDiff)
            .unwrap();
        cfg.objective = ObjectiveKind::Clm;
        cfg.model.pe_kind = PositionEncodingKind::Sinusoidal;
        cfg.model.precision = Precision::F64;
        cfg.peak_lr = 3.5e-4;
        cfg.train_shard = "data/train=v2.bin".into();
        cfg.mlm.scope = MaskScope::OddOnly;
        cfg.seed = 99;
        let text = cfg.to_text();
        assert_eq!(TrainConfig::from_text(&text).unwrap(), cfg);
        assert_eq!(TrainConfig::from_text(&text).unwrap().to_text(), text);
    }

    #[test]
    fn parse_skips_comments_and_rejects_bad_lines() {
        let cfg = TrainConfig::from_text("# comment\n\n  seed = 7 \n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(TrainConfig::from_text("not_a_key=1").is_err());
        assert!(TrainConfig::from_text("seed").is_err());
        assert!(TrainConfig::from_text("seed=abc").is_err());
        assert!(TrainConfig::from_text("seed=1\nseed=2").is_err());
    }

    #[test]
    fn parse_rederives_schedule_from_preset() {
        let cfg = TrainConfig::from_text("preset=decbert_same\nn_layers=4").unwrap();
        assert_eq!(cfg.model.mask_schedule.to_string(), "lr,lr,bi,bi");
        let cfg = TrainConfig::from_text("preset=gpt_decoder\nobjective=clm").unwrap();
        assert_eq!(cfg.model.mask_schedule.to_string(), "lr,lr");
    }

    #[test]
    fn validate_enforces_step_and_interval_bounds() {
        let mut cfg = TrainConfig::default();
        cfg.warmup_steps = cfg.total_steps;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.eval_interval = cfg.total_steps + 1;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.total_steps = 0;
        cfg.warmup_steps = 0;
        cfg.eval_interval = 0;
        assert!(cfg.validate().is_ok());

        let mut cfg = TrainConfig::default();
        cfg.mlm.mask_token_id = 300;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lr_schedule_ramps_then_decays() {
        let cfg = TrainConfig::default();
        let (warmup, total) = (cfg.warmup_steps, cfg.total_steps);
        for t in 1..=warmup {
            assert!(cfg.lr_at(t) > cfg.lr_at(t - 1), "warmup must ramp at {t}");
        }
        assert_eq!(cfg.lr_at(warmup), cfg.peak_lr);
        for t in warmup + 1..total {
            assert!(cfg.lr_at(t) < cfg.lr_at(t - 1), "decay must fall at {t}");
        }
        assert!(cfg.lr_at(total - 1) > 0.0);
        assert_eq!(cfg.lr_at(total), 0.0);
    }
}
