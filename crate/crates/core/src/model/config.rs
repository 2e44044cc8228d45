//! Model hyper-parameters and the named architecture presets.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::mask::{MaskPolicy, MaskSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionEncodingKind {
    /// No position term at all; with an all-bidirectional schedule the model
    /// degenerates to a bag of words.
    Absent,
    /// Trained embedding table, one row per position.
    Learnable,
    /// Fixed interleaved sin/cos table; never receives gradients.
    Sinusoidal,
}

impl fmt::Display for PositionEncodingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionEncodingKind::Absent => "absent",
            PositionEncodingKind::Learnable => "learnable",
            PositionEncodingKind::Sinusoidal => "sinusoidal",
        })
    }
}

impl FromStr for PositionEncodingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absent" => Ok(PositionEncodingKind::Absent),
            "learnable" => Ok(PositionEncodingKind::Learnable),
            "sinusoidal" => Ok(PositionEncodingKind::Sinusoidal),
            other => Err(Error::Config(format!(
                "unknown pe kind {other:?} (absent|learnable|sinusoidal)"
            ))),
        }
    }
}

/// Element width the trainer instantiates the model with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?} (f32|f64)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub mask_schedule: MaskSchedule,
    pub pe_kind: PositionEncodingKind,
    pub dropout: f64,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return Err(Error::Config("layer/width fields must be positive".into()));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("vocab_size and max_seq_len must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.mask_schedule.len() != self.n_layers {
            return Err(Error::Config(format!(
                "mask schedule length {} vs n_layers {}",
                self.mask_schedule.len(),
                self.n_layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// The four shipped architectures. All share every parameter shape; only the
/// mask schedule differs, so any perplexity gap between them is attributable
/// to masking alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Bert,
    DecbertSame,
    DecbertDiff,
    GptDecoder,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Bert => "bert",
            Preset::DecbertSame => "decbert_same",
            Preset::DecbertDiff => "decbert_diff",
            Preset::GptDecoder => "gpt_decoder",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bert" => Ok(Preset::Bert),
            "decbert_same" => Ok(Preset::DecbertSame),
            "decbert_diff" => Ok(Preset::DecbertDiff),
            "gpt_decoder" => Ok(Preset::GptDecoder),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (bert|decbert_same|decbert_diff|gpt_decoder)"
            ))),
        }
    }
}

/// Applies a preset's mask schedule to a base config.
pub fn preset(name: Preset, base: &ModelConfig) -> Result<ModelConfig> {
    let l = base.n_layers;
    let schedule = match name {
        Preset::Bert => MaskSchedule::uniform(MaskPolicy::Bidirectional, l),
        Preset::GptDecoder => MaskSchedule::uniform(MaskPolicy::CausalLeftToRight, l),
        Preset::DecbertSame | Preset::DecbertDiff => {
            if l < 2 {
                return Err(Error::Config(format!("{name} preset needs >= 2 layers, got {l}")));
            }
            let mut policies = vec![MaskPolicy::Bidirectional; l];
            policies[0] = MaskPolicy::CausalLeftToRight;
            policies[1] = match name {
                Preset::DecbertSame => MaskPolicy::CausalLeftToRight,
                _ => MaskPolicy::CausalRightToLeft,
            };
            MaskSchedule(policies)
        }
    };
    let mut out = base.clone();
    out.mask_schedule = schedule;
    out.validate()?;
    Ok(out)
}
