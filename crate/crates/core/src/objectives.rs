//! Training objectives: masked language modeling (BERT-style corruption) and
//! causal language modeling (next-token shift).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{bind_params, forward_logits, model_forward, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::tape::Tape;

/// Target sentinel for positions that contribute no loss.
pub const IGNORE_MARKER: u32 = u32::MAX;

/// Which positions inside each row are eligible for masking. `All` is the
/// standard objective; `OddOnly` restricts corruption to odd (value) slots of
/// the synthetic key/value corpus, where the recoverability analysis is
/// exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskScope {
    #[default]
    All,
    OddOnly,
}

impl std::fmt::Display for MaskScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskScope::All => "all",
            MaskScope::OddOnly => "odd_only",
        })
    }
}

impl std::str::FromStr for MaskScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(MaskScope::All),
            "odd_only" => Ok(MaskScope::OddOnly),
            other => Err(Error::Config(format!(
                "unknown mask scope {other:?} (all|odd_only)"
            ))),
        }
    }
}

/// Masking recipe. Probabilities follow the BERT convention by default:
/// select 15% of eligible positions; replace 80% of selections with the mask
/// token, 10% with a random data token, and keep 10% unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmSpec {
    pub mask_rate: f64,
    pub p_mask_token: f64,
    pub p_random_token: f64,
    pub p_keep: f64,
    pub mask_token_id: u32,
    pub pad_token_id: u32,
    pub ignore_marker: u32,
    pub scope: MaskScope,
}

impl MlmSpec {
    /// BERT-style defaults for a vocabulary whose reserved ids start right
    /// after the data tokens.
    pub fn standard(mask_token_id: u32, pad_token_id: u32) -> Self {
        MlmSpec {
            mask_rate: 0.15,
            p_mask_token: 0.8,
            p_random_token: 0.1,
            p_keep: 0.1,
            mask_token_id,
            pad_token_id,
            ignore_marker: IGNORE_MARKER,
            scope: MaskScope::All,
        }
    }

    /// Data tokens occupy `[0, data_token_count)`; reserved ids live above.
    pub fn data_token_count(&self) -> u32 {
        self.mask_token_id.min(self.pad_token_id)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(Error::Config(format!("mask_rate {} outside (0, 1]", self.mask_rate)));
        }
        for (name, p) in [
            ("p_mask_token", self.p_mask_token),
            ("p_random_token", self.p_random_token),
            ("p_keep", self.p_keep),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        let total = self.p_mask_token + self.p_random_token + self.p_keep;
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("corruption probabilities sum to {total}, not 1")));
        }
        if self.data_token_count() == 0 {
            return Err(Error::Config("no data tokens below the reserved ids".into()));
        }
        if self.mask_token_id == self.pad_token_id {
            return Err(Error::Config("mask and pad tokens must differ".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Mlm,
    Clm,
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ObjectiveKind::Mlm => "mlm",
            ObjectiveKind::Clm => "clm",
        })
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlm" => Ok(ObjectiveKind::Mlm),
            "clm" => Ok(ObjectiveKind::Clm),
            other => Err(Error::Config(format!("unknown objective {other:?} (mlm|clm)"))),
        }
    }
}

/// One training batch: model inputs plus per-position prediction targets
/// (`ignore_marker` where no prediction is asked).
#[derive(Debug, Clone, PartialEq)]
pub struct LmBatch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub rows: usize,
    pub seq: usize,
    pub kind: ObjectiveKind,
}

impl LmBatch {
    fn new(
        inputs: Vec<u32>,
        targets: Vec<u32>,
        rows: usize,
        kind: ObjectiveKind,
        ignore: u32,
    ) -> Result<Self> {
        if rows == 0 || inputs.is_empty() || inputs.len() % rows != 0 {
            return Err(Error::Data(format!(
                "{} inputs do not tile into {rows} rows",
                inputs.len()
            )));
        }
        if inputs.len() != targets.len() {
            return Err(Error::Data("inputs/targets length mismatch".into()));
        }
        if !targets.iter().any(|&t| t != ignore) {
            return Err(Error::Data("batch predicts nothing".into()));
        }
        let seq = inputs.len() / rows;
        Ok(LmBatch { inputs, targets, rows, seq, kind })
    }

    pub fn n_predicted(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE_MARKER).count()
    }
}

fn eligible(pos_in_row: usize, scope: MaskScope) -> bool {
    match scope {
        MaskScope::All => true,
        MaskScope::OddOnly => pos_in_row % 2 == 1,
    }
}

/// One corruption pass. Draw order per position (fixed, so a seed pins the
/// whole batch): one selection draw for each eligible position; selected
/// positions then draw a corruption branch, and only the random-token branch
/// draws a replacement id.
fn mask_pass(
    tokens: &[u32],
    seq: usize,
    spec: &MlmSpec,
    rng: &mut ChaCha8Rng,
) -> (Vec<u32>, Vec<u32>, usize) {
    let mut inputs = tokens.to_vec();
    let mut targets = vec![spec.ignore_marker; tokens.len()];
    let mut selected = 0usize;
    for (i, input) in inputs.iter_mut().enumerate() {
        if !eligible(i % seq, spec.scope) {
            continue;
        }
        if rng.gen::<f64>() >= spec.mask_rate {
            continue;
        }
        selected += 1;
        targets[i] = tokens[i];
        corrupt(input, spec, rng);
    }
    (inputs, targets, selected)
}

fn corrupt(input: &mut u32, spec: &MlmSpec, rng: &mut ChaCha8Rng) {
    let branch: f64 = rng.gen();
    if branch < spec.p_mask_token {
        *input = spec.mask_token_id;
    } else if branch < spec.p_mask_token + spec.p_random_token {
        *input = rng.gen_range(0..spec.data_token_count());
    }
    // Otherwise the original token stays in place (still predicted).
}

/// BERT-style corruption of a (rows × seq) token block. A batch whose passes
/// select nothing is re-drawn once; if still empty, the first eligible
/// position is force-selected so every batch carries at least one target.
pub fn apply_mlm_masking(
    tokens: &[u32],
    rows: usize,
    spec: &MlmSpec,
    rng: &mut ChaCha8Rng,
) -> Result<LmBatch> {
    spec.validate()?;
    if rows == 0 || tokens.is_empty() || tokens.len() % rows != 0 {
        return Err(Error::Data(format!("{} tokens do not tile into {rows} rows", tokens.len())));
    }
    let seq = tokens.len() / rows;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= spec.data_token_count()) {
        return Err(Error::Data(format!("reserved or out-of-range id {bad} in masking input")));
    }

    let (mut inputs, mut targets, mut selected) = mask_pass(tokens, seq, spec, rng);
    if selected == 0 {
        (inputs, targets, selected) = mask_pass(tokens, seq, spec, rng);
    }
    if selected == 0 {
        let first = (0..tokens.len())
            .find(|&i| eligible(i % seq, spec.scope))
            .ok_or_else(|| Error::Data("no position is eligible for masking".into()))?;
        targets[first] = tokens[first];
        corrupt(&mut inputs[first], spec, rng);
    }
    LmBatch::new(inputs, targets, rows, ObjectiveKind::Mlm, spec.ignore_marker)
}

/// Next-token objective: inputs drop the last token of each row, targets drop
/// the first, so every remaining position is predicted.
pub fn clm_shift(tokens: &[u32], rows: usize) -> Result<LmBatch> {
    if rows == 0 || tokens.is_empty() || tokens.len() % rows != 0 {
        return Err(Error::Data(format!("{} tokens do not tile into {rows} rows", tokens.len())));
    }
    let seq = tokens.len() / rows;
    if seq < 2 {
        return Err(Error::Data(format!("causal shift needs seq >= 2, got {seq}")));
    }
    let mut inputs = Vec::with_capacity(rows * (seq - 1));
    let mut targets = Vec::with_capacity(rows * (seq - 1));
    for r in 0..rows {
        let row = &tokens[r * seq..(r + 1) * seq];
        inputs.extend_from_slice(&row[..seq - 1]);
        targets.extend_from_slice(&row[1..]);
    }
    LmBatch::new(inputs, targets, rows, ObjectiveKind::Clm, IGNORE_MARKER)
}

/// Evaluation-mode loss: mean natural-log NLL over predicted positions, plus
/// the number of predictions it averages.
pub fn batch_loss<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    batch: &LmBatch,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params);
    let logits = model_forward(&mut tape, &binding, config, &batch.inputs, batch.rows, None)?;
    let loss = tape.cross_entropy_logits(logits, &batch.targets, IGNORE_MARKER)?;
    Ok((loss_as_f64(tape.scalar_value(loss)), batch.n_predicted()))
}

fn loss_as_f64<T: Scalar>(v: T) -> f64 {
    v.as_f64()
}

/// Per-position natural-log NLL at 64-bit, `NaN` at ignored positions.
/// Computed from evaluation-mode logits with an explicit log-sum-exp, so it
/// doubles as an independent check on the tape's cross-entropy.
pub fn per_position_nll<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    batch: &LmBatch,
) -> Result<Vec<f64>> {
    let logits = forward_logits(params, config, &batch.inputs, batch.rows)?;
    let v = config.vocab_size;
    let mut out = Vec::with_capacity(batch.targets.len());
    for (i, &target) in batch.targets.iter().enumerate() {
        if target == IGNORE_MARKER {
            out.push(f64::NAN);
            continue;
        }
        if target as usize >= v {
            return Err(Error::Data(format!("target {target} outside vocab {v}")));
        }
        let row: Vec<f64> = logits.values()[i * v..(i + 1) * v].iter().map(|x| x.as_f64()).collect();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
        out.push(lse - row[target as usize]);
    }
    Ok(out)
}
