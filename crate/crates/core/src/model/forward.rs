//! Forward pass: embedding, masked multi-head attention, post-LN encoder
//! layers, and the tied-embedding output head.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::{MaskPlane, Tensor};

/// LayerNorm variance-stabilizing constant.
pub const LN_EPS: f64 = 1e-5;

/// Tape node ids for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerBinding {
    pub w_q: NodeId,
    pub b_q: NodeId,
    pub w_k: NodeId,
    pub b_k: NodeId,
    pub w_v: NodeId,
    pub b_v: NodeId,
    pub w_o: NodeId,
    pub b_o: NodeId,
    pub w_ffn1: NodeId,
    pub b_ffn1: NodeId,
    pub w_ffn2: NodeId,
    pub b_ffn2: NodeId,
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
}

/// Every parameter placed on a tape exactly once. The token embedding node
/// serves both the input embedding and the tied output head, so its gradient
/// accumulates contributions from both uses.
#[derive(Debug, Clone)]
pub struct ParamBinding {
    pub token_embedding: NodeId,
    pub position_embedding: Option<NodeId>,
    pub layers: Vec<LayerBinding>,
    pub output_bias: NodeId,
}

pub fn bind_params<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> ParamBinding {
    let token_embedding = tape.leaf(&params.token_embedding);
    let position_embedding = params.position_embedding.as_ref().map(|pe| tape.leaf(pe));
    let layers = params
        .layers
        .iter()
        .map(|l| LayerBinding {
            w_q: tape.leaf(&l.w_q),
            b_q: tape.leaf(&l.b_q),
            w_k: tape.leaf(&l.w_k),
            b_k: tape.leaf(&l.b_k),
            w_v: tape.leaf(&l.w_v),
            b_v: tape.leaf(&l.b_v),
            w_o: tape.leaf(&l.w_o),
            b_o: tape.leaf(&l.b_o),
            w_ffn1: tape.leaf(&l.w_ffn1),
            b_ffn1: tape.leaf(&l.b_ffn1),
            w_ffn2: tape.leaf(&l.w_ffn2),
            b_ffn2: tape.leaf(&l.b_ffn2),
            ln1_gamma: tape.leaf(&l.ln1_gamma),
            ln1_beta: tape.leaf(&l.ln1_beta),
            ln2_gamma: tape.leaf(&l.ln2_gamma),
            ln2_beta: tape.leaf(&l.ln2_beta),
        })
        .collect();
    let output_bias = tape.leaf(&params.output_bias);
    ParamBinding { token_embedding, position_embedding, layers, output_bias }
}

/// Pushes gradients captured on the tape back into the parameter tensors'
/// grad buffers (accumulating, in canonical order).
pub fn harvest_grads<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &ParamBinding,
    params: &mut ModelParams<T>,
) -> Result<()> {
    let mut ids: Vec<NodeId> = vec![binding.token_embedding];
    if let Some(pe) = binding.position_embedding {
        ids.push(pe);
    }
    for l in &binding.layers {
        ids.extend_from_slice(&[
            l.w_q, l.b_q, l.w_k, l.b_k, l.w_v, l.b_v, l.w_o, l.b_o, l.w_ffn1, l.b_ffn1, l.w_ffn2,
            l.b_ffn2, l.ln1_gamma, l.ln1_beta, l.ln2_gamma, l.ln2_beta,
        ]);
    }
    ids.push(binding.output_bias);

    for ((name, tensor), id) in params.named_mut().into_iter().zip(ids) {
        if !tensor.requires_grad() {
            continue;
        }
        match tape.take_grad(id) {
            Some(g) => tensor.accumulate_grad(&g)?,
            None => {
                return Err(Error::Tape(format!("no gradient reached parameter {name}")));
            }
        }
    }
    Ok(())
}

/// Token embedding lookup plus (when configured) position embeddings, shaped
/// (batch, n, d_model).
pub fn embed_input<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &ParamBinding,
    config: &ModelConfig,
    tokens: &[u32],
    batch: usize,
) -> Result<NodeId> {
    if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
        return Err(Error::Shape(format!(
            "{} tokens do not tile into batch {batch}",
            tokens.len()
        )));
    }
    let n = tokens.len() / batch;
    if n > config.max_seq_len {
        return Err(Error::Shape(format!(
            "sequence length {n} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    let mut x = tape.gather_rows(binding.token_embedding, tokens)?;
    if let Some(pe) = binding.position_embedding {
        let positions: Vec<u32> =
            (0..batch).flat_map(|_| 0..n as u32).collect();
        let p = tape.gather_rows(pe, &positions)?;
        x = tape.add(x, p)?;
    }
    tape.reshape(x, vec![batch, n, config.d_model])
}

/// Scaled dot-product attention over `n_heads` heads with a per-layer
/// attention-allowance plane; input and output are (batch, n, d_model).
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    layer: &LayerBinding,
    x: NodeId,
    mask: &Arc<MaskPlane>,
    n_heads: usize,
) -> Result<NodeId> {
    let d = *tape.shape(x).last().unwrap();
    let d_head = d / n_heads;

    let q = tape.matmul(x, layer.w_q)?;
    let q = tape.add_bias(q, layer.b_q)?;
    let k = tape.matmul(x, layer.w_k)?;
    let k = tape.add_bias(k, layer.b_k)?;
    let v = tape.matmul(x, layer.w_v)?;
    let v = tape.add_bias(v, layer.b_v)?;

    let qh = tape.split_heads(q, n_heads)?;
    let kh = tape.split_heads(k, n_heads)?;
    let vh = tape.split_heads(v, n_heads)?;

    let scores = tape.matmul_transpose_b(qh, kh)?;
    let scaled = tape.scale(scores, T::from_f64((d_head as f64).sqrt().recip()));
    let probs = tape.softmax_masked(scaled, mask)?;
    let context = tape.matmul(probs, vh)?;
    let merged = tape.merge_heads(context, n_heads)?;

    let out = tape.matmul(merged, layer.w_o)?;
    tape.add_bias(out, layer.b_o)
}

fn maybe_dropout<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    match rng.as_deref_mut() {
        Some(r) if rate > 0.0 => tape.dropout(x, rate, r),
        _ => Ok(x),
    }
}

/// One post-LN encoder layer: y = LN(x + Attn(x)), z = LN(y + Ffn(y)), with
/// GELU inside the feed-forward block. Dropout (training mode only) hits each
/// sublayer output before its residual add.
pub fn encoder_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    layer: &LayerBinding,
    x: NodeId,
    mask: &Arc<MaskPlane>,
    n_heads: usize,
    dropout: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let eps = T::from_f64(LN_EPS);

    let attn = multi_head_attention(tape, layer, x, mask, n_heads)?;
    let attn = maybe_dropout(tape, attn, dropout, rng)?;
    let res1 = tape.add(x, attn)?;
    let y = tape.layer_norm(res1, layer.ln1_gamma, layer.ln1_beta, eps)?;

    let h = tape.matmul(y, layer.w_ffn1)?;
    let h = tape.add_bias(h, layer.b_ffn1)?;
    let h = tape.gelu(h);
    let f = tape.matmul(h, layer.w_ffn2)?;
    let f = tape.add_bias(f, layer.b_ffn2)?;
    let f = maybe_dropout(tape, f, dropout, rng)?;
    let res2 = tape.add(y, f)?;
    tape.layer_norm(res2, layer.ln2_gamma, layer.ln2_beta, eps)
}

/// Full forward pass to logits of shape (batch·n, vocab_size), with the
/// output head tied to the token embedding. `dropout_rng: Some(..)` selects
/// training mode (dropout active at `config.dropout`); `None` is evaluation
/// mode (dropout off).
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binding: &ParamBinding,
    config: &ModelConfig,
    tokens: &[u32],
    batch: usize,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    if binding.layers.len() != config.n_layers {
        return Err(Error::Config(format!(
            "binding has {} layers, config wants {}",
            binding.layers.len(),
            config.n_layers
        )));
    }
    let mut x = embed_input(tape, binding, config, tokens, batch)?;
    let n = tokens.len() / batch;
    let planes = config.mask_schedule.planes(n)?;

    x = maybe_dropout(tape, x, config.dropout, &mut dropout_rng)?;
    for (layer, plane) in binding.layers.iter().zip(planes.iter()) {
        x = encoder_layer_forward(
            tape,
            layer,
            x,
            plane,
            config.n_heads,
            config.dropout,
            &mut dropout_rng,
        )?;
    }

    let d = config.d_model;
    let h = tape.reshape(x, vec![tokens.len(), d])?;
    let logits = tape.matmul_transpose_b(h, binding.token_embedding)?;
    tape.add_bias(logits, binding.output_bias)
}

/// Evaluation-mode forward pass on a throwaway tape; returns the logits as a
/// plain (batch·n, vocab_size) tensor.
pub fn forward_logits<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    tokens: &[u32],
    batch: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params);
    let logits = model_forward(&mut tape, &binding, config, tokens, batch, None)?;
    Tensor::new(tape.shape(logits).to_vec(), tape.values(logits).to_vec())
}
