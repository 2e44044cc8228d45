//! Parameter storage, initialization, and the canonical parameter ordering
//! shared by the optimizer and the checkpoint format.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, PositionEncodingKind};
use crate::scalar::Scalar;
use crate::tensor::optim::ParamSlot;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LayerParams<T: Scalar> {
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub w_ffn1: Tensor<T>,
    pub b_ffn1: Tensor<T>,
    pub w_ffn2: Tensor<T>,
    pub b_ffn2: Tensor<T>,
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub token_embedding: Tensor<T>,
    /// Present iff pe_kind != Absent; requires_grad is false for Sinusoidal.
    pub position_embedding: Option<Tensor<T>>,
    pub layers: Vec<LayerParams<T>>,
    /// Bias of the tied output head (logits = h · TEᵀ + bias).
    pub output_bias: Tensor<T>,
}

/// Fixed interleaved table: row i holds sin(i·ω_j) at column 2j and
/// cos(i·ω_j) at column 2j+1 with ω_j = 10000^(-2j/d_model). Computed in f64
/// regardless of T.
pub fn sinusoidal_pe<T: Scalar>(max_seq_len: usize, d_model: usize) -> Result<Tensor<T>> {
    if d_model % 2 != 0 {
        return Err(Error::Config(format!("sinusoidal pe needs even d_model, got {d_model}")));
    }
    let mut values = Vec::with_capacity(max_seq_len * d_model);
    for i in 0..max_seq_len {
        for j in 0..d_model / 2 {
            let angle = i as f64 / 10000f64.powf(2.0 * j as f64 / d_model as f64);
            values.push(T::from_f64(angle.sin()));
            values.push(T::from_f64(angle.cos()));
        }
    }
    Tensor::new(vec![max_seq_len, d_model], values)
}

impl<T: Scalar> ModelParams<T> {
    /// Draws projection and embedding weights from normal(0, 0.02), zeros
    /// biases, and sets LayerNorm to gamma=1/beta=0. The draw order is the
    /// canonical parameter order, so a seed pins every weight bit.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let v = config.vocab_size;

        let token_embedding = Tensor::randn([v, d], INIT_STD, &mut rng)?.with_grad(true);
        let position_embedding = match config.pe_kind {
            PositionEncodingKind::Absent => None,
            PositionEncodingKind::Learnable => {
                Some(Tensor::randn([config.max_seq_len, d], INIT_STD, &mut rng)?.with_grad(true))
            }
            PositionEncodingKind::Sinusoidal => {
                Some(sinusoidal_pe(config.max_seq_len, d)?.with_grad(false))
            }
        };

        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                w_q: Tensor::randn([d, d], INIT_STD, &mut rng)?.with_grad(true),
                b_q: Tensor::zeros([d])?.with_grad(true),
                w_k: Tensor::randn([d, d], INIT_STD, &mut rng)?.with_grad(true),
                b_k: Tensor::zeros([d])?.with_grad(true),
                w_v: Tensor::randn([d, d], INIT_STD, &mut rng)?.with_grad(true),
                b_v: Tensor::zeros([d])?.with_grad(true),
                w_o: Tensor::randn([d, d], INIT_STD, &mut rng)?.with_grad(true),
                b_o: Tensor::zeros([d])?.with_grad(true),
                w_ffn1: Tensor::randn([d, config.d_ffn], INIT_STD, &mut rng)?.with_grad(true),
                b_ffn1: Tensor::zeros([config.d_ffn])?.with_grad(true),
                w_ffn2: Tensor::randn([config.d_ffn, d], INIT_STD, &mut rng)?.with_grad(true),
                b_ffn2: Tensor::zeros([d])?.with_grad(true),
                ln1_gamma: Tensor::full([d], T::one())?.with_grad(true),
                ln1_beta: Tensor::zeros([d])?.with_grad(true),
                ln2_gamma: Tensor::full([d], T::one())?.with_grad(true),
                ln2_beta: Tensor::zeros([d])?.with_grad(true),
            });
        }

        let output_bias = Tensor::zeros([v])?.with_grad(true);
        Ok(ModelParams { token_embedding, position_embedding, layers, output_bias })
    }

    /// Canonical (name, tensor) listing; checkpoint layout and optimizer
    /// state both follow this order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![("te".into(), &self.token_embedding)];
        if let Some(pe) = &self.position_embedding {
            out.push(("pe".into(), pe));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in [
                ("wq", &l.w_q),
                ("bq", &l.b_q),
                ("wk", &l.w_k),
                ("bk", &l.b_k),
                ("wv", &l.w_v),
                ("bv", &l.b_v),
                ("wo", &l.w_o),
                ("bo", &l.b_o),
                ("ffn1_w", &l.w_ffn1),
                ("ffn1_b", &l.b_ffn1),
                ("ffn2_w", &l.w_ffn2),
                ("ffn2_b", &l.b_ffn2),
                ("ln1_g", &l.ln1_gamma),
                ("ln1_b", &l.ln1_beta),
                ("ln2_g", &l.ln2_gamma),
                ("ln2_b", &l.ln2_beta),
            ] {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("out_bias".into(), &self.output_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> =
            vec![("te".into(), &mut self.token_embedding)];
        if let Some(pe) = &mut self.position_embedding {
            out.push(("pe".into(), pe));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in [
                ("wq", &mut l.w_q),
                ("bq", &mut l.b_q),
                ("wk", &mut l.w_k),
                ("bk", &mut l.b_k),
                ("wv", &mut l.w_v),
                ("bv", &mut l.b_v),
                ("wo", &mut l.w_o),
                ("bo", &mut l.b_o),
                ("ffn1_w", &mut l.w_ffn1),
                ("ffn1_b", &mut l.b_ffn1),
                ("ffn2_w", &mut l.w_ffn2),
                ("ffn2_b", &mut l.b_ffn2),
                ("ln1_g", &mut l.ln1_gamma),
                ("ln1_b", &mut l.ln1_beta),
                ("ln2_g", &mut l.ln2_gamma),
                ("ln2_b", &mut l.ln2_beta),
            ] {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("out_bias".into(), &mut self.output_bias));
        out
    }

    /// Trainable slots in canonical order. Weight decay applies to weight
    /// matrices and embeddings only, never to biases or LayerNorm affine
    /// parameters; the frozen sinusoidal table is excluded entirely.
    pub fn slots(&mut self) -> Vec<ParamSlot<'_, T>> {
        self.named_mut()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(name, tensor)| {
                let decay = decays(&name);
                ParamSlot { tensor, decay }
            })
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.named()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_mut() {
            t.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

/// Decay rule keyed off the canonical name: matrices and embeddings decay,
/// biases and LayerNorm parameters do not.
fn decays(name: &str) -> bool {
    matches!(name, "te" | "pe")
        || name.ends_with(".wq")
        || name.ends_with(".wk")
        || name.ends_with(".wv")
        || name.ends_with(".wo")
        || name.ends_with(".ffn1_w")
        || name.ends_with(".ffn2_w")
}
