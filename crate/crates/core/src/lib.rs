//! A small language-model training lab built around one question: how much of
//! a transformer encoder's sense of word order can come from causal attention
//! masks instead of position embeddings?
//!
//! The crate provides a scalar-generic tensor core with reverse-mode
//! autodiff, a transformer whose per-layer attention masks and position
//! encoding are independently configurable, MLM/CLM objectives, a
//! deterministic data pipeline with a synthetic order-sensitive corpus, a
//! trainer with loss-curve stage analysis, and probes that measure
//! permutation sensitivity directly.

pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod probe;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{MaskPlane, Tensor};

/// Default training element type.
pub type TensorF32 = Tensor<f32>;
/// Element type for gradient checks and oracle comparisons.
pub type TensorF64 = Tensor<f64>;

pub(crate) mod util {
    /// splitmix64; used to derive independent RNG streams from (seed, salt,
    /// index) triples so that e.g. step-local masking seeds never collide
    /// with batch-shuffle seeds.
    pub fn mix_seed(base: u64, salt: u64, index: u64) -> u64 {
        let mut z = base ^ salt.rotate_left(17) ^ index.rotate_left(41);
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

}
