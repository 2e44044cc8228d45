//! Transformer encoder with per-layer attention-mask scheduling, parameter
//! management, and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod mask;
pub mod params;

pub use checkpoint::{
    load_checkpoint, rebuild_adam, rebuild_params, save_checkpoint, CheckpointData,
};
pub use config::{preset, ModelConfig, PositionEncodingKind, Precision, Preset};
pub use forward::{
    bind_params, embed_input, encoder_layer_forward, forward_logits, harvest_grads,
    model_forward, multi_head_attention, LayerBinding, ParamBinding, LN_EPS,
};
pub use mask::{build_attention_mask, MaskPolicy, MaskSchedule};
pub use params::{sinusoidal_pe, LayerParams, ModelParams};
