//! Data pipeline: byte tokenizer, binary corpus shards, deterministic
//! batching, and the synthetic key/value corpus.

pub mod batches;
pub mod shard;
pub mod synthetic;
pub mod tokenizer;

pub use batches::{epoch_order, make_batches, window, window_count, EpochBatches};
pub use shard::{binarize, CorpusShard, SHARD_MAGIC, SHARD_VERSION};
pub use synthetic::{generate_synthetic, pairing_from_seed, SyntheticSpec};
pub use tokenizer::{ByteTokenizer, BOS_TOKEN, BYTE_VOCAB_SIZE, MASK_TOKEN, PAD_TOKEN};
