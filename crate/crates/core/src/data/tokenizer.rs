//! Byte-level tokenizer: every byte value is its own token, with three
//! reserved ids above the byte range.

use crate::error::{Error, Result};

pub const PAD_TOKEN: u32 = 256;
pub const MASK_TOKEN: u32 = 257;
pub const BOS_TOKEN: u32 = 258;
/// 256 byte values plus the reserved ids.
pub const BYTE_VOCAB_SIZE: usize = 259;

/// Stateless byte tokenizer; encode/decode are exact inverses on arbitrary
/// byte strings.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        BYTE_VOCAB_SIZE
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        text.iter().map(|&b| b as u32).collect()
    }

    /// Rejects reserved ids: they never correspond to bytes.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        ids.iter()
            .map(|&id| {
                u8::try_from(id)
                    .map_err(|_| Error::Data(format!("id {id} is reserved or out of range")))
            })
            .collect()
    }
}
