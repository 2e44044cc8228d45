//! Binary corpus shards: a flat token stream plus document boundaries, with a
//! fixed little-endian on-disk codec.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes   b"MLMSHRD1"
//! version          u32       currently 1
//! vocab_size       u32
//! token_count      u64
//! boundary_count   u64
//! tokens           u32 * token_count
//! boundaries       u64 * boundary_count
//! ```
//!
//! Boundaries are cumulative end offsets of documents (strictly increasing,
//! final one at most `token_count`). Decoding is strict: wrong magic, a
//! version we do not know, truncation, trailing bytes, or invariant
//! violations are all errors.

use crate::data::tokenizer::ByteTokenizer;
use crate::error::{Error, Result};

pub const SHARD_MAGIC: &[u8; 8] = b"MLMSHRD1";
pub const SHARD_VERSION: u32 = 1;

/// Hard ceiling so a corrupted header cannot trigger a huge allocation.
const MAX_COUNT: u64 = 1 << 33;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusShard {
    vocab_size: u32,
    tokens: Vec<u32>,
    boundaries: Vec<u64>,
}

impl CorpusShard {
    /// Builds a shard, checking the structural invariants.
    pub fn new(vocab_size: u32, tokens: Vec<u32>, boundaries: Vec<u64>) -> Result<Self> {
        Self::build(vocab_size, tokens, boundaries).map_err(Error::Data)
    }

    fn build(
        vocab_size: u32,
        tokens: Vec<u32>,
        boundaries: Vec<u64>,
    ) -> std::result::Result<Self, String> {
        if vocab_size == 0 {
            return Err("shard vocab_size must be positive".into());
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(format!(
                "token id {bad} out of range for vocab size {vocab_size}"
            ));
        }
        let mut prev = 0u64;
        for &b in &boundaries {
            if b <= prev {
                return Err(format!(
                    "document boundaries must be strictly increasing, got {b} after {prev}"
                ));
            }
            prev = b;
        }
        if prev > tokens.len() as u64 {
            return Err(format!(
                "final boundary {prev} exceeds token count {}",
                tokens.len()
            ));
        }
        Ok(Self {
            vocab_size,
            tokens,
            boundaries,
        })
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn boundaries(&self) -> &[u64] {
        &self.boundaries
    }

    pub fn n_documents(&self) -> usize {
        self.boundaries.len()
    }

    /// Serializes to the on-disk codec.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.tokens.len() + 8 * self.boundaries.len());
        out.extend_from_slice(SHARD_MAGIC);
        out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        out.extend_from_slice(&self.vocab_size.to_le_bytes());
        out.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.boundaries.len() as u64).to_le_bytes());
        for &t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        for &b in &self.boundaries {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode(bytes).map_err(Error::Data)
    }

    fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != SHARD_MAGIC {
            return Err(format!("bad shard magic {magic:?}, expected {SHARD_MAGIC:?}"));
        }
        let version = cur.u32()?;
        if version != SHARD_VERSION {
            return Err(format!(
                "unsupported shard version {version}, expected {SHARD_VERSION}"
            ));
        }
        let vocab_size = cur.u32()?;
        let token_count = cur.u64()?;
        let boundary_count = cur.u64()?;
        if token_count > MAX_COUNT || boundary_count > MAX_COUNT {
            return Err(format!(
                "implausible counts (tokens {token_count}, boundaries {boundary_count})"
            ));
        }
        let mut tokens = Vec::with_capacity(token_count as usize);
        for _ in 0..token_count {
            tokens.push(cur.u32()?);
        }
        let mut boundaries = Vec::with_capacity(boundary_count as usize);
        for _ in 0..boundary_count {
            boundaries.push(cur.u64()?);
        }
        if cur.pos != bytes.len() {
            return Err(format!(
                "{} trailing bytes after shard payload",
                bytes.len() - cur.pos
            ));
        }
        Self::build(vocab_size, tokens, boundaries)
    }

    pub fn write_to_path(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|reason| Error::format(path, reason))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err("shard file is truncated".into());
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Tokenizes raw text into a shard: one document per `\n`-separated line,
/// empty lines skipped (a boundary must advance past the previous one, so an
/// empty document has no representation). Bytes are kept as-is; there is no
/// `\r` handling and no UTF-8 requirement.
pub fn binarize(text: &[u8]) -> Result<CorpusShard> {
    let tokenizer = ByteTokenizer;
    let mut tokens = Vec::new();
    let mut boundaries = Vec::new();
    for line in text.split(|&b| b == b'\n') {
        if line.is_empty() {
            continue;
        }
        tokens.extend(tokenizer.encode(line));
        boundaries.push(tokens.len() as u64);
    }
    CorpusShard::new(tokenizer.vocab_size() as u32, tokens, boundaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_shard() -> CorpusShard {
        CorpusShard::new(259, vec![10, 20, 30, 40, 50], vec![2, 5]).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let shard = sample_shard();
        let bytes = shard.to_bytes();
        let reread = CorpusShard::from_bytes(&bytes).unwrap();
        assert_eq!(reread, shard);
        assert_eq!(reread.to_bytes(), bytes);
    }

    #[test]
    fn construction_rejects_invariant_violations() {
        assert!(CorpusShard::new(259, vec![259], vec![1]).is_err());
        assert!(CorpusShard::new(259, vec![1, 2], vec![2, 2]).is_err());
        assert!(CorpusShard::new(259, vec![1, 2], vec![2, 1]).is_err());
        assert!(CorpusShard::new(259, vec![1, 2], vec![3]).is_err());
        assert!(CorpusShard::new(0, vec![], vec![]).is_err());
        assert!(CorpusShard::new(259, vec![1, 2], vec![0]).is_err());
    }

    #[test]
    fn decode_rejects_bad_magic_truncation_and_trailing_bytes() {
        let bytes = sample_shard().to_bytes();

        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xff;
        assert!(CorpusShard::from_bytes(&bad_magic).is_err());

        for cut in [4, 10, 20, bytes.len() - 3] {
            assert!(CorpusShard::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(CorpusShard::from_bytes(&extra).is_err());

        let mut bad_version = bytes;
        bad_version[8] = 2;
        assert!(CorpusShard::from_bytes(&bad_version).is_err());
    }

    #[test]
    fn file_round_trip_preserves_bytes() {
        let dir = std::env::temp_dir().join(format!("shard-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sample.bin");
        let shard = sample_shard();
        shard.write_to_path(&path).unwrap();
        let reread = CorpusShard::read_from_path(&path).unwrap();
        assert_eq!(reread, shard);
        assert_eq!(std::fs::read(&path).unwrap(), shard.to_bytes());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn binarize_splits_documents_on_newlines() {
        let shard = binarize(b"abc\ndef\n").unwrap();
        assert_eq!(shard.tokens(), &[97, 98, 99, 100, 101, 102]);
        assert_eq!(shard.boundaries(), &[3, 6]);
        assert_eq!(shard.vocab_size(), 259);
    }

    #[test]
    fn binarize_skips_empty_lines_and_accepts_missing_final_newline() {
        let shard = binarize(b"ab\n\n\ncd").unwrap();
        assert_eq!(shard.tokens(), &[97, 98, 99, 100]);
        assert_eq!(shard.boundaries(), &[2, 4]);
    }

    #[test]
    fn binarize_of_empty_input_is_a_valid_empty_shard() {
        let shard = binarize(b"").unwrap();
        assert!(shard.tokens().is_empty());
        assert!(shard.boundaries().is_empty());
        assert_eq!(CorpusShard::from_bytes(&shard.to_bytes()).unwrap(), shard);
    }

    #[test]
    fn binarize_twice_is_byte_identical() {
        let text = b"hello world\nsecond document\nthird one here\n";
        assert_eq!(
            binarize(text).unwrap().to_bytes(),
            binarize(text).unwrap().to_bytes()
        );
    }
}
