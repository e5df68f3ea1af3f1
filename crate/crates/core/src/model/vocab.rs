//! Hashing tokenizer and the `[text] is [MASK] .` template.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const LIT_IS: u32 = 2;
pub const LIT_DOT: u32 = 3;
/// First id of the hashed range.
pub const FIRST_HASHED: u32 = 4;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the UTF-8 bytes of `s`.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: u32,
}

impl Vocab {
    /// The hashed range `[4, size)` must be nonempty.
    pub fn new(size: u32) -> Result<Self> {
        if size <= FIRST_HASHED {
            return Err(Error::invalid(format!(
                "vocabulary size must exceed {FIRST_HASHED}, got {size}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    /// Id of a single (already lowercased) word.
    pub fn word_id(&self, word: &str) -> u32 {
        let span = u64::from(self.size - FIRST_HASHED);
        FIRST_HASHED + (fnv1a64(word) % span) as u32
    }
}

/// Lowercases, splits on whitespace, hashes each word and keeps the first
/// `max_len` ids.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<Vec<u32>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let lowered = text.to_lowercase();
    let ids: Vec<u32> = lowered
        .split_whitespace()
        .take(max_len)
        .map(|w| vocab.word_id(w))
        .collect();
    if ids.is_empty() {
        return Err(Error::invalid("text has no words"));
    }
    Ok(ids)
}

/// Token ids of one templated input. The `prompt_len` soft positions are not
/// stored here; they are prepended at forward time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplatedSeq {
    pub token_ids: Vec<u32>,
    /// Index of `[MASK]` in the full (prompt + tokens) sequence.
    pub mask_index: usize,
    pub prompt_len: usize,
}

impl TemplatedSeq {
    pub fn text_len(&self) -> usize {
        self.token_ids.len() - 3
    }

    /// Length of the full sequence including soft positions.
    pub fn total_len(&self) -> usize {
        self.prompt_len + self.token_ids.len()
    }
}

/// Appends `is [MASK] .` to the text ids. Ids beyond `max_len` are dropped.
pub fn apply_template(token_ids: &[u32], prompt_len: usize, max_len: usize) -> Result<TemplatedSeq> {
    if prompt_len == 0 {
        return Err(Error::invalid("prompt length must be at least 1"));
    }
    if token_ids.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    let text = &token_ids[..token_ids.len().min(max_len)];
    let mut ids = Vec::with_capacity(text.len() + 3);
    ids.extend_from_slice(text);
    ids.extend_from_slice(&[LIT_IS, MASK, LIT_DOT]);
    Ok(TemplatedSeq {
        token_ids: ids,
        mask_index: prompt_len + text.len() + 1,
        prompt_len,
    })
}

/// `tokenize` followed by `apply_template`.
pub fn encode_text(text: &str, vocab: &Vocab, prompt_len: usize, max_len: usize) -> Result<TemplatedSeq> {
    let ids = tokenize(text, vocab, max_len)?;
    apply_template(&ids, prompt_len, max_len)
}
