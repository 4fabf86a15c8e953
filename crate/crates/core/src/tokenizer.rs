//! Hashing word tokenizer.
//!
//! Lowercases, splits on anything that is not alphanumeric and maps each
//! word to `FIRST_TEXT_TOKEN + fnv1a(word) % (vocab_size - FIRST_TEXT_TOKEN)`.

use crate::error::{Error, Result};
use crate::scoring::{TokenId, FIRST_TEXT_TOKEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashTokenizer {
    vocab_size: usize,
}

impl HashTokenizer {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size <= FIRST_TEXT_TOKEN as usize {
            return Err(Error::InvalidConfig(format!(
                "vocab size must exceed {FIRST_TEXT_TOKEN} reserved ids, got {vocab_size}"
            )));
        }
        Ok(HashTokenizer { vocab_size })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let buckets = (self.vocab_size - FIRST_TEXT_TOKEN as usize) as u64;
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| {
                let word = w.to_lowercase();
                FIRST_TEXT_TOKEN + (fnv1a(word.as_bytes()) % buckets) as TokenId
            })
            .collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}
