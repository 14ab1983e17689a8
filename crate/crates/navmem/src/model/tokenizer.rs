//! Deterministic hash tokenizer.
//!
//! Splits on whitespace and punctuation: runs of alphanumeric characters
//! form word pieces, every other non-whitespace character is a piece of
//! its own. Each piece maps to a vocabulary id by seeded FNV-1a hashing
//! into `vocab_size` buckets. The original text travels with the token
//! ids, so detokenization is exact.

use serde::{Deserialize, Serialize};

/// A tokenized piece of text. `tokens` are vocabulary ids, `source_text`
/// is the exact input, kept so the mapping is reversible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub source_text: String,
}

impl TokenSeq {
    pub fn empty() -> Self {
        TokenSeq {
            tokens: Vec::new(),
            source_text: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Concatenate two sequences produced by the same tokenizer.
    ///
    /// Only valid when `other` starts at a piece boundary relative to
    /// `self` (whitespace or punctuation on either side of the seam),
    /// otherwise the token ids would not match a fresh tokenization of
    /// the joined text. All rendered-text deltas in this crate end and
    /// start on punctuation, which satisfies the condition.
    pub fn concat(&self, other: &TokenSeq) -> TokenSeq {
        let mut tokens = self.tokens.clone();
        tokens.extend_from_slice(&other.tokens);
        TokenSeq {
            tokens,
            source_text: format!("{}{}", self.source_text, other.source_text),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    vocab_size: u32,
    seed: u64,
}

impl Tokenizer {
    pub fn new(vocab_size: u32, seed: u64) -> Self {
        assert!(vocab_size >= 1, "vocab_size must be >= 1");
        Tokenizer { vocab_size, seed }
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn tokenize(&self, text: &str) -> TokenSeq {
        let mut tokens = Vec::new();
        let mut word = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                word.push(ch);
            } else {
                if !word.is_empty() {
                    tokens.push(self.piece_id(&word));
                    word.clear();
                }
                if !ch.is_whitespace() {
                    tokens.push(self.piece_id(ch.encode_utf8(&mut [0u8; 4])));
                }
            }
        }
        if !word.is_empty() {
            tokens.push(self.piece_id(&word));
        }
        TokenSeq {
            tokens,
            source_text: text.to_string(),
        }
    }

    pub fn detokenize<'a>(&self, seq: &'a TokenSeq) -> &'a str {
        &seq.source_text
    }

    /// Number of tokens `text` produces, without building the sequence.
    pub fn count(&self, text: &str) -> usize {
        let mut n = 0usize;
        let mut in_word = false;
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                if !in_word {
                    n += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
                if !ch.is_whitespace() {
                    n += 1;
                }
            }
        }
        n
    }

    fn piece_id(&self, piece: &str) -> u32 {
        (fnv1a64(self.seed, piece.as_bytes()) % u64::from(self.vocab_size)) as u32
    }
}

/// FNV-1a over the seed's little-endian bytes followed by `data`.
/// Fixed offset basis and prime, so ids are stable across runs and
/// platforms (unlike `DefaultHasher`).
pub(crate) fn fnv1a64(seed: u64, data: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes().iter().chain(data.iter()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::new(4096, 7)
    }

    #[test]
    fn empty_text_tokenizes_to_empty_sequence() {
        assert!(tok().tokenize("").is_empty());
        assert!(tok().tokenize("   ").is_empty());
    }

    #[test]
    fn repeated_word_maps_to_equal_ids() {
        let seq = tok().tokenize("sofa sofa");
        assert_eq!(seq.tokens.len(), 2);
        assert_eq!(seq.tokens[0], seq.tokens[1]);
    }

    #[test]
    fn splits_words_and_punctuation() {
        // Reference recomputation of the seeded hash, written out
        // independently of Tokenizer::piece_id.
        let t = tok();
        let seq = t.tokenize("object: sofa,");
        let expect: Vec<u32> = ["object", ":", "sofa", ","]
            .iter()
            .map(|p| {
                let mut h: u64 = 0xcbf29ce484222325;
                for b in 7u64.to_le_bytes().iter().chain(p.as_bytes()) {
                    h ^= u64::from(*b);
                    h = h.wrapping_mul(0x100000001b3);
                }
                (h % 4096) as u32
            })
            .collect();
        assert_eq!(seq.tokens, expect);
    }

    #[test]
    fn roundtrip_through_source_text() {
        let t = tok();
        let seq = t.tokenize("Object Group 1: {object: sofa, position:(131,94,22)}");
        let again = t.tokenize(t.detokenize(&seq));
        assert_eq!(seq, again);
    }

    #[test]
    fn count_matches_tokenize() {
        let t = tok();
        for text in [
            "",
            "a",
            "{object: bathtubs, position:(54,71,55)}, {object: toilet, position:(9,91,28)}",
            "You have visited the door at position (66,62,59).",
        ] {
            assert_eq!(t.count(text), t.tokenize(text).len(), "text {text:?}");
        }
    }

    #[test]
    fn concat_matches_fresh_tokenization_at_piece_boundaries() {
        let t = tok();
        let a = t.tokenize("Object Group 1: {object: sofa, position:(1,2,3)}");
        let b = t.tokenize(", {object: bed, position:(4,5,6)}");
        let joined = a.concat(&b);
        assert_eq!(joined, t.tokenize(&joined.source_text));
    }
}
