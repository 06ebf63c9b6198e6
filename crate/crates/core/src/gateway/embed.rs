//! Deterministic pseudo-embeddings for offline runs.

use std::collections::HashMap;

use super::{Embedder, GatewayError};
use crate::kb::normalize;

pub const MOCK_EMBEDDING_DIM: usize = 256;

const BIGRAM_WEIGHT: f64 = 0.25;
const RAW_TEXT_WEIGHT: f64 = 0.1;

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "did", "do", "does", "for", "from", "in",
    "is", "it", "of", "on", "or", "that", "the", "to", "was", "were", "what", "which", "who",
    "whom", "whose", "with",
];

/// Bag-of-tokens hash embedding.
///
/// Every content token maps to a fixed pseudo-random direction derived from a
/// 64-bit FNV-1a hash of `(seed, token)`; a text's vector is the normalized sum
/// of its token directions plus a lighter contribution from adjacent-token
/// bigrams and a small one from the exact raw text. Texts that share tokens
/// therefore land close together, identical texts get identical vectors,
/// distinct texts never coincide exactly, and nothing depends on platform
/// hashing.
///
/// Exact-text overrides let a caller pin the vector for specific strings.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
    seed: u64,
    overrides: HashMap<String, Vec<f64>>,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(MOCK_EMBEDDING_DIM, 0)
    }
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self {
            dimension,
            seed,
            overrides: HashMap::new(),
        }
    }

    /// Pins the vector returned for exactly `text`. The vector is normalized.
    pub fn set_override(&mut self, text: impl Into<String>, vector: &[f64]) -> Result<(), GatewayError> {
        if vector.len() != self.dimension {
            return Err(GatewayError::Config(format!(
                "override has dimension {} (expected {})",
                vector.len(),
                self.dimension
            )));
        }
        let unit = normalize(vector).map_err(|e| GatewayError::Config(e.to_string()))?;
        self.overrides.insert(text.into(), unit);
        Ok(())
    }

    pub fn override_count(&self) -> usize {
        self.overrides.len()
    }

    /// The hash embedding of `text`, ignoring overrides.
    pub fn base_vector(&self, text: &str) -> Vec<f64> {
        let tokens = tokenize(text);
        let mut acc = vec![0.0; self.dimension];
        let raw = format!("\u{0}raw\u{0}{text}");
        if tokens.is_empty() {
            self.add_direction(&mut acc, &raw, 1.0);
        } else {
            self.add_direction(&mut acc, &raw, RAW_TEXT_WEIGHT);
            for t in &tokens {
                self.add_direction(&mut acc, t, 1.0);
            }
            for pair in tokens.windows(2) {
                self.add_direction(&mut acc, &format!("{}\u{0}{}", pair[0], pair[1]), BIGRAM_WEIGHT);
            }
        }
        // A sum of independent directions is zero only with negligible
        // probability; fall back to the first axis to stay total.
        normalize(&acc).unwrap_or_else(|_| {
            let mut e = vec![0.0; self.dimension];
            e[0] = 1.0;
            e
        })
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        match self.overrides.get(text) {
            Some(v) => v.clone(),
            None => self.base_vector(text),
        }
    }

    fn add_direction(&self, acc: &mut [f64], token: &str, weight: f64) {
        let mut state = fnv1a(self.seed, token.as_bytes());
        for x in acc.iter_mut() {
            state = splitmix64(&mut state);
            // 53 random bits mapped to [-1, 1).
            let unit = (state >> 11) as f64 / (1u64 << 53) as f64;
            *x += weight * (2.0 * unit - 1.0);
        }
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("embed called with no texts".into()));
        }
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }

    fn dimension(&self) -> usize {
        self.dimension
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30ff | 0x3400..=0x4dbf | 0x4e00..=0x9fff | 0xac00..=0xd7af | 0xf900..=0xfaff)
}

/// Lowercased alphanumeric runs with stopwords removed; CJK characters are
/// single tokens.
pub(crate) fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let flush = |cur: &mut String, out: &mut Vec<String>| {
        if !cur.is_empty() {
            if !STOPWORDS.contains(&cur.as_str()) {
                out.push(std::mem::take(cur));
            } else {
                cur.clear();
            }
        }
    };
    for c in text.chars() {
        if is_cjk(c) {
            flush(&mut cur, &mut out);
            out.push(c.to_string());
        } else if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else {
            flush(&mut cur, &mut out);
        }
    }
    flush(&mut cur, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::cosine_similarity;

    #[test]
    fn identical_texts_identical_vectors() {
        let e = HashEmbedder::default();
        let v = e.embed(&["same text".into(), "same text".into()]).unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(v[0].len(), MOCK_EMBEDDING_DIM);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(HashEmbedder::default().embed(&[]).is_err());
    }

    #[test]
    fn distinct_fixture_texts_are_not_parallel() {
        let e = HashEmbedder::default();
        let texts = [
            "Who founded the company?",
            "When was the bridge built?",
            "a b",
            "b a",
            "",
            "the",
            "法律条文",
            "Paris is the capital of France.",
        ];
        for (i, a) in texts.iter().enumerate() {
            for b in &texts[i + 1..] {
                let c = cosine_similarity(&e.vector(a), &e.vector(b)).unwrap();
                assert!(c != 1.0, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn shared_tokens_raise_similarity() {
        let e = HashEmbedder::default();
        let q = e.vector("Who is the mentor of Zorvak?");
        let near = e.vector("Zorvak has a mentor named Quil.");
        let far = e.vector("Bridges span wide rivers.");
        assert!(cosine_similarity(&q, &near).unwrap() > cosine_similarity(&q, &far).unwrap());
    }

    #[test]
    fn override_takes_precedence() {
        let mut e = HashEmbedder::new(4, 1);
        e.set_override("x", &[0.0, 3.0, 0.0, 4.0]).unwrap();
        assert_eq!(e.vector("x"), vec![0.0, 0.6, 0.0, 0.8]);
        assert!(e.set_override("y", &[1.0]).is_err());
    }

    #[test]
    fn tokenizer_splits_cjk_and_drops_stopwords() {
        assert_eq!(tokenize("The Cat of 北京!"), vec!["cat", "北", "京"]);
    }
}
