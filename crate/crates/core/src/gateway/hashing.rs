//! Seeded feature-hashing text embedder used by the offline backend.
//!
//! Each content token is hashed (with the seed) to a signed bucket; bucket
//! weights are `1 + ln(tf)` and the result is scaled to unit length. Texts
//! with no content tokens get a hash-derived pseudo-random unit vector, so
//! the output is never zero and always a pure function of `(seed, text)`.

use sha2::{Digest, Sha256};

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "into", "is", "it",
    "its", "of", "on", "or", "that", "the", "this", "to", "with",
];

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashedEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim: dim.max(1), seed }
    }

    fn bucket(&self, token: &str) -> (usize, f64) {
        let h = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(token.as_bytes())
            .finalize();
        let x = u64::from_le_bytes(h[..8].try_into().expect("8 bytes"));
        let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
        ((x % self.dim as u64) as usize, sign)
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let tokens = tokenize(text);
        let mut v = vec![0.0; self.dim];
        if !tokens.is_empty() {
            let mut counts: std::collections::BTreeMap<&str, u32> = Default::default();
            for t in &tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
            for (token, tf) in counts {
                let (i, sign) = self.bucket(token);
                v[i] += sign * (1.0 + f64::from(tf).ln());
            }
        }
        if v.iter().all(|x| *x == 0.0) {
            v = self.fallback(text);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    /// One unit vector per content token (query tokens or page patches).
    pub fn embed_tokens(&self, text: &str) -> Vec<Vec<f64>> {
        let mut seen = std::collections::BTreeSet::new();
        tokenize(text)
            .into_iter()
            .filter(|t| seen.insert(t.clone()))
            .map(|t| self.embed(&t))
            .collect()
    }

    fn fallback(&self, text: &str) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        let mut counter = 0u64;
        while out.len() < self.dim {
            let h = Sha256::new()
                .chain_update(b"fallback")
                .chain_update(self.seed.to_le_bytes())
                .chain_update(counter.to_le_bytes())
                .chain_update(text.as_bytes())
                .finalize();
            for chunk in h.chunks_exact(4) {
                if out.len() == self.dim {
                    break;
                }
                let x = u32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                out.push(f64::from(x) / f64::from(u32::MAX) * 2.0 - 1.0);
            }
            counter += 1;
        }
        if out.iter().all(|x| *x == 0.0) {
            out[0] = 1.0;
        }
        out
    }
}
