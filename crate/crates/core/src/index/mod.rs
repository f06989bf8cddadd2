//! Exact cosine top-k index over text-chunk and page embeddings.
//!
//! Vectors live in one contiguous buffer and every query is a full scan, so
//! results are exact. Scores are recomputed at query time; only vectors are
//! persisted (see [`persist`]).

pub mod late;
pub mod persist;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use persist::{load_index, save_index};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("embedding must have at least one component")]
    EmptyVector,
    #[error("embedding component {index} is not finite")]
    NonFinite { index: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("entry `{entry_id}` has kind {kind} but a {payload_kind} payload")]
    KindMismatch {
        entry_id: String,
        kind: EntryKind,
        payload_kind: EntryKind,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("unsupported index format version `{0}`")]
    VersionMismatch(String),
    #[error("index file is truncated")]
    Truncated,
    #[error("index file is corrupt: {0}")]
    Corrupt(String),
}

pub type Result<T, E = IndexError> = std::result::Result<T, E>;

/// A finite, non-empty embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(IndexError::EmptyVector);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite { index });
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v * c).collect())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = IndexError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

/// `<a, b> / (|a| |b|)`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    Ok(cosine_from_parts(dot(&a.values, &b.values), na, nb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    TextChunk,
    PageImageProxy,
}

impl fmt::Display for EntryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntryKind::TextChunk => "text_chunk",
            EntryKind::PageImageProxy => "page_image_proxy",
        })
    }
}

/// What an index entry points back to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadRef {
    Chunk { chunk_id: String },
    Page { doc_id: String, page_no: u32 },
}

impl PayloadRef {
    pub fn kind(&self) -> EntryKind {
        match self {
            PayloadRef::Chunk { .. } => EntryKind::TextChunk,
            PayloadRef::Page { .. } => EntryKind::PageImageProxy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub entry_id: String,
    pub vector: EmbeddingVector,
    pub kind: EntryKind,
    pub payload_ref: PayloadRef,
}

impl IndexEntry {
    pub fn text_chunk(chunk_id: &str, vector: EmbeddingVector) -> Self {
        Self {
            entry_id: format!("chunk:{chunk_id}"),
            vector,
            kind: EntryKind::TextChunk,
            payload_ref: PayloadRef::Chunk {
                chunk_id: chunk_id.to_string(),
            },
        }
    }

    pub fn page(doc_id: &str, page_no: u32, vector: EmbeddingVector) -> Self {
        Self {
            entry_id: format!("page:{doc_id}:{page_no:05}"),
            vector,
            kind: EntryKind::PageImageProxy,
            payload_ref: PayloadRef::Page {
                doc_id: doc_id.to_string(),
                page_no,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHit {
    pub entry_id: String,
    pub score: f64,
    pub kind: EntryKind,
    pub payload_ref: PayloadRef,
}

/// Descending score, then ascending entry id.
pub fn rank_order(a: &RankedHit, b: &RankedHit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.entry_id.cmp(&b.entry_id))
}

#[derive(Debug, Clone)]
struct Slot {
    entry_id: String,
    kind: EntryKind,
    payload_ref: PayloadRef,
    norm: f64,
}

/// Flat, exact index. Wrap in a `RwLock` for shared use: queries take `&self`,
/// writes take `&mut self`.
#[derive(Debug, Clone, Default)]
pub struct VectorIndex {
    dim: Option<usize>,
    data: Vec<f64>,
    slots: Vec<Slot>,
    by_id: HashMap<String, usize>,
}

impl VectorIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// An empty index that only accepts `dim`-dimensional vectors.
    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim: Some(dim),
            ..Self::default()
        }
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn count_kind(&self, kind: EntryKind) -> usize {
        self.slots.iter().filter(|s| s.kind == kind).count()
    }

    fn row(&self, slot: usize) -> &[f64] {
        let dim = self.dim.unwrap_or(0);
        &self.data[slot * dim..(slot + 1) * dim]
    }

    pub fn upsert(&mut self, entry: IndexEntry) -> Result<()> {
        let dim = entry.vector.dim();
        if let Some(expected) = self.dim {
            if expected != dim {
                return Err(IndexError::DimensionMismatch {
                    expected,
                    actual: dim,
                });
            }
        }
        if entry.kind != entry.payload_ref.kind() {
            return Err(IndexError::KindMismatch {
                entry_id: entry.entry_id,
                kind: entry.kind,
                payload_kind: entry.payload_ref.kind(),
            });
        }
        self.dim = Some(dim);
        let norm = entry.vector.norm();
        match self.by_id.get(&entry.entry_id) {
            Some(&slot) => {
                self.data[slot * dim..(slot + 1) * dim].copy_from_slice(entry.vector.values());
                self.slots[slot] = Slot {
                    entry_id: entry.entry_id,
                    kind: entry.kind,
                    payload_ref: entry.payload_ref,
                    norm,
                };
            }
            None => {
                self.data.extend_from_slice(entry.vector.values());
                self.by_id.insert(entry.entry_id.clone(), self.slots.len());
                self.slots.push(Slot {
                    entry_id: entry.entry_id,
                    kind: entry.kind,
                    payload_ref: entry.payload_ref,
                    norm,
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, entry_id: &str) -> Option<IndexEntry> {
        let &slot = self.by_id.get(entry_id)?;
        let s = &self.slots[slot];
        Some(IndexEntry {
            entry_id: s.entry_id.clone(),
            vector: EmbeddingVector {
                values: self.row(slot).to_vec(),
            },
            kind: s.kind,
            payload_ref: s.payload_ref.clone(),
        })
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> impl Iterator<Item = IndexEntry> + '_ {
        self.slots
            .iter()
            .map(move |s| self.get(&s.entry_id).expect("slot ids are indexed"))
    }

    /// The `min(k, n)` best entries by cosine similarity, optionally restricted to one kind.
    pub fn query_top_k(
        &self,
        query: &EmbeddingVector,
        k: usize,
        kind_filter: Option<EntryKind>,
    ) -> Result<Vec<RankedHit>> {
        if k < 1 {
            return Err(IndexError::InvalidK);
        }
        let Some(dim) = self.dim else {
            return Ok(Vec::new());
        };
        if query.dim() != dim {
            return Err(IndexError::DimensionMismatch {
                expected: dim,
                actual: query.dim(),
            });
        }
        let qn = query.norm();
        if qn == 0.0 {
            return Err(IndexError::ZeroVector);
        }
        let mut hits: Vec<RankedHit> = self
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| kind_filter.is_none_or(|k| s.kind == k))
            .map(|(i, s)| {
                // a stored zero vector can never be similar to anything
                let score = if s.norm == 0.0 {
                    -1.0
                } else {
                    cosine_from_parts(dot(query.values(), self.row(i)), qn, s.norm)
                };
                RankedHit {
                    entry_id: s.entry_id.clone(),
                    score,
                    kind: s.kind,
                    payload_ref: s.payload_ref.clone(),
                }
            })
            .collect();
        hits.sort_by(rank_order);
        hits.truncate(k);
        Ok(hits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    /// Scores every entry independently with `cosine_similarity` and sorts.
    fn brute_force(index: &VectorIndex, q: &EmbeddingVector, k: usize, filter: Option<EntryKind>) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = index
            .entries()
            .filter(|e| filter.is_none_or(|f| e.kind == f))
            .map(|e| (e.entry_id.clone(), cosine_similarity(q, &e.vector).unwrap()))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> VectorIndex {
        let mut idx = VectorIndex::new();
        for i in 0..n {
            let values: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let entry = if i % 3 == 0 {
                IndexEntry::page("doc", i as u32, v(&values))
            } else {
                IndexEntry::text_chunk(&format!("c{i:04}"), v(&values))
            };
            idx.upsert(entry).unwrap();
        }
        idx
    }

    #[test]
    fn cosine_examples() {
        let a = v(&[0.3, -1.2, 4.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-8);
        assert!(matches!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(IndexError::ZeroVector)
        ));
    }

    #[test]
    fn embedding_vectors_reject_bad_values() {
        assert!(EmbeddingVector::new(vec![]).is_err());
        assert!(matches!(
            EmbeddingVector::new(vec![1.0, f64::NAN]),
            Err(IndexError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn upsert_semantics() {
        let mut idx = VectorIndex::new();
        idx.upsert(IndexEntry::text_chunk("a", v(&[1.0, 2.0]))).unwrap();
        assert_eq!(idx.get("chunk:a").unwrap().vector, v(&[1.0, 2.0]));
        idx.upsert(IndexEntry::text_chunk("a", v(&[3.0, 4.0]))).unwrap();
        assert_eq!(idx.get("chunk:a").unwrap().vector, v(&[3.0, 4.0]));
        assert_eq!(idx.len(), 1);

        let mut wide = VectorIndex::with_dim(1536);
        assert!(matches!(
            wide.upsert(IndexEntry::text_chunk("x", v(&vec![0.5; 384]))),
            Err(IndexError::DimensionMismatch { expected: 1536, actual: 384 })
        ));

        let mut bad = IndexEntry::text_chunk("y", v(&[1.0, 0.0]));
        bad.kind = EntryKind::PageImageProxy;
        assert!(matches!(idx.upsert(bad), Err(IndexError::KindMismatch { .. })));
    }

    #[test]
    fn query_examples() {
        let mut idx = VectorIndex::new();
        idx.upsert(IndexEntry::text_chunk("a", v(&[1.0, 0.0, 0.0]))).unwrap();
        idx.upsert(IndexEntry::text_chunk("b", v(&[0.0, 1.0, 0.0]))).unwrap();
        idx.upsert(IndexEntry::page("d", 1, v(&[1.0, 1.0, 0.0]))).unwrap();

        let hits = idx.query_top_k(&v(&[0.0, 1.0, 0.0]), 1, None).unwrap();
        assert_eq!(hits[0].entry_id, "chunk:b");
        assert!((hits[0].score - 1.0).abs() <= 1e-6);

        assert_eq!(idx.query_top_k(&v(&[1.0, 2.0, 3.0]), 10, None).unwrap().len(), 3);
        assert!(matches!(idx.query_top_k(&v(&[1.0, 0.0, 0.0]), 0, None), Err(IndexError::InvalidK)));

        let pages = idx
            .query_top_k(&v(&[1.0, 0.0, 0.0]), 5, Some(EntryKind::PageImageProxy))
            .unwrap();
        assert_eq!(pages.len(), 1);
        assert_eq!(pages[0].payload_ref, PayloadRef::Page { doc_id: "d".into(), page_no: 1 });

        let only_chunks = VectorIndex::new();
        assert!(only_chunks.query_top_k(&v(&[1.0]), 3, None).unwrap().is_empty());
    }

    #[test]
    fn ties_break_by_entry_id() {
        let mut idx = VectorIndex::new();
        for id in ["c", "a", "b"] {
            idx.upsert(IndexEntry::text_chunk(id, v(&[1.0, 1.0]))).unwrap();
        }
        let ids: Vec<_> = idx
            .query_top_k(&v(&[1.0, 1.0]), 3, None)
            .unwrap()
            .into_iter()
            .map(|h| h.entry_id)
            .collect();
        assert_eq!(ids, ["chunk:a", "chunk:b", "chunk:c"]);
    }

    #[test]
    fn matches_brute_force_on_random_indexes() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for round in 0..20 {
            let n = 1 + round * 5;
            let idx = random_index(&mut rng, n, 8);
            for _ in 0..10 {
                let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                let q = v(&q);
                let k = rng.random_range(1..=n + 2);
                for filter in [None, Some(EntryKind::TextChunk), Some(EntryKind::PageImageProxy)] {
                    let got: Vec<(String, f64)> = idx
                        .query_top_k(&q, k, filter)
                        .unwrap()
                        .into_iter()
                        .map(|h| (h.entry_id, h.score))
                        .collect();
                    assert_eq!(got, brute_force(&idx, &q, k, filter));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn ranking_is_scale_invariant_and_monotone(seed in any::<u64>(), c in 0.001f64..1000.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = random_index(&mut rng, 40, 6);
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = v(&q);
            let base = idx.query_top_k(&q, 40, None).unwrap();
            let scaled = idx.query_top_k(&q.scaled(c).unwrap(), 40, None).unwrap();
            let ids = |h: &[RankedHit]| h.iter().map(|x| x.entry_id.clone()).collect::<Vec<_>>();
            prop_assert_eq!(ids(&base), ids(&scaled));
            for w in base.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }
    }
}
