//! Late-interaction (MaxSim) page scoring.
//!
//! Each page is a bag of patch vectors and each query a bag of token vectors.
//! A page's score is the mean over query tokens of the best cosine similarity
//! that token reaches against any patch, so it stays in `[-1, 1]` like the
//! single-vector scores it can replace.

use super::{
    cosine_similarity, rank_order, EmbeddingVector, EntryKind, IndexError, PayloadRef, RankedHit,
    Result,
};

/// Sum over query tokens of each token's best similarity against `doc`.
pub fn maxsim(query: &[EmbeddingVector], doc: &[EmbeddingVector]) -> Result<f64> {
    let mut total = 0.0;
    for q in query {
        let mut best = f64::NEG_INFINITY;
        for d in doc {
            best = best.max(cosine_similarity(q, d)?);
        }
        if best.is_finite() {
            total += best;
        }
    }
    Ok(total)
}

/// [`maxsim`] divided by the number of query tokens.
pub fn normalized_maxsim(query: &[EmbeddingVector], doc: &[EmbeddingVector]) -> Result<f64> {
    if query.is_empty() || doc.is_empty() {
        return Ok(0.0);
    }
    Ok(maxsim(query, doc)? / query.len() as f64)
}

#[derive(Debug, Clone)]
struct PageBag {
    entry_id: String,
    payload_ref: PayloadRef,
    patches: Vec<EmbeddingVector>,
}

/// Pages stored as patch-vector bags, scored exhaustively with MaxSim.
#[derive(Debug, Clone, Default)]
pub struct MultiVectorIndex {
    dim: Option<usize>,
    pages: Vec<PageBag>,
}

impl MultiVectorIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn insert_page(&mut self, doc_id: &str, page_no: u32, patches: Vec<EmbeddingVector>) -> Result<()> {
        for p in &patches {
            match self.dim {
                Some(d) if d != p.dim() => {
                    return Err(IndexError::DimensionMismatch {
                        expected: d,
                        actual: p.dim(),
                    })
                }
                _ => self.dim = Some(p.dim()),
            }
        }
        let entry_id = format!("page:{doc_id}:{page_no:05}");
        let bag = PageBag {
            entry_id: entry_id.clone(),
            payload_ref: PayloadRef::Page {
                doc_id: doc_id.to_string(),
                page_no,
            },
            patches,
        };
        match self.pages.iter_mut().find(|p| p.entry_id == entry_id) {
            Some(slot) => *slot = bag,
            None => self.pages.push(bag),
        }
        Ok(())
    }

    pub fn query_top_k(&self, query_tokens: &[EmbeddingVector], k: usize) -> Result<Vec<RankedHit>> {
        if k < 1 {
            return Err(IndexError::InvalidK);
        }
        let mut hits = self
            .pages
            .iter()
            .map(|p| {
                Ok(RankedHit {
                    entry_id: p.entry_id.clone(),
                    score: normalized_maxsim(query_tokens, &p.patches)?,
                    kind: EntryKind::PageImageProxy,
                    payload_ref: p.payload_ref.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        hits.sort_by(rank_order);
        hits.truncate(k);
        Ok(hits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn maxsim_picks_best_patch_per_token() {
        let q = [v(&[1.0, 0.0]), v(&[0.0, 1.0])];
        let doc = [v(&[1.0, 0.0]), v(&[1.0, 1.0])];
        // token 1 -> 1.0 (patch 1), token 2 -> 1/sqrt(2) (patch 2)
        let expected = 1.0 + std::f64::consts::FRAC_1_SQRT_2;
        assert!((maxsim(&q, &doc).unwrap() - expected).abs() < 1e-12);
        assert!((normalized_maxsim(&q, &doc).unwrap() - expected / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ranks_pages_by_late_interaction() {
        let mut idx = MultiVectorIndex::new();
        idx.insert_page("a", 1, vec![v(&[1.0, 0.0, 0.0])]).unwrap();
        idx.insert_page("a", 2, vec![v(&[0.0, 1.0, 0.0]), v(&[0.0, 0.0, 1.0])]).unwrap();
        let hits = idx
            .query_top_k(&[v(&[0.0, 1.0, 0.0]), v(&[0.0, 0.0, 1.0])], 2)
            .unwrap();
        assert_eq!(hits[0].entry_id, "page:a:00002");
        assert!((hits[0].score - 1.0).abs() < 1e-12);
        assert!(idx.insert_page("b", 1, vec![v(&[1.0])]).is_err());
    }
}
