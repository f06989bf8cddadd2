//! The bundled toy corpus and dataset, staged into a temp directory.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use pbf_rag_core::config::{parse_config, LoadedConfig};
use pbf_rag_core::index::{EmbeddingVector, EntryKind, PayloadRef, RankedHit, VectorIndex};
use pbf_rag_core::retrieval::{CorpusStore, Retriever};
use pbf_rag_core::workflow::{IngestManifest, Options, Workflow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy")
}

/// Copies the toy config into `dir` with absolute input paths and
/// `output_dir = dir/out`; `patch` edits the JSON first.
pub fn write_config(dir: &Path, patch: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let src = toy_dir();
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(src.join("config.json")).unwrap()).unwrap();
    for key in ["corpus_manifest", "dataset", "annotations"] {
        let rel = v[key].as_str().unwrap().to_string();
        v[key] = src.join(rel).canonicalize().unwrap().to_string_lossy().into_owned().into();
    }
    v["output_dir"] = dir.join("out").to_string_lossy().into_owned().into();
    patch(&mut v);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
    path
}

pub fn load(dir: &Path) -> LoadedConfig {
    parse_config(write_config(dir, |_| {})).unwrap()
}

pub struct Toy {
    pub workflow: Workflow,
    pub store: CorpusStore,
    pub index: VectorIndex,
}

/// Ingests and indexes the toy corpus under `dir`.
pub fn indexed(dir: &Path) -> Toy {
    let workflow = Workflow::new(load(dir), Options::default()).unwrap();
    workflow.ingest().unwrap();
    workflow.index().unwrap();
    let m: IngestManifest = serde_json::from_slice(&std::fs::read(workflow.corpus_dir().join("ingest.json")).unwrap()).unwrap();
    let store = CorpusStore::load(workflow.corpus_dir(), &m.doc_ids).unwrap();
    let index = pbf_rag_core::index::load_index(workflow.index_dir().join("index.bin")).unwrap();
    Toy { workflow, store, index }
}

fn flat(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Per anomaly: did the top page hit land on the planted figure page, and
/// did the top chunk hit contain the planted knowledge paragraph?
pub fn recall_at_1(toy: &Toy) -> Vec<(String, bool, bool)> {
    let params = toy.workflow.taxonomy().anomalies().to_vec();
    let retriever = Retriever::new(&toy.index, &toy.store, toy.workflow.gateway(), Default::default()).unwrap();
    params
        .iter()
        .map(|name| {
            let planted_page = toy
                .store
                .pages()
                .find(|p| flat(&p.text).contains(&format!("layer images related to {}", name.to_lowercase())))
                .map(|p| (p.doc_id.clone(), p.page_no))
                .expect("toy corpus plants a figure page per anomaly");
            let page_hit = retriever.page_hits(name).unwrap().first().map(|h| match &h.payload_ref {
                PayloadRef::Page { doc_id, page_no } => (doc_id.clone(), *page_no),
                _ => unreachable!(),
            });
            let marker = format!("comprehensive information about {}", name.to_lowercase());
            let chunk_hit = retriever.text_hits(name).unwrap().first().map(|h| match &h.payload_ref {
                PayloadRef::Chunk { chunk_id } => flat(&toy.store.chunk(chunk_id).unwrap().text).contains(&marker),
                _ => unreachable!(),
            });
            (name.clone(), page_hit == Some(planted_page), chunk_hit == Some(true))
        })
        .collect()
}

/// Independent full scan: plain loops, own cosine, sort by (score desc, id asc).
pub fn exhaustive_top_k(index: &VectorIndex, q: &[f64], k: usize, kind: Option<EntryKind>) -> Vec<(String, f64)> {
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all: Vec<(String, f64)> = index
        .entries()
        .filter(|e| kind.is_none_or(|k| e.kind == k))
        .map(|e| {
            let v = e.vector.values();
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (e.entry_id, dot / (vn * qn))
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn same(hits: &[RankedHit], oracle: &[(String, f64)]) -> bool {
    hits.len() == oracle.len()
        && hits
            .iter()
            .zip(oracle)
            .all(|(h, (id, s))| &h.entry_id == id && (h.score - s).abs() <= 1e-12)
}

/// Random queries (Gaussian-ish directions, random k and kind filter);
/// returns how many disagreed with the full scan.
pub fn top_k_mismatches(index: &VectorIndex, queries: usize, seed: u64) -> usize {
    let dim = index.dim().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..queries {
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = rng.random_range(1..=index.len() + 2);
        let kind = match rng.random_range(0..3) {
            0 => None,
            1 => Some(EntryKind::TextChunk),
            _ => Some(EntryKind::PageImageProxy),
        };
        let hits = index.query_top_k(&EmbeddingVector::new(q.clone()).unwrap(), k, kind).unwrap();
        if !same(&hits, &exhaustive_top_k(index, &q, k, kind)) {
            bad += 1;
        }
    }
    bad
}

/// Every file under `root` with its bytes, keyed by relative path.
pub fn tree_bytes(root: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut std::collections::BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = Default::default();
    walk(root, root, &mut out);
    out
}
