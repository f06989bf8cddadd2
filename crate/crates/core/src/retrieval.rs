//! Per-anomaly knowledge: a reference page image with its description plus
//! a four-section scientific summary synthesized from the top text chunks.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Ingestor, PageRecord, TextChunk};
use crate::digest::{slug, FieldHasher};
use crate::gateway::hashing::tokenize;
use crate::gateway::{Capability, ChatMessage, Gateway, GatewayError, GenerationParams, ImageData, Part, Role};
use crate::index::late::MultiVectorIndex;
use crate::index::{rank_order, EntryKind, IndexEntry, IndexError, PayloadRef, RankedHit, VectorIndex};
use crate::parse::{parse_binary_verdict, parse_sections, ParseError};
use crate::prompts::{self, PromptError, KNOWLEDGE_HEADINGS};

pub const DEFAULT_K_TEXT: usize = 3;
pub const DEFAULT_K_IMAGE: usize = 3;
pub const DEFAULT_IMAGE_SCORE_THRESHOLD: f64 = 0.25;
const EMBED_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid retrieval parameters: {0}")]
    InvalidParams(String),
    #[error("{context}: {source}")]
    Gateway {
        context: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("index has no text chunks to retrieve from")]
    NoTextChunks,
    #[error("chunk `{0}` is indexed but missing from the corpus")]
    UnknownChunk(String),
    #[error("page {doc_id}:{page_no} is indexed but missing from the corpus")]
    UnknownPage { doc_id: String, page_no: u32 },
    #[error("knowledge text for `{anomaly}` is malformed after one re-ask: {source}")]
    Structure {
        anomaly: String,
        #[source]
        source: ParseError,
    },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid knowledge file {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

fn gw(context: impl Into<String>) -> impl FnOnce(GatewayError) -> RetrievalError {
    let context = context.into();
    move |source| RetrievalError::Gateway { context, source }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RetrievalError + '_ {
    move |source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// How candidate reference pages are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PageScorer {
    /// Cosine against one embedding of the page's extracted text.
    #[default]
    Proxy,
    /// Normalized MaxSim of query tokens against the page's token vectors.
    LateInteraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalParams {
    pub k_text: usize,
    pub k_image: usize,
    pub image_score_threshold: f64,
    /// Ask the vision model whether the top page actually shows the anomaly.
    pub vision_usability_check: bool,
    pub page_scorer: PageScorer,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            k_text: DEFAULT_K_TEXT,
            k_image: DEFAULT_K_IMAGE,
            image_score_threshold: DEFAULT_IMAGE_SCORE_THRESHOLD,
            vision_usability_check: false,
            page_scorer: PageScorer::Proxy,
        }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_text < 1 {
            return Err(RetrievalError::InvalidParams("k_text must be >= 1".into()));
        }
        if self.k_image < 1 {
            return Err(RetrievalError::InvalidParams("k_image must be >= 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.image_score_threshold) {
            return Err(RetrievalError::InvalidParams(
                "image_score_threshold must be in [-1, 1]".into(),
            ));
        }
        Ok(())
    }

    fn digest_into(&self, h: &mut FieldHasher) {
        h.field(self.k_text.to_le_bytes())
            .field(self.k_image.to_le_bytes())
            .field(self.image_score_threshold.to_bits().to_le_bytes())
            .field([self.vision_usability_check as u8])
            .field(match self.page_scorer {
                PageScorer::Proxy => "proxy",
                PageScorer::LateInteraction => "late_interaction",
            });
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoText {
    pub detailed_description: String,
    pub common_causes: String,
    pub visual_characteristics: String,
    pub prevention_strategies: String,
}

impl InfoText {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut s = parse_sections(text, &KNOWLEDGE_HEADINGS)?.into_iter();
        let mut next = || s.next().expect("one body per heading");
        Ok(Self {
            detailed_description: next(),
            common_causes: next(),
            visual_characteristics: next(),
            prevention_strategies: next(),
        })
    }

    pub fn sections(&self) -> [&str; 4] {
        [
            &self.detailed_description,
            &self.common_causes,
            &self.visual_characteristics,
            &self.prevention_strategies,
        ]
    }

    /// The `{info_anomaly_text}` binding: four numbered, headed sections.
    pub fn render(&self) -> String {
        KNOWLEDGE_HEADINGS
            .iter()
            .zip(self.sections())
            .enumerate()
            .map(|(i, (h, body))| format!("{}. {h}\n{body}", i + 1))
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub entry_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceImage {
    pub image: ImageData,
    pub doc_id: String,
    pub page_no: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyKnowledge {
    pub anomaly_name: String,
    pub reference_image: Option<ReferenceImage>,
    pub reference_image_description: Option<String>,
    pub info_text: InfoText,
    /// Text and page hits, best first.
    pub provenance: Vec<Provenance>,
}

impl AnomalyKnowledge {
    /// Every retrieved string this packet can put into a prompt.
    pub fn retrieved_strings(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.info_text.sections().to_vec();
        if let Some(d) = &self.reference_image_description {
            out.push(d);
        }
        out
    }
}

/// Pages and chunks of an ingested corpus, addressable by id.
#[derive(Debug, Clone)]
pub struct CorpusStore {
    corpus_dir: PathBuf,
    pages: BTreeMap<(String, u32), PageRecord>,
    chunks: BTreeMap<String, TextChunk>,
    digest: String,
}

impl CorpusStore {
    pub fn load(corpus_dir: impl Into<PathBuf>, doc_ids: &[String]) -> Result<Self> {
        let ingestor = Ingestor::new(corpus_dir);
        let mut pages = BTreeMap::new();
        let mut chunks = BTreeMap::new();
        let mut h = FieldHasher::new();
        for doc_id in doc_ids {
            let (p, c) = ingestor.load_stored(doc_id)?;
            h.field(doc_id);
            for page in p {
                let path = ingestor.page_image_path(&page);
                let bytes = std::fs::read(&path).map_err(io_err(&path))?;
                h.field(page.page_no.to_le_bytes())
                    .field(&page.text)
                    .field(crate::digest::sha256_hex(&bytes));
                pages.insert((page.doc_id.clone(), page.page_no), page);
            }
            for chunk in c {
                h.field(&chunk.chunk_id).field(&chunk.text);
                chunks.insert(chunk.chunk_id.clone(), chunk);
            }
        }
        Ok(Self {
            corpus_dir: ingestor.corpus_dir().to_path_buf(),
            pages,
            chunks,
            digest: h.finish_hex(),
        })
    }

    /// Content digest over page texts, page images and chunks.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn pages(&self) -> impl Iterator<Item = &PageRecord> {
        self.pages.values()
    }

    pub fn chunks(&self) -> impl Iterator<Item = &TextChunk> {
        self.chunks.values()
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&TextChunk> {
        self.chunks.get(chunk_id)
    }

    pub fn page(&self, doc_id: &str, page_no: u32) -> Option<&PageRecord> {
        self.pages.get(&(doc_id.to_string(), page_no))
    }

    pub fn page_image(&self, doc_id: &str, page_no: u32) -> Result<ImageData> {
        let page = self.page(doc_id, page_no).ok_or_else(|| RetrievalError::UnknownPage {
            doc_id: doc_id.to_string(),
            page_no,
        })?;
        let path = self.corpus_dir.join(&page.page_image_ref);
        ImageData::from_path(&path).map_err(io_err(&path))
    }
}

fn clip(text: &str, max_chars: usize) -> String {
    text.chars().take(max_chars).collect()
}

fn embed_all(gateway: &Gateway, texts: &[String], context: &str) -> Result<Vec<crate::index::EmbeddingVector>> {
    let mut out = Vec::with_capacity(texts.len());
    for batch in texts.chunks(EMBED_BATCH) {
        out.extend(gateway.embed_batch(batch).map_err(gw(context))?);
    }
    Ok(out)
}

/// Embeds every chunk and every page with extracted text. Pages without text
/// have nothing to embed and stay out of the index.
pub fn build_index(store: &CorpusStore, gateway: &Gateway, max_chars: usize) -> Result<VectorIndex> {
    let mut index = VectorIndex::new();
    let chunks: Vec<&TextChunk> = store.chunks().filter(|c| !c.text.trim().is_empty()).collect();
    let texts: Vec<String> = chunks.iter().map(|c| clip(&c.text, max_chars)).collect();
    for (c, v) in chunks.iter().zip(embed_all(gateway, &texts, "embedding chunks")?) {
        index.upsert(IndexEntry::text_chunk(&c.chunk_id, v))?;
    }
    let pages: Vec<&PageRecord> = store.pages().filter(|p| !p.text.trim().is_empty()).collect();
    let texts: Vec<String> = pages.iter().map(|p| clip(&p.text, max_chars)).collect();
    for (p, v) in pages.iter().zip(embed_all(gateway, &texts, "embedding pages")?) {
        index.upsert(IndexEntry::page(&p.doc_id, p.page_no, v))?;
    }
    Ok(index)
}

fn unique_tokens(text: &str) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    tokenize(text).into_iter().filter(|t| seen.insert(t.clone())).collect()
}

/// Token-level page vectors for late-interaction scoring.
pub fn build_late_index(store: &CorpusStore, gateway: &Gateway) -> Result<MultiVectorIndex> {
    let mut idx = MultiVectorIndex::new();
    for page in store.pages() {
        let tokens = unique_tokens(&page.text);
        if tokens.is_empty() {
            continue;
        }
        let patches = embed_all(gateway, &tokens, "embedding page tokens")?;
        idx.insert_page(&page.doc_id, page.page_no, patches)?;
    }
    Ok(idx)
}

/// Outcome of reference-page retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRetrieval {
    pub hits: Vec<RankedHit>,
    /// Top hit, if it clears the threshold (and the usability check, when on).
    pub chosen: Option<ReferenceImage>,
}

pub struct Retriever<'a> {
    index: &'a VectorIndex,
    store: &'a CorpusStore,
    gateway: &'a Gateway,
    params: RetrievalParams,
    late: Option<MultiVectorIndex>,
}

impl<'a> Retriever<'a> {
    pub fn new(index: &'a VectorIndex, store: &'a CorpusStore, gateway: &'a Gateway, params: RetrievalParams) -> Result<Self> {
        params.validate()?;
        let late = match params.page_scorer {
            PageScorer::Proxy => None,
            PageScorer::LateInteraction => Some(build_late_index(store, gateway)?),
        };
        Ok(Self {
            index,
            store,
            gateway,
            params,
            late,
        })
    }

    pub fn params(&self) -> &RetrievalParams {
        &self.params
    }

    pub fn corpus_digest(&self) -> &str {
        self.store.digest()
    }

    fn embed_one(&self, text: String, context: &str) -> Result<crate::index::EmbeddingVector> {
        let mut v = self.gateway.embed_batch(&[text]).map_err(gw(context))?;
        Ok(v.remove(0))
    }

    pub fn page_hits(&self, anomaly_name: &str) -> Result<Vec<RankedHit>> {
        let query = prompts::image_query(anomaly_name)?;
        match &self.late {
            None => {
                if self.index.count_kind(EntryKind::PageImageProxy) == 0 {
                    return Ok(Vec::new());
                }
                let q = self.embed_one(query, "embedding image query")?;
                Ok(self
                    .index
                    .query_top_k(&q, self.params.k_image, Some(EntryKind::PageImageProxy))?)
            }
            Some(late) => {
                let tokens = unique_tokens(&query);
                if late.is_empty() || tokens.is_empty() {
                    return Ok(Vec::new());
                }
                let q = embed_all(self.gateway, &tokens, "embedding image query tokens")?;
                Ok(late.query_top_k(&q, self.params.k_image)?)
            }
        }
    }

    pub fn retrieve_reference_image(&self, anomaly_name: &str) -> Result<ImageRetrieval> {
        let hits = self.page_hits(anomaly_name)?;
        let chosen = match hits.first() {
            Some(top) if top.score >= self.params.image_score_threshold => {
                let PayloadRef::Page { doc_id, page_no } = &top.payload_ref else {
                    unreachable!("page query returns page entries")
                };
                let image = self.store.page_image(doc_id, *page_no)?;
                let usable = !self.params.vision_usability_check || self.usable(anomaly_name, &image)?;
                usable.then(|| ReferenceImage {
                    image,
                    doc_id: doc_id.clone(),
                    page_no: *page_no,
                })
            }
            _ => None,
        };
        Ok(ImageRetrieval { hits, chosen })
    }

    fn usable(&self, anomaly_name: &str, image: &ImageData) -> Result<bool> {
        let msgs = [ChatMessage::new(
            Role::User,
            vec![
                Part::Text(format!(
                    "Does this page image clearly show an example of {anomaly_name}? Answer 1 for yes or 0 for no."
                )),
                Part::Image(image.clone()),
            ],
        )];
        let r = self
            .gateway
            .complete_vision(&msgs, &GenerationParams::structured())
            .map_err(gw(format!("usability check for {anomaly_name}")))?;
        Ok(parse_binary_verdict(&r.text) == Ok(1))
    }

    pub fn describe_reference_image(&self, anomaly_name: &str, image: &ImageData) -> Result<String> {
        let msgs = prompts::image_description_messages(anomaly_name, image)?;
        let r = self
            .gateway
            .complete_vision(&msgs, &GenerationParams::structured())
            .map_err(gw(format!("describing reference image for {anomaly_name}")))?;
        Ok(r.text.trim().to_string())
    }

    pub fn text_hits(&self, anomaly_name: &str) -> Result<Vec<RankedHit>> {
        if self.index.count_kind(EntryKind::TextChunk) == 0 {
            return Err(RetrievalError::NoTextChunks);
        }
        let q = self.embed_one(prompts::text_query_head(anomaly_name)?, "embedding text query")?;
        Ok(self
            .index
            .query_top_k(&q, self.params.k_text, Some(EntryKind::TextChunk))?)
    }

    pub fn retrieve_anomaly_text(&self, anomaly_name: &str) -> Result<(InfoText, Vec<RankedHit>)> {
        let hits = self.text_hits(anomaly_name)?;
        let chunks = hits
            .iter()
            .map(|h| match &h.payload_ref {
                PayloadRef::Chunk { chunk_id } => self
                    .store
                    .chunk(chunk_id)
                    .map(|c| c.text.clone())
                    .ok_or_else(|| RetrievalError::UnknownChunk(chunk_id.clone())),
                PayloadRef::Page { .. } => unreachable!("text query returns chunk entries"),
            })
            .collect::<Result<Vec<_>>>()?;
        let msgs = prompts::text_retrieval_messages(anomaly_name, &chunks)?;
        let params = GenerationParams::structured();
        let context = format!("text retrieval for {anomaly_name}");
        let first = self
            .gateway
            .complete_chat(&msgs, &params)
            .map_err(gw(context.clone()))?;
        let info = match InfoText::parse(&first.text) {
            Ok(info) => info,
            Err(_) => {
                let again = prompts::reask_messages(&msgs, &first.text, &KNOWLEDGE_HEADINGS, &[]);
                let second = self
                    .gateway
                    .complete_chat(&again, &params)
                    .map_err(gw(context))?;
                InfoText::parse(&second.text).map_err(|source| RetrievalError::Structure {
                    anomaly: anomaly_name.to_string(),
                    source,
                })?
            }
        };
        Ok((info, hits))
    }

    /// Text is mandatory; any failure on the image side degrades to a
    /// text-only packet.
    pub fn build_anomaly_knowledge(&self, anomaly_name: &str) -> Result<AnomalyKnowledge> {
        let (info_text, text_hits) = self.retrieve_anomaly_text(anomaly_name)?;
        let (image_hits, reference) = match self.image_side(anomaly_name) {
            Ok(x) => x,
            Err(e) => {
                log::warn!("{anomaly_name}: continuing without a reference image: {e}");
                (Vec::new(), None)
            }
        };
        let (reference_image, reference_image_description) = match reference {
            Some((r, d)) => (Some(r), Some(d)),
            None => (None, None),
        };
        let mut hits: Vec<RankedHit> = text_hits.into_iter().chain(image_hits).collect();
        hits.sort_by(rank_order);
        Ok(AnomalyKnowledge {
            anomaly_name: anomaly_name.to_string(),
            reference_image,
            reference_image_description,
            info_text,
            provenance: hits
                .into_iter()
                .map(|h| Provenance {
                    entry_id: h.entry_id,
                    score: h.score,
                })
                .collect(),
        })
    }

    #[allow(clippy::type_complexity)]
    fn image_side(&self, anomaly_name: &str) -> Result<(Vec<RankedHit>, Option<(ReferenceImage, String)>)> {
        let r = self.retrieve_reference_image(anomaly_name)?;
        let described = match r.chosen {
            Some(img) => {
                let d = self.describe_reference_image(anomaly_name, &img.image)?;
                Some((img, d))
            }
            None => None,
        };
        Ok((r.hits, described))
    }

    /// Cache key: anomaly, corpus digest, retrieval parameters and backend ids.
    pub fn cache_key(&self, anomaly_name: &str) -> String {
        let mut h = FieldHasher::new();
        h.field(anomaly_name).field(self.store.digest());
        self.params.digest_into(&mut h);
        for c in [Capability::Chat, Capability::Vision, Capability::Embedding] {
            h.field(self.gateway.backend_id(c));
        }
        h.finish_hex()
    }
}

/// On-disk form of a knowledge packet; the page image sits next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeFile {
    pub cache_key: String,
    pub anomaly_name: String,
    pub reference_image: Option<ReferenceRecord>,
    pub reference_image_description: Option<String>,
    pub info_text: InfoText,
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRecord {
    pub doc_id: String,
    pub page_no: u32,
    /// File name relative to the knowledge directory.
    pub file: String,
    pub sha256: String,
}

/// In-memory and on-disk packet cache for one dataset.
#[derive(Debug)]
pub struct KnowledgeCache {
    dir: Option<PathBuf>,
    mem: Mutex<HashMap<String, AnomalyKnowledge>>,
}

impl KnowledgeCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            mem: Mutex::new(HashMap::new()),
        }
    }

    /// Persists under `dir` (normally `knowledge/<dataset_id>`).
    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            mem: Mutex::new(HashMap::new()),
        }
    }

    pub fn json_path(&self, anomaly_name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.json", slug(anomaly_name))))
    }

    /// Packet for `key`, from memory or disk, if present and current.
    pub fn get(&self, anomaly_name: &str, key: &str) -> Result<Option<AnomalyKnowledge>> {
        if let Some(k) = self.mem.lock().expect("cache lock poisoned").get(key) {
            return Ok(Some(k.clone()));
        }
        let Some(path) = self.json_path(anomaly_name) else {
            return Ok(None);
        };
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let file: KnowledgeFile = serde_json::from_slice(&bytes).map_err(|source| RetrievalError::Json {
            path: path.clone(),
            source,
        })?;
        if file.cache_key != key {
            return Ok(None);
        }
        let dir = path.parent().expect("json path has a parent");
        let reference_image = match &file.reference_image {
            Some(r) => {
                let p = dir.join(&r.file);
                Some(ReferenceImage {
                    image: ImageData::from_path(&p).map_err(io_err(&p))?,
                    doc_id: r.doc_id.clone(),
                    page_no: r.page_no,
                })
            }
            None => None,
        };
        let k = AnomalyKnowledge {
            anomaly_name: file.anomaly_name,
            reference_image,
            reference_image_description: file.reference_image_description,
            info_text: file.info_text,
            provenance: file.provenance,
        };
        self.mem
            .lock()
            .expect("cache lock poisoned")
            .insert(key.to_string(), k.clone());
        Ok(Some(k))
    }

    pub fn put(&self, key: &str, k: &AnomalyKnowledge) -> Result<()> {
        if let Some(path) = self.json_path(&k.anomaly_name) {
            let dir = path.parent().expect("json path has a parent");
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let reference_image = match &k.reference_image {
                Some(r) => {
                    let file = format!("{}.png", slug(&k.anomaly_name));
                    let p = dir.join(&file);
                    std::fs::write(&p, r.image.bytes()).map_err(io_err(&p))?;
                    Some(ReferenceRecord {
                        doc_id: r.doc_id.clone(),
                        page_no: r.page_no,
                        file,
                        sha256: r.image.digest(),
                    })
                }
                None => None,
            };
            let file = KnowledgeFile {
                cache_key: key.to_string(),
                anomaly_name: k.anomaly_name.clone(),
                reference_image,
                reference_image_description: k.reference_image_description.clone(),
                info_text: k.info_text.clone(),
                provenance: k.provenance.clone(),
            };
            let mut bytes = serde_json::to_vec_pretty(&file).expect("knowledge serializes");
            bytes.push(b'\n');
            std::fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        self.mem
            .lock()
            .expect("cache lock poisoned")
            .insert(key.to_string(), k.clone());
        Ok(())
    }

    pub fn get_or_build(&self, retriever: &Retriever<'_>, anomaly_name: &str) -> Result<AnomalyKnowledge> {
        let key = retriever.cache_key(anomaly_name);
        if let Some(k) = self.get(anomaly_name, &key)? {
            return Ok(k);
        }
        let k = retriever.build_anomaly_knowledge(anomaly_name)?;
        self.put(&key, &k)?;
        Ok(k)
    }
}

/// Builds (or loads) packets for all anomalies concurrently; output follows input order.
pub fn build_all(cache: &KnowledgeCache, retriever: &Retriever<'_>, anomalies: &[String]) -> Result<Vec<AnomalyKnowledge>> {
    anomalies
        .par_iter()
        .map(|a| cache.get_or_build(retriever, a))
        .collect()
}
