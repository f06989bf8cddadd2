//! Deterministic offline backend.
//!
//! Completions come from registered fixtures keyed by `(capability, request
//! digest)`. Without a fixture, strict mode fails naming the digest and
//! non-strict mode falls back to a rule engine that recognises the prompt
//! kind from its fixed prefix:
//!
//! - detection: `"1"` iff the anomaly is in the oracle set of any attached image
//! - classification: the bit found in the detection results, else `"0"`
//! - text retrieval (and its re-asks): a well-formed sectioned answer built from the prompt
//! - image description: a fixed sentence naming the anomaly and image digest
//! - explanation: one three-section block per anomaly marked `1`
//! - anything else: `"0"`
//!
//! Responses depend only on request content, never on call order.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::hashing::HashedEmbedder;
use super::{request_digest, Backend, BackendError, Capability, ChatMessage, GenerationParams, Role};
use crate::parse::parse_binary_verdict;
use crate::prompts::{prefix, EXPLANATION_HEADINGS, KNOWLEDGE_HEADINGS};

pub const DEFAULT_EMBEDDING_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum MockError {
    #[error("fixture for {capability} request {digest} is already registered")]
    DuplicateFixture { capability: Capability, digest: String },
    #[error("cannot read fixtures {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid fixtures file {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// One entry of a fixtures file (a JSON array of these).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureRecord {
    pub capability: Capability,
    pub digest: String,
    pub response: String,
}

#[derive(Debug)]
pub struct MockBackend {
    id: String,
    strict: bool,
    embedder: HashedEmbedder,
    fixtures: Mutex<HashMap<(Capability, String), String>>,
    oracle: RwLock<HashMap<String, BTreeSet<String>>>,
    completions: AtomicU64,
    embeddings: AtomicU64,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self::with_dim(seed, DEFAULT_EMBEDDING_DIM)
    }

    pub fn with_dim(seed: u64, embedding_dim: usize) -> Self {
        Self {
            id: format!("mock:seed={seed}"),
            strict: false,
            embedder: HashedEmbedder::new(embedding_dim, seed),
            fixtures: Mutex::new(HashMap::new()),
            oracle: RwLock::new(HashMap::new()),
            completions: AtomicU64::new(0),
            embeddings: AtomicU64::new(0),
        }
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn register_fixture(&self, capability: Capability, digest: impl Into<String>, response: impl Into<String>) -> Result<(), MockError> {
        let key = (capability, digest.into());
        let mut f = self.fixtures.lock().expect("fixture lock poisoned");
        if self.strict && f.contains_key(&key) {
            return Err(MockError::DuplicateFixture {
                capability,
                digest: key.1,
            });
        }
        f.insert(key, response.into());
        Ok(())
    }

    pub fn register_for(&self, capability: Capability, messages: &[ChatMessage], response: impl Into<String>) -> Result<(), MockError> {
        self.register_fixture(capability, request_digest(messages), response)
    }

    pub fn load_fixtures(&self, path: impl AsRef<Path>) -> Result<usize, MockError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MockError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let records: Vec<FixtureRecord> = serde_json::from_str(&text).map_err(|source| MockError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        let n = records.len();
        for r in records {
            self.register_fixture(r.capability, r.digest, r.response)?;
        }
        Ok(n)
    }

    /// Declares which anomalies are present in the image with this digest.
    pub fn set_oracle(&self, image_digest: impl Into<String>, anomalies: impl IntoIterator<Item = String>) {
        let set = anomalies.into_iter().map(|a| a.to_lowercase()).collect();
        self.oracle
            .write()
            .expect("oracle lock poisoned")
            .insert(image_digest.into(), set);
    }

    pub fn completion_count(&self) -> u64 {
        self.completions.load(Ordering::SeqCst)
    }

    pub fn embedding_count(&self) -> u64 {
        self.embeddings.load(Ordering::SeqCst)
    }

    pub fn embedder(&self) -> HashedEmbedder {
        self.embedder
    }

    fn rule_engine(&self, messages: &[ChatMessage]) -> String {
        let Some(first) = messages.iter().find(|m| m.role == Role::User) else {
            return "0".into();
        };
        let text = first.text();

        if let Some(rest) = text.strip_prefix(prefix::DETECTION) {
            let anomaly = rest.split(" is possible.").next().unwrap_or("").to_lowercase();
            let oracle = self.oracle.read().expect("oracle lock poisoned");
            let hit = messages
                .iter()
                .flat_map(|m| m.images())
                .any(|img| oracle.get(&img.digest()).is_some_and(|s| s.contains(&anomaly)));
            return if hit { "1" } else { "0" }.into();
        }
        if let Some(rest) = text.strip_prefix(prefix::CLASSIFICATION) {
            let results = rest.split(". If ").next().unwrap_or("");
            let any = results
                .split("\n\n")
                .any(|r| parse_binary_verdict(r) == Ok(1));
            return if any { "1" } else { "0" }.into();
        }
        if let Some(rest) = text.strip_prefix(prefix::TEXT_QUERY) {
            let anomaly = rest.split(", exclusively").next().unwrap_or("").to_string();
            let resources = text.split(prefix::RESOURCES).nth(1).unwrap_or("");
            return knowledge_answer(&anomaly, resources);
        }
        if let Some(rest) = text.strip_prefix(prefix::IMAGE_DESCRIPTION) {
            let anomaly = rest.split(", strictly").next().unwrap_or("");
            let digest = first.images().next().map(|i| i.digest()).unwrap_or_default();
            return format!(
                "The reference page for {anomaly} (image {}) shows the characteristic surface pattern of {anomaly} across the powder bed.",
                &digest[..digest.len().min(12)]
            );
        }
        if let Some(rest) = text.strip_prefix(prefix::EXPLANATION) {
            let summary = rest.split(", provide a detailed").next().unwrap_or("");
            return explanation_answer(summary);
        }
        "0".into()
    }
}

fn excerpt(text: &str, n: usize) -> String {
    let flat: String = text.split_whitespace().collect::<Vec<_>>().join(" ");
    flat.chars().take(n).collect()
}

/// Sentences of a chunk minus the fragments cut at either end.
fn whole_sentences(chunk: &str) -> Vec<String> {
    let flat = excerpt(chunk, usize::MAX);
    let mut parts: Vec<&str> = flat.split(". ").collect();
    if !flat.trim_end().ends_with('.') {
        parts.pop();
    }
    if flat.starts_with(|c: char| c.is_lowercase()) && !parts.is_empty() {
        parts.remove(0);
    }
    parts
        .into_iter()
        .map(|s| s.trim().trim_end_matches('.').to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Extractive answer: for each heading, the resource sentences that match
/// its cue words, preferring those that name the anomaly.
fn knowledge_answer(anomaly: &str, resources: &str) -> String {
    let docs: Vec<&str> = resources
        .split("\n\n[")
        .map(|r| r.split_once("] ").map(|(_, t)| t).unwrap_or(r))
        .filter(|r| !r.trim().is_empty())
        .collect();
    let sentences: Vec<String> = docs.iter().flat_map(|d| whole_sentences(d)).collect();
    let name = anomaly.to_lowercase();
    let pick = |cues: &[&str]| -> Option<String> {
        let hits: Vec<&String> = sentences
            .iter()
            .filter(|s| {
                let l = s.to_lowercase();
                cues.iter().any(|c| l.contains(c))
            })
            .collect();
        let best = hits
            .iter()
            .find(|s| s.to_lowercase().contains(&name))
            .or(hits.first())?;
        Some(format!("{best}."))
    };
    let described: Vec<&String> = sentences
        .iter()
        .filter(|s| s.to_lowercase().contains(&name) && !s.to_lowercase().starts_with("comprehensive information"))
        .take(2)
        .collect();
    let description = if described.is_empty() {
        docs.first().map(|d| excerpt(d, 160))
    } else {
        Some(described.iter().map(|s| format!("{s}.")).collect::<Vec<_>>().join(" "))
    };
    let missing = |what: &str| format!("The provided resources give no {what} for {anomaly}.");
    let bodies = [
        description.unwrap_or_else(|| missing("description")),
        pick(&["cause"]).unwrap_or_else(|| missing("causes")),
        pick(&["appear", "shows", "visual", "looks"]).unwrap_or_else(|| missing("visual characteristics")),
        pick(&["prevent", "reduce", "avoid", "mitigat"]).unwrap_or_else(|| missing("prevention strategies")),
    ];
    KNOWLEDGE_HEADINGS
        .iter()
        .zip(bodies)
        .enumerate()
        .map(|(i, (h, b))| format!("{}. {h}\n{b}", i + 1))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn explanation_answer(summary: &str) -> String {
    let detected: Vec<&str> = summary
        .split(", ")
        .filter_map(|pair| pair.rsplit_once(": "))
        .filter(|(_, bit)| bit.trim() == "1")
        .map(|(name, _)| name)
        .collect();
    detected
        .iter()
        .map(|name| {
            format!(
                "## {name}\n1. {}\nProcess conditions consistent with {name} in the retrieved material.\n2. {}\nAdjust the parameters linked to {name}.\n3. {}\nMonitor later layers for recurrence of {name}.",
                EXPLANATION_HEADINGS[0], EXPLANATION_HEADINGS[1], EXPLANATION_HEADINGS[2]
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, capability: Capability, messages: &[ChatMessage], _params: &GenerationParams) -> Result<String, BackendError> {
        self.completions.fetch_add(1, Ordering::SeqCst);
        let digest = request_digest(messages);
        if let Some(r) = self
            .fixtures
            .lock()
            .expect("fixture lock poisoned")
            .get(&(capability, digest.clone()))
        {
            return Ok(r.clone());
        }
        if self.strict {
            return Err(BackendError::MissingFixture { capability, digest });
        }
        Ok(self.rule_engine(messages))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        self.embeddings.fetch_add(1, Ordering::SeqCst);
        Ok(texts.iter().map(|t| self.embedder.embed(t)).collect())
    }
}
