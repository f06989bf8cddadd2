//! The command-level workflow: each step reads the previous step's
//! artifacts under `output_dir` and writes its own.
//!
//! ```text
//! corpus/            ingest
//! index/             index
//! knowledge/<ds>/    knowledge
//! runs/<run_id>/     detect, evaluate, ablate, report
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BackendSpec, ConfigError, LoadedConfig, OracleSource};
use crate::corpus::{load_manifest, CorpusError, Ingestor};
use crate::dataset::{encode_one_hot, load_samples, load_taxonomy, AnomalyTaxonomy, DatasetError, TestSample};
use crate::digest::{sha256_hex, slug, FieldHasher};
use crate::evaluation::{
    ablation_compare, emit_report, evaluate, render_ablation_markdown, Ablation, EvalError, EvaluationReport,
    ReportFormat, Vectors,
};
use crate::gateway::mock::{MockBackend, MockError};
use crate::gateway::remote::{RemoteBackend, RemoteConfig};
use crate::gateway::{Backend, BackendSet, Capability, Gateway, GatewayError, DEFAULT_MAX_EMBED_CHARS};
use crate::index::{load_index, save_index, EntryKind, IndexError, VectorIndex};
use crate::pipeline::{Detector, PipelineError, SampleRecord};
use crate::retrieval::{build_all, build_index, AnomalyKnowledge, CorpusStore, KnowledgeCache, RetrievalError, Retriever};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{message}")]
    Prerequisite { message: String, hint: String },
    #[error("run directory is locked by another invocation: {0}")]
    Locked(PathBuf),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Pipeline(Box<PipelineError>),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
    #[error(transparent)]
    Fixtures(#[from] MockError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid artifact {path}: {source}")]
    Artifact {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

// Boxed: pipeline errors carry a gateway error and sample context.
impl From<PipelineError> for WorkflowError {
    fn from(e: PipelineError) -> Self {
        WorkflowError::Pipeline(Box::new(e))
    }
}

impl WorkflowError {
    fn prerequisite(message: impl Into<String>, step: &str) -> Self {
        WorkflowError::Prerequisite {
            message: message.into(),
            hint: format!("run `{step}` first"),
        }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        if self.missing_fixture().is_some() {
            return "missing_fixture";
        }
        match self {
            WorkflowError::Config(_) => "config",
            WorkflowError::Prerequisite { .. } => "missing_prerequisite",
            WorkflowError::Locked(_) => "locked",
            WorkflowError::Corpus(_) => "corpus",
            WorkflowError::Dataset(_) => "dataset",
            WorkflowError::Index(_) => "index",
            WorkflowError::Retrieval(_) => "retrieval",
            WorkflowError::Pipeline(_) => "pipeline",
            WorkflowError::Evaluation(_) => "evaluation",
            WorkflowError::Fixtures(_) => "fixtures",
            WorkflowError::Io { .. } => "io",
            WorkflowError::Artifact { .. } => "artifact",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            WorkflowError::Prerequisite { .. } => 2,
            WorkflowError::Config(_) => 3,
            WorkflowError::Locked(_) => 4,
            _ => 1,
        }
    }

    pub fn hint(&self) -> Option<String> {
        if let Some(d) = self.missing_fixture() {
            return Some(format!("register a fixture for request digest {d} or drop --strict-fixtures"));
        }
        match self {
            WorkflowError::Prerequisite { hint, .. } => Some(hint.clone()),
            WorkflowError::Locked(p) => Some(format!("wait for the other run or delete {}", p.display())),
            WorkflowError::Config(e) => e.field().map(|f| format!("check `{f}` in the config file")),
            _ => None,
        }
    }

    /// Request digest of a strict-mode fixture miss anywhere in the source chain.
    pub fn missing_fixture(&self) -> Option<String> {
        let mut cur: Option<&(dyn std::error::Error + 'static)> = Some(self);
        while let Some(e) = cur {
            if let Some(d) = e.downcast_ref::<GatewayError>().and_then(|g| g.missing_fixture_digest()) {
                return Some(d.to_string());
            }
            cur = e.source();
        }
        None
    }

    /// `{"error": {"kind", "message", "hint"}}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "error": {
                "kind": self.kind(),
                "message": self.to_string(),
                "hint": self.hint(),
            }
        })
    }
}

pub type Result<T, E = WorkflowError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkflowError + '_ {
    move |source| WorkflowError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| WorkflowError::Artifact {
        path: path.to_path_buf(),
        source,
    })
}

/// Written by `ingest`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub doc_ids: Vec<String>,
    pub page_count: usize,
    pub chunk_count: usize,
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub render_dpi: u32,
}

/// Written by `index` next to `index.bin`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub corpus_digest: String,
    pub embedding_backend: String,
    pub dim: Option<usize>,
    pub text_chunks: usize,
    pub page_proxies: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIds {
    pub chat: String,
    pub vision: String,
    pub embedding: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: String,
    pub file: String,
}

/// `runs/<run_id>/manifest.json`, and the same per arm of an ablation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub mode: String,
    pub ablate_retrieval: bool,
    pub config_digest: String,
    pub corpus_digest: String,
    pub dataset_id: String,
    pub backends: BackendIds,
    pub repetitions: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arms: Vec<String>,
}

/// `runs/<run_id>/ablation.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFile {
    pub dataset_id: String,
    #[serde(flatten)]
    pub ablation: Ablation,
}

pub const WITH_RETRIEVAL: &str = "with_retrieval";
pub const WITHOUT_RETRIEVAL: &str = "without_retrieval";
const RESERVED: [&str; 4] = ["manifest", "report", "ablation", "index"];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Options {
    pub run_id: Option<String>,
    pub ablate: bool,
    pub strict_fixtures: bool,
}

/// What a step produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Outcome {
    pub command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub output: PathBuf,
}

pub struct Workflow {
    cfg: LoadedConfig,
    opts: Options,
    taxonomy: AnomalyTaxonomy,
    samples: Vec<TestSample>,
    mock: Option<Arc<MockBackend>>,
    gateway: Gateway,
}

fn remote(url: &str, model: &str) -> Arc<dyn Backend> {
    Arc::new(RemoteBackend::from_env(RemoteConfig {
        url: url.to_string(),
        model: model.to_string(),
    }))
}

impl Workflow {
    pub fn new(cfg: LoadedConfig, opts: Options) -> Result<Self> {
        if let Some(id) = &opts.run_id {
            let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-'));
            if !ok {
                return Err(ConfigError::Invalid {
                    field: "--run-id".into(),
                    message: "may only contain letters, digits, `_` and `-`".into(),
                }
                .into());
            }
        }
        let taxonomy = load_taxonomy(cfg.dataset())?;
        let samples = load_samples(cfg.annotations(), &taxonomy)?;
        let c = &cfg.config;

        let mock = if c.backends.any_mock() {
            let m = MockBackend::with_dim(c.seed.unwrap_or_default(), c.mock.embedding_dim)
                .strict(c.mock.strict || opts.strict_fixtures);
            if let Some(p) = cfg.fixtures() {
                m.load_fixtures(&p)?;
            }
            if c.mock.oracle == OracleSource::GroundTruth {
                for s in &samples {
                    for img in &s.images {
                        let bytes = std::fs::read(&img.image_ref).map_err(io_err(&img.image_ref))?;
                        m.set_oracle(sha256_hex(&bytes), s.ground_truth.iter().cloned());
                    }
                }
            }
            Some(Arc::new(m))
        } else {
            None
        };
        let pick = |spec: &BackendSpec| -> Arc<dyn Backend> {
            match spec {
                BackendSpec::Mock => mock.clone().expect("mock exists when any backend is mock"),
                BackendSpec::Remote { url, model } => remote(url, model),
            }
        };
        let backends = BackendSet {
            chat: pick(&c.backends.chat),
            vision: pick(&c.backends.vision),
            embedding: pick(&c.backends.embedding),
        };
        let gateway = Gateway::with_max_in_flight(backends, c.rate_limit.max_in_flight);
        Ok(Self {
            cfg,
            opts,
            taxonomy,
            samples,
            mock,
            gateway,
        })
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn mock(&self) -> Option<&Arc<MockBackend>> {
        self.mock.as_ref()
    }

    pub fn taxonomy(&self) -> &AnomalyTaxonomy {
        &self.taxonomy
    }

    pub fn samples(&self) -> &[TestSample] {
        &self.samples
    }

    fn out(&self) -> PathBuf {
        self.cfg.output_dir()
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.out().join("corpus")
    }

    pub fn index_dir(&self) -> PathBuf {
        self.out().join("index")
    }

    pub fn knowledge_dir(&self) -> PathBuf {
        self.out().join("knowledge").join(self.taxonomy.dataset_id())
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out().join("runs")
    }

    fn ablated(&self) -> bool {
        self.opts.ablate || self.cfg.config.ablate_retrieval
    }

    /// Content-addressed default: first 12 hex chars of
    /// hash(mode, config digest, ablation flag).
    pub fn run_id(&self, mode: &str) -> String {
        if let Some(id) = &self.opts.run_id {
            return id.clone();
        }
        let ablated = mode == "detect" && self.ablated();
        let mut h = FieldHasher::new();
        h.field(mode).field(self.cfg.digest()).field([ablated as u8]);
        h.finish_hex()[..12].to_string()
    }

    fn backend_ids(&self) -> BackendIds {
        BackendIds {
            chat: self.gateway.backend_id(Capability::Chat).to_string(),
            vision: self.gateway.backend_id(Capability::Vision).to_string(),
            embedding: self.gateway.backend_id(Capability::Embedding).to_string(),
        }
    }

    pub fn ingest(&self) -> Result<Outcome> {
        let c = &self.cfg.config;
        let entries = load_manifest(self.cfg.corpus_manifest())?;
        let dir = self.corpus_dir();
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let ingestor = Ingestor::new(&dir)
            .with_dpi(c.render_dpi)
            .with_chunking(c.chunk_size, c.chunk_overlap);
        let docs = ingestor.ingest_corpus(&entries)?;
        let manifest = IngestManifest {
            doc_ids: entries.iter().map(|e| e.doc_id.clone()).collect(),
            page_count: docs.iter().map(|(d, _)| d.pages.len()).sum(),
            chunk_count: docs.iter().map(|(_, c)| c.len()).sum(),
            chunk_size: c.chunk_size,
            chunk_overlap: c.chunk_overlap,
            render_dpi: c.render_dpi,
        };
        write_json(&dir.join("ingest.json"), &manifest)?;
        log::info!("ingested {} documents, {} pages, {} chunks", manifest.doc_ids.len(), manifest.page_count, manifest.chunk_count);
        Ok(Outcome {
            command: "ingest",
            run_id: None,
            output: dir,
        })
    }

    fn load_store(&self) -> Result<CorpusStore> {
        let path = self.corpus_dir().join("ingest.json");
        if !path.is_file() {
            return Err(WorkflowError::prerequisite("the corpus has not been ingested", "ingest"));
        }
        let m: IngestManifest = read_json(&path)?;
        Ok(CorpusStore::load(self.corpus_dir(), &m.doc_ids)?)
    }

    pub fn index(&self) -> Result<Outcome> {
        let store = self.load_store()?;
        let index = build_index(&store, &self.gateway, DEFAULT_MAX_EMBED_CHARS)?;
        let dir = self.index_dir();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        save_index(&index, dir.join("index.bin"))?;
        let meta = IndexMeta {
            corpus_digest: store.digest().to_string(),
            embedding_backend: self.gateway.backend_id(Capability::Embedding).to_string(),
            dim: index.dim(),
            text_chunks: index.count_kind(EntryKind::TextChunk),
            page_proxies: index.count_kind(EntryKind::PageImageProxy),
        };
        write_json(&dir.join("meta.json"), &meta)?;
        Ok(Outcome {
            command: "index",
            run_id: None,
            output: dir,
        })
    }

    /// Corpus plus an index that matches it and the configured embedder.
    fn load_indexed(&self) -> Result<(CorpusStore, VectorIndex, IndexMeta)> {
        let meta_path = self.index_dir().join("meta.json");
        if !meta_path.is_file() {
            return Err(WorkflowError::prerequisite("no vector index found", "index"));
        }
        let store = self.load_store()?;
        let meta: IndexMeta = read_json(&meta_path)?;
        if meta.corpus_digest != store.digest() {
            return Err(WorkflowError::prerequisite("the index is stale: the corpus changed since it was built", "index"));
        }
        if meta.embedding_backend != self.gateway.backend_id(Capability::Embedding) {
            return Err(WorkflowError::prerequisite(
                format!("the index was built with embedding backend `{}`", meta.embedding_backend),
                "index",
            ));
        }
        let index = load_index(self.index_dir().join("index.bin"))?;
        Ok((store, index, meta))
    }

    pub fn knowledge(&self) -> Result<Outcome> {
        let (store, index, _) = self.load_indexed()?;
        let retriever = Retriever::new(&index, &store, &self.gateway, self.cfg.config.retrieval)?;
        let cache = KnowledgeCache::on_disk(self.knowledge_dir());
        build_all(&cache, &retriever, self.taxonomy.anomalies())?;
        Ok(Outcome {
            command: "knowledge",
            run_id: None,
            output: self.knowledge_dir(),
        })
    }

    /// Cached packets for every anomaly; all must be current.
    fn load_knowledge(&self, store: &CorpusStore, index: &VectorIndex) -> Result<BTreeMap<String, AnomalyKnowledge>> {
        let retriever = Retriever::new(index, store, &self.gateway, self.cfg.config.retrieval)?;
        let cache = KnowledgeCache::on_disk(self.knowledge_dir());
        let mut out = BTreeMap::new();
        for name in self.taxonomy.anomalies() {
            let k = cache
                .get(name, &retriever.cache_key(name))?
                .ok_or_else(|| WorkflowError::prerequisite(format!("no current knowledge packet for `{name}`"), "knowledge"))?;
            out.insert(name.clone(), k);
        }
        Ok(out)
    }

    fn sample_file(sample_id: &str) -> String {
        let s = slug(sample_id);
        if RESERVED.contains(&s.as_str()) {
            format!("sample_{s}.json")
        } else {
            format!("{s}.json")
        }
    }

    fn check_sample_files(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for s in &self.samples {
            if let Some(prev) = seen.insert(Self::sample_file(&s.sample_id), &s.sample_id) {
                return Err(WorkflowError::Dataset(DatasetError::DuplicateSample(format!(
                    "{} (file name collides with {prev})",
                    s.sample_id
                ))));
            }
        }
        Ok(())
    }

    fn base_manifest(&self, run_id: &str, mode: &str, ablated: bool, corpus_digest: &str) -> RunManifest {
        RunManifest {
            run_id: run_id.to_string(),
            mode: mode.to_string(),
            ablate_retrieval: ablated,
            config_digest: self.cfg.digest(),
            corpus_digest: corpus_digest.to_string(),
            dataset_id: self.taxonomy.dataset_id().to_string(),
            backends: self.backend_ids(),
            repetitions: self.cfg.config.repetitions,
            samples: Vec::new(),
            arms: Vec::new(),
        }
    }

    /// Runs every sample and writes `<sample>.json` plus `manifest.json` into `dir`.
    fn run_arm(&self, dir: &Path, mut manifest: RunManifest, knowledge: Option<&BTreeMap<String, AnomalyKnowledge>>) -> Result<Vec<SampleRecord>> {
        let detector = Detector::new(&self.gateway, &self.taxonomy, knowledge, self.cfg.pipeline_params())?;
        let records = self
            .samples
            .par_iter()
            .map(|s| detector.process_sample(s).map_err(WorkflowError::from))
            .collect::<Result<Vec<_>, _>>()?;
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        for r in &records {
            let file = Self::sample_file(&r.sample_id);
            write_json(&dir.join(&file), r)?;
            manifest.samples.push(SampleEntry {
                sample_id: r.sample_id.clone(),
                file,
            });
        }
        write_json(&dir.join("manifest.json"), &manifest)?;
        Ok(records)
    }

    fn reset_run_dir(&self, run_id: &str) -> Result<(PathBuf, RunLock)> {
        let runs = self.runs_dir();
        std::fs::create_dir_all(&runs).map_err(io_err(&runs))?;
        let lock = RunLock::acquire(runs.join(format!("{run_id}.lock")))?;
        let dir = runs.join(run_id);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok((dir, lock))
    }

    pub fn detect(&self) -> Result<Outcome> {
        let ablated = self.ablated();
        self.check_sample_files()?;
        let (store, index, meta) = self.load_indexed()?;
        let knowledge = if ablated {
            None
        } else {
            Some(self.load_knowledge(&store, &index)?)
        };
        let run_id = self.run_id("detect");
        let (dir, _lock) = self.reset_run_dir(&run_id)?;
        let manifest = self.base_manifest(&run_id, "detect", ablated, &meta.corpus_digest);
        self.run_arm(&dir, manifest, knowledge.as_ref())?;
        Ok(Outcome {
            command: "detect",
            run_id: Some(run_id),
            output: dir,
        })
    }

    fn truths(&self) -> Result<Vectors> {
        self.samples
            .iter()
            .map(|s| Ok((s.sample_id.clone(), encode_one_hot(&s.ground_truth, &self.taxonomy)?)))
            .collect()
    }

    /// Scores the sample records listed in `dir/manifest.json` and writes reports.
    fn evaluate_arm(&self, dir: &Path) -> Result<EvaluationReport> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.is_file() {
            return Err(WorkflowError::prerequisite(format!("no detection run at {}", dir.display()), "detect"));
        }
        let manifest: RunManifest = read_json(&manifest_path)?;
        let mut preds = Vectors::new();
        for e in &manifest.samples {
            let r: SampleRecord = read_json(&dir.join(&e.file))?;
            preds.insert(r.sample_id, r.classification.one_hot);
        }
        let report = evaluate(&self.taxonomy, &preds, &self.truths()?)?;
        write_bytes(&dir.join("report.json"), &emit_report(&report, ReportFormat::Json))?;
        write_bytes(&dir.join("report.md"), &emit_report(&report, ReportFormat::Markdown))?;
        Ok(report)
    }

    fn write_ablation(&self, dir: &Path, with: &EvaluationReport, without: &EvaluationReport) -> Result<Ablation> {
        let a = ablation_compare(with, without)?;
        write_json(
            &dir.join("ablation.json"),
            &AblationFile {
                dataset_id: self.taxonomy.dataset_id().to_string(),
                ablation: a,
            },
        )?;
        let md = render_ablation_markdown(&[(self.taxonomy.dataset_id().to_string(), a)]);
        write_bytes(&dir.join("ablation.md"), md.as_bytes())?;
        Ok(a)
    }

    fn existing_run(&self, mode: &str) -> Result<(String, PathBuf)> {
        let run_id = self.run_id(mode);
        let dir = self.runs_dir().join(&run_id);
        if !dir.join("manifest.json").is_file() {
            return Err(WorkflowError::prerequisite(format!("run `{run_id}` does not exist"), mode));
        }
        Ok((run_id, dir))
    }

    /// Evaluates a detection run, or both arms of an ablation run.
    pub fn evaluate(&self) -> Result<Outcome> {
        let (run_id, dir) = match self.existing_run("detect") {
            Ok(found) => found,
            Err(e) if self.opts.run_id.is_none() => match self.existing_run("ablate") {
                Ok(found) => found,
                Err(_) => return Err(e),
            },
            Err(e) => return Err(e),
        };
        let _lock = RunLock::acquire(self.runs_dir().join(format!("{run_id}.lock")))?;
        let manifest: RunManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.arms.is_empty() {
            self.evaluate_arm(&dir)?;
        } else {
            let with = self.evaluate_arm(&dir.join(WITH_RETRIEVAL))?;
            let without = self.evaluate_arm(&dir.join(WITHOUT_RETRIEVAL))?;
            self.write_ablation(&dir, &with, &without)?;
        }
        Ok(Outcome {
            command: "evaluate",
            run_id: Some(run_id),
            output: dir,
        })
    }

    /// Detection with and without retrieval, then both reports and the comparison.
    pub fn ablate(&self) -> Result<Outcome> {
        self.check_sample_files()?;
        let (store, index, meta) = self.load_indexed()?;
        let knowledge = self.load_knowledge(&store, &index)?;
        let run_id = self.run_id("ablate");
        let (dir, _lock) = self.reset_run_dir(&run_id)?;

        let mut root = self.base_manifest(&run_id, "ablate", false, &meta.corpus_digest);
        root.arms = vec![WITH_RETRIEVAL.into(), WITHOUT_RETRIEVAL.into()];
        let with_dir = dir.join(WITH_RETRIEVAL);
        let without_dir = dir.join(WITHOUT_RETRIEVAL);
        self.run_arm(&with_dir, self.base_manifest(&run_id, "ablate", false, &meta.corpus_digest), Some(&knowledge))?;
        self.run_arm(&without_dir, self.base_manifest(&run_id, "ablate", true, &meta.corpus_digest), None)?;
        write_json(&dir.join("manifest.json"), &root)?;

        let with = self.evaluate_arm(&with_dir)?;
        let without = self.evaluate_arm(&without_dir)?;
        self.write_ablation(&dir, &with, &without)?;
        Ok(Outcome {
            command: "ablate",
            run_id: Some(run_id),
            output: dir,
        })
    }

    /// Re-renders markdown from the stored JSON reports.
    pub fn report(&self) -> Result<Outcome> {
        let (run_id, dir) = match self.existing_run("detect") {
            Ok(found) => found,
            Err(e) if self.opts.run_id.is_none() => match self.existing_run("ablate") {
                Ok(found) => found,
                Err(_) => return Err(e),
            },
            Err(e) => return Err(e),
        };
        let manifest: RunManifest = read_json(&dir.join("manifest.json"))?;
        let arms: Vec<PathBuf> = if manifest.arms.is_empty() {
            vec![dir.clone()]
        } else {
            manifest.arms.iter().map(|a| dir.join(a)).collect()
        };
        let mut reports = Vec::new();
        for arm in &arms {
            let p = arm.join("report.json");
            if !p.is_file() {
                return Err(WorkflowError::prerequisite(format!("run `{run_id}` has not been evaluated"), "evaluate"));
            }
            let r: EvaluationReport = read_json(&p)?;
            write_bytes(&arm.join("report.md"), &emit_report(&r, ReportFormat::Markdown))?;
            reports.push(r);
        }
        if let [with, without] = reports.as_slice() {
            self.write_ablation(&dir, with, without)?;
        }
        Ok(Outcome {
            command: "report",
            run_id: Some(run_id),
            output: dir,
        })
    }
}

/// Exclusive marker file for one run directory; removed on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(path: PathBuf) -> Result<Self> {
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(WorkflowError::Locked(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
