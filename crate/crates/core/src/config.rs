//! Run configuration: one JSON file drives every workflow step.
//!
//! Relative paths resolve against the directory holding the config file.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_SIZE, DEFAULT_RENDER_DPI};
use crate::digest::{sha256_hex, FieldHasher};
use crate::gateway::mock::DEFAULT_EMBEDDING_DIM;
use crate::gateway::{GenerationParams, DEFAULT_MAX_IN_FLIGHT};
use crate::pipeline::{ClassificationMode, PipelineParams, DEFAULT_REPETITIONS};
use crate::retrieval::RetrievalParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path} at `{field}`: {message}")]
    Schema {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("invalid config: `{field}` {message}")]
    Invalid { field: String, message: String },
}

impl ConfigError {
    fn invalid(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// Offending field, when known.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Schema { field, .. } | ConfigError::Invalid { field, .. } => Some(field),
            ConfigError::Io { .. } => None,
        }
    }
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    #[default]
    Mock,
    Remote { url: String, model: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendsConfig {
    pub chat: BackendSpec,
    pub vision: BackendSpec,
    pub embedding: BackendSpec,
}

impl BackendsConfig {
    pub fn any_mock(&self) -> bool {
        [&self.chat, &self.vision, &self.embedding]
            .iter()
            .any(|b| matches!(b, BackendSpec::Mock))
    }
}

/// Where the mock's detection oracle comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleSource {
    #[default]
    None,
    /// Each test image's oracle set is its sample's annotated anomalies.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockConfig {
    pub strict: bool,
    pub fixtures: Option<PathBuf>,
    pub oracle: OracleSource,
    pub embedding_dim: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            strict: false,
            fixtures: None,
            oracle: OracleSource::None,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateLimitConfig {
    pub max_in_flight: usize,
}

impl Default for RateLimitConfig {
    fn default() -> Self {
        Self {
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub detection_temperature: f64,
    pub detection_max_tokens: u32,
    pub structured_temperature: f64,
    pub structured_max_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let d = GenerationParams::detection();
        let s = GenerationParams::structured();
        Self {
            detection_temperature: d.temperature,
            detection_max_tokens: d.max_tokens,
            structured_temperature: s.temperature,
            structured_max_tokens: s.max_tokens,
        }
    }
}

fn default_repetitions() -> u32 {
    DEFAULT_REPETITIONS
}
fn default_chunk_size() -> usize {
    DEFAULT_CHUNK_SIZE
}
fn default_chunk_overlap() -> usize {
    DEFAULT_CHUNK_OVERLAP
}
fn default_render_dpi() -> u32 {
    DEFAULT_RENDER_DPI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus_manifest: PathBuf,
    pub dataset: PathBuf,
    pub annotations: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default)]
    pub ablate_retrieval: bool,
    #[serde(default)]
    pub classification_mode: ClassificationMode,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
    #[serde(default = "default_chunk_overlap")]
    pub chunk_overlap: usize,
    #[serde(default = "default_render_dpi")]
    pub render_dpi: u32,
    #[serde(default)]
    pub retrieval: RetrievalParams,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub mock: MockConfig,
    #[serde(default)]
    pub rate_limit: RateLimitConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
}

/// A validated config plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub path: PathBuf,
    pub base_dir: PathBuf,
}

pub fn parse_config_str(text: &str, origin: &Path) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        ConfigError::Schema {
            path: origin.to_path_buf(),
            field: if field == "." { "(root)".into() } else { field },
            message: e.into_inner().to_string(),
        }
    })
}

/// Reads, parses and validates a config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<LoadedConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let config = parse_config_str(&text, path)?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let loaded = LoadedConfig {
        config,
        path: path.to_path_buf(),
        base_dir,
    };
    loaded.validate()?;
    Ok(loaded)
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn corpus_manifest(&self) -> PathBuf {
        self.resolve(&self.config.corpus_manifest)
    }

    pub fn dataset(&self) -> PathBuf {
        self.resolve(&self.config.dataset)
    }

    pub fn annotations(&self) -> PathBuf {
        self.resolve(&self.config.annotations)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    pub fn fixtures(&self) -> Option<PathBuf> {
        self.config.mock.fixtures.as_deref().map(|p| self.resolve(p))
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        for (field, p) in [
            ("corpus_manifest", self.corpus_manifest()),
            ("dataset", self.dataset()),
            ("annotations", self.annotations()),
        ] {
            if !p.is_file() {
                return Err(ConfigError::invalid(field, format!("points to a missing file: {}", p.display())));
            }
        }
        if let Some(p) = self.fixtures() {
            if !p.is_file() {
                return Err(ConfigError::invalid("mock.fixtures", format!("points to a missing file: {}", p.display())));
            }
        }
        if c.repetitions < 1 {
            return Err(ConfigError::invalid("repetitions", "must be >= 1"));
        }
        if c.backends.any_mock() && c.seed.is_none() {
            return Err(ConfigError::invalid("seed", "is required when any backend is `mock`"));
        }
        if c.chunk_size < 1 {
            return Err(ConfigError::invalid("chunk_size", "must be >= 1"));
        }
        if c.chunk_overlap >= c.chunk_size {
            return Err(ConfigError::invalid("chunk_overlap", "must be smaller than chunk_size"));
        }
        if c.render_dpi < 72 {
            return Err(ConfigError::invalid("render_dpi", "must be >= 72"));
        }
        c.retrieval
            .validate()
            .map_err(|e| ConfigError::invalid("retrieval", e.to_string()))?;
        if c.mock.embedding_dim < 1 {
            return Err(ConfigError::invalid("mock.embedding_dim", "must be >= 1"));
        }
        if c.rate_limit.max_in_flight < 1 {
            return Err(ConfigError::invalid("rate_limit.max_in_flight", "must be >= 1"));
        }
        let g = &c.generation;
        for (field, t) in [
            ("generation.detection_temperature", g.detection_temperature),
            ("generation.structured_temperature", g.structured_temperature),
        ] {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(ConfigError::invalid(field, "must be a finite number >= 0"));
            }
        }
        for (field, n) in [
            ("generation.detection_max_tokens", g.detection_max_tokens),
            ("generation.structured_max_tokens", g.structured_max_tokens),
        ] {
            if n == 0 {
                return Err(ConfigError::invalid(field, "must be > 0"));
            }
        }
        for (field, b) in [
            ("backends.chat", &c.backends.chat),
            ("backends.vision", &c.backends.vision),
            ("backends.embedding", &c.backends.embedding),
        ] {
            if let BackendSpec::Remote { url, model } = b {
                if url.trim().is_empty() || model.trim().is_empty() {
                    return Err(ConfigError::invalid(field, "remote backends need a non-empty `url` and `model`"));
                }
            }
        }
        Ok(())
    }

    pub fn pipeline_params(&self) -> PipelineParams {
        let g = &self.config.generation;
        PipelineParams {
            repetitions: self.config.repetitions,
            classification_mode: self.config.classification_mode,
            detection: GenerationParams {
                temperature: g.detection_temperature,
                max_tokens: g.detection_max_tokens,
                seed: self.config.seed,
            },
            structured: GenerationParams {
                temperature: g.structured_temperature,
                max_tokens: g.structured_max_tokens,
                seed: self.config.seed,
            },
        }
    }

    /// Digest of everything that determines a run's results: the config
    /// itself (minus `output_dir`) and the contents of the dataset,
    /// annotation and fixture files.
    pub fn digest(&self) -> String {
        let mut c = self.config.clone();
        c.output_dir = PathBuf::new();
        let mut h = FieldHasher::new();
        h.field(serde_json::to_vec(&c).expect("config serializes"));
        for p in [Some(self.dataset()), Some(self.annotations()), self.fixtures()]
            .into_iter()
            .flatten()
        {
            h.field(std::fs::read(&p).map(|b| sha256_hex(&b)).unwrap_or_default());
        }
        h.finish_hex()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(body: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        for f in ["manifest.json", "dataset.json", "annotations.json"] {
            std::fs::write(dir.path().join(f), "[]").unwrap();
        }
        let p = dir.path().join("config.json");
        std::fs::write(&p, body).unwrap();
        (dir, p)
    }

    const MINIMAL: &str = r#"{"corpus_manifest": "manifest.json", "dataset": "dataset.json",
        "annotations": "annotations.json", "output_dir": "out", "seed": 7}"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let (dir, p) = setup(MINIMAL);
        let c = parse_config(&p).unwrap();
        assert_eq!(c.config.repetitions, 3);
        assert_eq!(c.config.retrieval.k_text, 3);
        assert_eq!(c.config.retrieval.k_image, 3);
        assert_eq!(c.config.retrieval.image_score_threshold, 0.25);
        assert_eq!(c.config.backends.chat, BackendSpec::Mock);
        assert_eq!(c.output_dir(), dir.path().join("out"));
        assert_eq!(c.pipeline_params().detection.temperature, 0.7);
    }

    #[test]
    fn unknown_keys_are_named() {
        let (_d, p) = setup(&MINIMAL.replace("\"seed\": 7", "\"seed\": 7, \"chunk_sz\": 5"));
        let e = parse_config(&p).unwrap_err();
        assert!(e.to_string().contains("chunk_sz"), "{e}");

        let (_d, p) = setup(&MINIMAL.replace("\"seed\": 7", "\"seed\": 7, \"retrieval\": {\"k_txt\": 1}"));
        let e = parse_config(&p).unwrap_err();
        assert_eq!(e.field(), Some("retrieval.k_txt"));
        assert!(e.to_string().contains("k_txt"));
    }

    #[test]
    fn validation_errors() {
        let cases = [
            ("\"seed\": 7, \"repetitions\": 0", "repetitions"),
            ("\"seed\": null", "seed"),
            ("\"seed\": 7, \"chunk_overlap\": 1000", "chunk_overlap"),
            ("\"seed\": 7, \"retrieval\": {\"k_text\": 0}", "retrieval"),
            (
                "\"seed\": 7, \"backends\": {\"chat\": {\"kind\": \"remote\", \"url\": \"\", \"model\": \"m\"}}",
                "backends.chat",
            ),
        ];
        for (patch, field) in cases {
            let (_d, p) = setup(&MINIMAL.replace("\"seed\": 7", patch));
            let e = parse_config(&p).unwrap_err();
            assert_eq!(e.field(), Some(field), "{e}");
        }
        let (_d, p) = setup(&MINIMAL.replace("manifest.json", "nope.json"));
        assert_eq!(parse_config(&p).unwrap_err().field(), Some("corpus_manifest"));
    }

    #[test]
    fn remote_only_needs_no_seed() {
        let remote = r#"{"kind": "remote", "url": "https://x/v1", "model": "m"}"#;
        let body = MINIMAL.replace(
            "\"seed\": 7",
            &format!("\"backends\": {{\"chat\": {remote}, \"vision\": {remote}, \"embedding\": {remote}}}"),
        );
        let (_d, p) = setup(&body);
        parse_config(&p).unwrap();
    }

    #[test]
    fn digest_ignores_output_dir_only() {
        let (_d, p) = setup(MINIMAL);
        let a = parse_config(&p).unwrap();
        let mut b = a.clone();
        b.config.output_dir = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.config.ablate_retrieval = true;
        assert_ne!(a.digest(), b.digest());
    }
}
