//! Uniform access to chat, vision and embedding models.
//!
//! A [`Gateway`] routes each capability to a [`Backend`] (remote HTTP or the
//! offline [`mock::MockBackend`]), validates payloads before anything leaves
//! the process, bounds in-flight requests per backend and retries transient
//! failures with exponential backoff.

pub mod hashing;
pub mod limiter;
pub mod mock;
pub mod remote;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{sha256_hex, FieldHasher};
use crate::index::EmbeddingVector;
use limiter::ConcurrencyLimiter;

pub const DEFAULT_MAX_IN_FLIGHT: usize = 2;
pub const DEFAULT_MAX_PAYLOAD_BYTES: usize = 20 * 1024 * 1024;
pub const DEFAULT_MAX_EMBED_CHARS: usize = 32_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Chat,
    Vision,
    Embedding,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capability::Chat => "chat",
            Capability::Vision => "vision",
            Capability::Embedding => "embedding",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// Raster bytes plus their media type.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageData {
    bytes: Arc<Vec<u8>>,
    media_type: String,
}

impl fmt::Debug for ImageData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageData")
            .field("media_type", &self.media_type)
            .field("len", &self.bytes.len())
            .field("digest", &&self.digest()[..16])
            .finish()
    }
}

impl ImageData {
    /// Media type is sniffed from the bytes; undecodable data is accepted
    /// here and rejected by the gateway.
    pub fn new(bytes: Vec<u8>) -> Self {
        let media_type = match image::guess_format(&bytes) {
            Ok(image::ImageFormat::Png) => "image/png",
            Ok(image::ImageFormat::Jpeg) => "image/jpeg",
            _ => "application/octet-stream",
        }
        .to_string();
        Self {
            bytes: Arc::new(bytes),
            media_type,
        }
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> std::io::Result<Self> {
        Ok(Self::new(std::fs::read(path)?))
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn media_type(&self) -> &str {
        &self.media_type
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.bytes)
    }

    pub fn validate(&self) -> Result<(), String> {
        image::load_from_memory(&self.bytes)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Image(ImageData),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn new(role: Role, parts: Vec<Part>) -> Self {
        Self { role, parts }
    }

    pub fn user_text(text: impl Into<String>) -> Self {
        Self::new(Role::User, vec![Part::Text(text.into())])
    }

    pub fn assistant_text(text: impl Into<String>) -> Self {
        Self::new(Role::Assistant, vec![Part::Text(text.into())])
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageData> {
        self.parts.iter().filter_map(|p| match p {
            Part::Image(i) => Some(i),
            Part::Text(_) => None,
        })
    }

    /// All text parts joined without separators.
    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect()
    }

    fn payload_bytes(&self) -> usize {
        self.parts
            .iter()
            .map(|p| match p {
                Part::Text(t) => t.len(),
                Part::Image(i) => i.bytes().len(),
            })
            .sum()
    }
}

/// Human-readable, deterministic rendering of a message list: text verbatim,
/// images as `<image:{media_type}:{digest16}>`.
pub fn transcript(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for (i, m) in messages.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("[{}]\n", m.role.as_str()));
        for p in &m.parts {
            match p {
                Part::Text(t) => out.push_str(t),
                Part::Image(img) => {
                    out.push_str(&format!("<image:{}:{}>", img.media_type(), &img.digest()[..16]))
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Content digest of a request: roles, texts and image digests in order.
/// Generation parameters are not part of the key.
pub fn request_digest(messages: &[ChatMessage]) -> String {
    let mut h = FieldHasher::new();
    for m in messages {
        h.field(m.role.as_str());
        for p in &m.parts {
            match p {
                Part::Text(t) => h.field("text").field(t),
                Part::Image(img) => h.field("image").field(img.digest()),
            };
        }
    }
    h.finish_hex()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl GenerationParams {
    /// Stochastic decoding for repeated detection calls.
    pub fn detection() -> Self {
        Self {
            temperature: 0.7,
            max_tokens: 512,
            seed: None,
        }
    }

    /// Greedy decoding for calls whose output is parsed.
    pub fn structured() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self::structured()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResponse {
    pub text: String,
    pub backend_id: String,
    pub latency: Duration,
    pub attempt_count: u32,
}

/// Failure reported by a backend for a single attempt.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("authentication rejected ({status})")]
    Auth { status: u16 },
    #[error("rate limited (429)")]
    RateLimited,
    #[error("payload too large ({status})")]
    PayloadTooLarge { status: u16 },
    #[error("client error {status}: {message}")]
    Client { status: u16, message: String },
    #[error("server error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("no fixture registered for {capability} request {digest}")]
    MissingFixture { capability: Capability, digest: String },
    #[error("capability {0} is not supported by this backend")]
    Unsupported(Capability),
}

impl BackendError {
    /// Only throttling, server faults and transport failures are retried.
    pub fn is_retriable(&self) -> bool {
        matches!(
            self,
            BackendError::RateLimited | BackendError::Server { .. } | BackendError::Transport(_)
        )
    }

    pub fn from_status(status: u16, message: String) -> Self {
        match status {
            401 | 403 => BackendError::Auth { status },
            413 => BackendError::PayloadTooLarge { status },
            429 => BackendError::RateLimited,
            400..=499 => BackendError::Client { status, message },
            _ => BackendError::Server { status, message },
        }
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(
        &self,
        capability: Capability,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<String, BackendError>;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("chat requests cannot carry images (message {message}, part {part})")]
    ImageInChat { message: usize, part: usize },
    #[error("vision requests need at least one image")]
    NoImage,
    #[error("message {0} has no parts")]
    EmptyMessage(usize),
    #[error("image {index} cannot be decoded: {reason}")]
    InvalidImage { index: usize, reason: String },
    #[error("payload of {bytes} bytes exceeds the {limit}-byte limit")]
    PayloadTooLarge { bytes: usize, limit: usize },
    #[error("embedding input {0} is empty")]
    EmptyInput(usize),
    #[error("embedding input {index} has {chars} chars; limit is {limit}")]
    InputTooLong { index: usize, chars: usize, limit: usize },
    #[error("backend `{backend}` rejected credentials")]
    Auth { backend: String },
    #[error("backend `{backend}` failed after {attempts} attempts: {last}")]
    RetriesExhausted {
        backend: String,
        attempts: u32,
        last: BackendError,
    },
    #[error("backend `{backend}`: {source}")]
    Backend {
        backend: String,
        #[source]
        source: BackendError,
    },
    #[error("backend `{0}` returned an empty response")]
    EmptyResponse(String),
    #[error("embedding batch returned {got} vectors for {expected} inputs")]
    BatchSize { expected: usize, got: usize },
    #[error("embedding {index} is invalid: {reason}")]
    InvalidEmbedding { index: usize, reason: String },
}

impl GatewayError {
    /// Digest named by a strict-mode fixture miss, if that is what this is.
    pub fn missing_fixture_digest(&self) -> Option<&str> {
        match self {
            GatewayError::Backend {
                source: BackendError::MissingFixture { digest, .. },
                ..
            } => Some(digest),
            _ => None,
        }
    }
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Wait before attempt `attempt + 1`, for `attempt >= 1`.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay
            .mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Which backend serves which capability.
#[derive(Clone)]
pub struct BackendSet {
    pub chat: Arc<dyn Backend>,
    pub vision: Arc<dyn Backend>,
    pub embedding: Arc<dyn Backend>,
}

impl BackendSet {
    pub fn uniform(backend: Arc<dyn Backend>) -> Self {
        Self {
            chat: backend.clone(),
            vision: backend.clone(),
            embedding: backend,
        }
    }

    fn for_capability(&self, c: Capability) -> &Arc<dyn Backend> {
        match c {
            Capability::Chat => &self.chat,
            Capability::Vision => &self.vision,
            Capability::Embedding => &self.embedding,
        }
    }
}

/// Thread-safe entry point for all model calls.
pub struct Gateway {
    backends: BackendSet,
    limiters: HashMap<String, Arc<ConcurrencyLimiter>>,
    retry: RetryPolicy,
    sleeper: Sleeper,
    max_payload_bytes: usize,
    max_embed_chars: usize,
    calls: AtomicU64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("chat", &self.backends.chat.id())
            .field("vision", &self.backends.vision.id())
            .field("embedding", &self.backends.embedding.id())
            .field("retry", &self.retry)
            .finish()
    }
}

impl Gateway {
    pub fn new(backends: BackendSet) -> Self {
        Self::with_max_in_flight(backends, DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn with_max_in_flight(backends: BackendSet, max_in_flight: usize) -> Self {
        let mut limiters = HashMap::new();
        for c in [Capability::Chat, Capability::Vision, Capability::Embedding] {
            limiters
                .entry(backends.for_capability(c).id().to_string())
                .or_insert_with(|| Arc::new(ConcurrencyLimiter::new(max_in_flight)));
        }
        Self {
            backends,
            limiters,
            retry: RetryPolicy::default(),
            sleeper: Arc::new(std::thread::sleep),
            max_payload_bytes: DEFAULT_MAX_PAYLOAD_BYTES,
            max_embed_chars: DEFAULT_MAX_EMBED_CHARS,
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_max_payload_bytes(mut self, limit: usize) -> Self {
        self.max_payload_bytes = limit;
        self
    }

    pub fn with_max_embed_chars(mut self, limit: usize) -> Self {
        self.max_embed_chars = limit;
        self
    }

    pub fn backend_id(&self, c: Capability) -> &str {
        self.backends.for_capability(c).id()
    }

    /// Requests issued through this gateway (attempts are not counted separately).
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn complete_chat(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<ModelResponse> {
        self.validate_messages(messages)?;
        for (mi, m) in messages.iter().enumerate() {
            if let Some(pi) = m.parts.iter().position(|p| matches!(p, Part::Image(_))) {
                return Err(GatewayError::ImageInChat { message: mi, part: pi });
            }
        }
        self.complete(Capability::Chat, messages, params)
    }

    pub fn complete_vision(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<ModelResponse> {
        self.validate_messages(messages)?;
        let images: Vec<&ImageData> = messages.iter().flat_map(|m| m.images()).collect();
        if images.is_empty() {
            return Err(GatewayError::NoImage);
        }
        for (index, img) in images.iter().enumerate() {
            img.validate()
                .map_err(|reason| GatewayError::InvalidImage { index, reason })?;
        }
        self.complete(Capability::Vision, messages, params)
    }

    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        for (index, t) in texts.iter().enumerate() {
            if t.trim().is_empty() {
                return Err(GatewayError::EmptyInput(index));
            }
            let chars = t.chars().count();
            if chars > self.max_embed_chars {
                return Err(GatewayError::InputTooLong {
                    index,
                    chars,
                    limit: self.max_embed_chars,
                });
            }
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let backend = self.backends.embedding.clone();
        let (raw, _) = self.with_retries(&backend, || backend.embed(texts))?;
        if raw.len() != texts.len() {
            return Err(GatewayError::BatchSize {
                expected: texts.len(),
                got: raw.len(),
            });
        }
        let dim = raw.first().map(Vec::len).unwrap_or(0);
        raw.into_iter()
            .enumerate()
            .map(|(index, v)| {
                if v.len() != dim {
                    return Err(GatewayError::InvalidEmbedding {
                        index,
                        reason: format!("dimension {} differs from {dim}", v.len()),
                    });
                }
                EmbeddingVector::new(v).map_err(|e| GatewayError::InvalidEmbedding {
                    index,
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    fn validate_messages(&self, messages: &[ChatMessage]) -> Result<()> {
        if let Some(i) = messages.iter().position(|m| m.parts.is_empty()) {
            return Err(GatewayError::EmptyMessage(i));
        }
        if messages.is_empty() {
            return Err(GatewayError::EmptyMessage(0));
        }
        let bytes: usize = messages.iter().map(ChatMessage::payload_bytes).sum();
        if bytes > self.max_payload_bytes {
            return Err(GatewayError::PayloadTooLarge {
                bytes,
                limit: self.max_payload_bytes,
            });
        }
        Ok(())
    }

    fn complete(&self, capability: Capability, messages: &[ChatMessage], params: &GenerationParams) -> Result<ModelResponse> {
        let backend = self.backends.for_capability(capability).clone();
        let started = Instant::now();
        let (text, attempt_count) =
            self.with_retries(&backend, || backend.complete(capability, messages, params))?;
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyResponse(backend.id().to_string()));
        }
        Ok(ModelResponse {
            text,
            backend_id: backend.id().to_string(),
            latency: started.elapsed(),
            attempt_count,
        })
    }

    fn with_retries<T>(
        &self,
        backend: &Arc<dyn Backend>,
        mut call: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<(T, u32)> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let limiter = self
            .limiters
            .get(backend.id())
            .cloned()
            .unwrap_or_else(|| Arc::new(ConcurrencyLimiter::new(DEFAULT_MAX_IN_FLIGHT)));
        let id = backend.id().to_string();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = limiter.acquire();
                call()
            };
            match outcome {
                Ok(v) => return Ok((v, attempt)),
                Err(BackendError::Auth { .. }) => return Err(GatewayError::Auth { backend: id }),
                Err(e) if e.is_retriable() => {
                    if attempt >= self.retry.max_attempts {
                        return Err(GatewayError::RetriesExhausted {
                            backend: id,
                            attempts: attempt,
                            last: e,
                        });
                    }
                    log::debug!("{id}: attempt {attempt} failed ({e}); retrying");
                    (self.sleeper)(self.retry.delay_after(attempt));
                }
                Err(source) => return Err(GatewayError::Backend { backend: id, source }),
            }
        }
    }
}
