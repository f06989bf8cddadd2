//! Chat-completions and embeddings over HTTPS.
//!
//! Requests follow the common vendor wire format:
//! `{model, messages: [{role, content: [{type: "text"|"image_url", ...}]}], temperature, max_tokens}`
//! with images as base64 data URLs, and `{model, input: [...]}` for embeddings.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{Backend, BackendError, Capability, ChatMessage, GenerationParams, Part};

pub const API_KEY_ENV: &str = "PBF_RAG_API_KEY";

static NETWORK_REQUESTS: AtomicU64 = AtomicU64::new(0);

/// Requests sent by [`UreqTransport`] in this process.
pub fn network_request_count() -> u64 {
    NETWORK_REQUESTS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpReply, BackendError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpReply, BackendError> {
        NETWORK_REQUESTS.fetch_add(1, Ordering::SeqCst);
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send(body.to_string())
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    pub url: String,
    pub model: String,
}

/// One remote endpoint serving either completions or embeddings.
pub struct RemoteBackend {
    id: String,
    config: RemoteConfig,
    api_key: Option<String>,
    transport: Arc<dyn HttpTransport>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig, api_key: Option<String>, transport: Arc<dyn HttpTransport>) -> Self {
        Self {
            id: format!("remote:{}@{}", config.model, config.url),
            config,
            api_key,
            transport,
        }
    }

    /// Reads the bearer token from `PBF_RAG_API_KEY`.
    pub fn from_env(config: RemoteConfig) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(config, key, Arc::new(UreqTransport::default()))
    }

    fn post(&self, body: &Value) -> Result<Value, BackendError> {
        let reply = self
            .transport
            .post_json(&self.config.url, self.api_key.as_deref(), body)?;
        if !(200..300).contains(&reply.status) {
            return Err(BackendError::from_status(reply.status, truncate(&reply.body, 300)));
        }
        serde_json::from_str(&reply.body).map_err(|e| BackendError::Malformed(e.to_string()))
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

pub fn chat_request_body(model: &str, messages: &[ChatMessage], params: &GenerationParams) -> Value {
    let messages: Vec<Value> = messages
        .iter()
        .map(|m| {
            let content: Vec<Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    Part::Text(t) => json!({"type": "text", "text": t}),
                    Part::Image(img) => {
                        let b64 = base64::engine::general_purpose::STANDARD.encode(img.bytes());
                        json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:{};base64,{b64}", img.media_type())}
                        })
                    }
                })
                .collect();
            json!({"role": m.role.as_str(), "content": content})
        })
        .collect();
    let mut body = json!({
        "model": model,
        "messages": messages,
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
    });
    if let Some(seed) = params.seed {
        body["seed"] = json!(seed);
    }
    body
}

pub fn parse_chat_response(v: &Value) -> Result<String, BackendError> {
    let content = &v["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        // some servers return content as a list of text parts
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(BackendError::Malformed("missing choices[0].message.content".into())),
    }
}

pub fn parse_embedding_response(v: &Value, expected: usize) -> Result<Vec<Vec<f64>>, BackendError> {
    let data = v["data"]
        .as_array()
        .ok_or_else(|| BackendError::Malformed("missing data array".into()))?;
    let mut rows: Vec<(usize, Vec<f64>)> = data
        .iter()
        .enumerate()
        .map(|(pos, item)| {
            let idx = item["index"].as_u64().map(|i| i as usize).unwrap_or(pos);
            let emb = item["embedding"]
                .as_array()
                .ok_or_else(|| BackendError::Malformed(format!("data[{pos}] has no embedding")))?
                .iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| BackendError::Malformed(format!("data[{pos}] has a non-numeric value")))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            Ok((idx, emb))
        })
        .collect::<Result<_, BackendError>>()?;
    rows.sort_by_key(|(i, _)| *i);
    if rows.len() != expected {
        return Err(BackendError::Malformed(format!(
            "{} embeddings for {expected} inputs",
            rows.len()
        )));
    }
    Ok(rows.into_iter().map(|(_, e)| e).collect())
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, _capability: Capability, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, BackendError> {
        let body = chat_request_body(&self.config.model, messages, params);
        parse_chat_response(&self.post(&body)?)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let body = json!({"model": self.config.model, "input": texts});
        parse_embedding_response(&self.post(&body)?, texts.len())
    }
}
