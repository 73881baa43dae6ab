//! Chat-completion client with retry, bounded parallelism and
//! record/replay cassettes.
//!
//! Requests use the OpenAI chat-completions JSON shape. In `Replay` mode no
//! transport is touched; responses come from a content-addressed cassette
//! keyed by [`ChatRequest::digest`].

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tokio::sync::Mutex;

/// Environment variable holding the API key for live calls.
pub const API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model: model.into(),
            messages,
            temperature: 1.0,
            max_tokens: 1024,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if self.messages.iter().any(|m| m.content.is_empty()) {
            return Err(GatewayError::InvalidRequest("empty message content".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Content of the first user message, if any.
    pub fn user_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    /// Stable hex SHA-256 of the canonical JSON of model, messages,
    /// temperature and max_tokens.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("request serializes");
        hex::encode(Sha256::digest(canonical_json(&value).as_bytes()))
    }
}

/// Serializes `value` with object keys sorted at every depth.
pub fn canonical_json(value: &Value) -> String {
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<&String, &Value> = map.iter().collect();
            let body: Vec<String> = sorted
                .into_iter()
                .map(|(k, v)| {
                    format!(
                        "{}:{}",
                        serde_json::to_string(k).expect("key serializes"),
                        canonical_json(v)
                    )
                })
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => {
            let body: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", body.join(","))
        }
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: String,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub latency_ms: f64,
}

impl ChatResponse {
    pub fn is_success(&self) -> bool {
        matches!(self.finish_reason.as_str(), "stop" | "length")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out after {elapsed_ms} ms")]
    Timeout { elapsed_ms: u128 },
    #[error("network error: {0}")]
    Network(String),
    #[error("could not decode response: {0}")]
    Decode(String),
}

impl TransportError {
    fn retryable(&self) -> bool {
        matches!(self, TransportError::Status { status, .. } if *status == 429 || *status >= 500)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no cassette entry for request digest {0}")]
    ReplayMiss(String),
    #[error("live calls need an endpoint URL and API key")]
    NotConfigured,
    #[error("request timed out after {elapsed_ms} ms")]
    Timeout { elapsed_ms: u128 },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: TransportError },
    #[error(transparent)]
    Transport(TransportError),
    #[error("response finished with {0:?} and no content")]
    EmptyResponse(String),
    #[error("cassette {path}: {message}")]
    Cassette { path: String, message: String },
    #[error("parallelism must be at least 1")]
    ZeroParallelism,
}

/// Anything that can answer a chat request. `HttpTransport` talks to a
/// real endpoint; tests and offline demos plug in their own.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn send(&self, req: &ChatRequest) -> Result<ChatResponse, TransportError>;
}

pub struct HttpTransport {
    client: reqwest::Client,
    url: String,
    api_key: String,
    timeout: Duration,
}

impl HttpTransport {
    /// `endpoint_url` may be a base URL or the full chat-completions URL.
    pub fn new(endpoint_url: &str, api_key: impl Into<String>, timeout: Duration) -> Self {
        let trimmed = endpoint_url.trim_end_matches('/');
        let url = if trimmed.ends_with("/chat/completions") {
            trimmed.to_owned()
        } else {
            format!("{trimmed}/chat/completions")
        };
        Self {
            client: reqwest::Client::new(),
            url,
            api_key: api_key.into(),
            timeout,
        }
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[async_trait]
impl Transport for HttpTransport {
    async fn send(&self, req: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let started = Instant::now();
        let call = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(req)
            .send();
        let resp = match tokio::time::timeout(self.timeout, call).await {
            Err(_) => {
                return Err(TransportError::Timeout {
                    elapsed_ms: started.elapsed().as_millis(),
                })
            }
            Ok(Err(e)) if e.is_timeout() => {
                return Err(TransportError::Timeout {
                    elapsed_ms: started.elapsed().as_millis(),
                })
            }
            Ok(Err(e)) => return Err(TransportError::Network(e.to_string())),
            Ok(Ok(r)) => r,
        };
        let status = resp.status();
        let body = resp
            .text()
            .await
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Status {
                status: status.as_u16(),
                body,
            });
        }
        let wire: WireResponse =
            serde_json::from_str(&body).map_err(|e| TransportError::Decode(e.to_string()))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| TransportError::Decode("no choices".into()))?;
        Ok(ChatResponse {
            content: choice.message.content.unwrap_or_default(),
            finish_reason: choice.finish_reason.unwrap_or_else(|| "stop".into()),
            usage: wire.usage.unwrap_or_default(),
            latency_ms: started.elapsed().as_secs_f64() * 1000.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Live,
    Record,
    Replay,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Mode::Live),
            "record" => Ok(Mode::Record),
            "replay" => Ok(Mode::Replay),
            other => Err(format!("unknown mode {other:?} (expected live, record or replay)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, doubling from the base.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt.saturating_sub(1)).min(16);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CassetteLine {
    digest: String,
    response: ChatResponse,
}

/// Recorded digest → response store, backed by an append-only JSONL file.
#[derive(Debug, Default)]
pub struct Cassette {
    entries: BTreeMap<String, ChatResponse>,
    path: Option<PathBuf>,
}

impl Cassette {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or prepares to create) the cassette at `path`.
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        let mut cassette = Self {
            entries: BTreeMap::new(),
            path: Some(path.to_owned()),
        };
        if path.exists() {
            let raw = fs::read_to_string(path).map_err(|e| cassette_err(path, e))?;
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CassetteLine =
                    serde_json::from_str(line).map_err(|e| GatewayError::Cassette {
                        path: path.display().to_string(),
                        message: format!("line {}: {e}", i + 1),
                    })?;
                cassette.entries.insert(entry.digest, entry.response);
            }
        }
        Ok(cassette)
    }

    pub fn get(&self, digest: &str) -> Option<&ChatResponse> {
        self.entries.get(digest)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, digest: String, response: ChatResponse) -> Result<(), GatewayError> {
        if let Some(path) = &self.path {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| cassette_err(path, e))?;
            }
            let line = serde_json::to_string(&CassetteLine {
                digest: digest.clone(),
                response: response.clone(),
            })
            .expect("cassette line serializes");
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| cassette_err(path, e))?;
            writeln!(f, "{line}").map_err(|e| cassette_err(path, e))?;
        }
        self.entries.insert(digest, response);
        Ok(())
    }
}

fn cassette_err(path: &Path, e: std::io::Error) -> GatewayError {
    GatewayError::Cassette {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Shareable client; clone freely across tasks.
#[derive(Clone)]
pub struct Gateway {
    mode: Mode,
    transport: Option<Arc<dyn Transport>>,
    cassette: Arc<Mutex<Cassette>>,
    retry: RetryPolicy,
}

impl Gateway {
    pub fn replay(cassette: Cassette) -> Self {
        Self {
            mode: Mode::Replay,
            transport: None,
            cassette: Arc::new(Mutex::new(cassette)),
            retry: RetryPolicy::default(),
        }
    }

    pub fn live(transport: Arc<dyn Transport>, retry: RetryPolicy) -> Self {
        Self {
            mode: Mode::Live,
            transport: Some(transport),
            cassette: Arc::new(Mutex::new(Cassette::in_memory())),
            retry,
        }
    }

    pub fn record(transport: Arc<dyn Transport>, cassette: Cassette, retry: RetryPolicy) -> Self {
        Self {
            mode: Mode::Record,
            transport: Some(transport),
            cassette: Arc::new(Mutex::new(cassette)),
            retry,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub async fn cassette_len(&self) -> usize {
        self.cassette.lock().await.len()
    }

    pub async fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let digest = req.digest();
        match self.mode {
            Mode::Replay => self
                .cassette
                .lock()
                .await
                .get(&digest)
                .cloned()
                .ok_or(GatewayError::ReplayMiss(digest)),
            Mode::Live => self.call_with_retry(req).await,
            Mode::Record => {
                let resp = self.call_with_retry(req).await?;
                self.cassette.lock().await.insert(digest, resp.clone())?;
                Ok(resp)
            }
        }
    }

    async fn call_with_retry(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let transport = self.transport.as_ref().ok_or(GatewayError::NotConfigured)?;
        let max_attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match transport.send(req).await {
                Ok(resp) => {
                    if attempt > 1 {
                        tracing::info!(attempts = attempt, "chat completion succeeded after retry");
                    }
                    if !resp.is_success() && resp.content.is_empty() {
                        return Err(GatewayError::EmptyResponse(resp.finish_reason));
                    }
                    return Ok(resp);
                }
                Err(TransportError::Timeout { elapsed_ms }) => {
                    return Err(GatewayError::Timeout { elapsed_ms })
                }
                Err(e) if e.retryable() && attempt < max_attempts => {
                    let delay = self.retry.backoff(attempt);
                    tracing::warn!(attempt, error = %e, ?delay, "retrying chat completion");
                    tokio::time::sleep(delay).await;
                }
                Err(e) if e.retryable() => {
                    return Err(GatewayError::RetriesExhausted {
                        attempts: attempt,
                        last: e,
                    })
                }
                Err(e) => return Err(GatewayError::Transport(e)),
            }
        }
    }

    /// Completes all requests with at most `parallelism` in flight.
    /// Results are positional; one failure does not abort the rest.
    pub async fn complete_batch(
        &self,
        reqs: &[ChatRequest],
        parallelism: usize,
    ) -> Result<Vec<Result<ChatResponse, GatewayError>>, GatewayError> {
        if parallelism == 0 {
            return Err(GatewayError::ZeroParallelism);
        }
        Ok(stream::iter(reqs)
            .map(|r| self.complete(r))
            .buffered(parallelism)
            .collect()
            .await)
    }
}
