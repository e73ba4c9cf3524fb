//! Judge execution: prompt rendering, chat-completion clients, and
//! structured-output extraction.
//!
//! Three client flavors sit behind the [`ChatClient`] trait:
//! - [`LiveClient`]: chat-completions-compatible HTTP endpoint, configured
//!   through `EM_API_BASE` / `EM_API_KEY` / `EM_MODEL` / `EM_TIMEOUT_SECS`,
//!   with retry/backoff on transient transport failures.
//! - [`ReplayClient`]: serves recorded responses keyed by a stable hash of
//!   `(kind, prompt)`; makes the whole pipeline deterministic in tests.
//! - [`RecordingClient`]: wraps another client and persists every response,
//!   which is how replay fixtures get built.

pub mod extract;
pub mod templates;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use extract::{
    extract_structured, CriterionAssessment, ErrorAnalysisPayload, Extracted, Quality, SchemaId,
};
pub use templates::{render, render_named, TemplateId, VARIANT_TEMPLATES};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown template: {0}")]
    UnknownTemplate(String),
    #[error("template {template}: missing binding for placeholder '{placeholder}'")]
    MissingBinding {
        template: String,
        placeholder: String,
    },
    #[error("template {template}: {message}")]
    Render { template: String, message: String },
    #[error("client configuration: {0}")]
    Config(String),
    #[error("transport failed after {attempts} attempts: {message}")]
    TransportExhausted { attempts: u32, message: String },
    #[error("endpoint returned status {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("no replay fixture for request {hash} (kind {kind})")]
    MissingFixture { kind: String, hash: String },
    #[error("response truncated at the token limit")]
    Truncated,
    #[error("endpoint returned an empty response text")]
    EmptyResponse,
    #[error("malformed endpoint payload: {0}")]
    MalformedPayload(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{schema} extraction: {message}")]
    Extraction { schema: String, message: String },
    #[error("{schema} schema violation: {message}")]
    SchemaViolation { schema: String, message: String },
}

/// Decoding parameters sent to the judge endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 8192,
            seed: None,
        }
    }
}

/// One request to the judge. `kind` names the template (or probe) that
/// produced the prompt and keys replay fixtures together with the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub kind: String,
    pub prompt: String,
    pub decoding: Decoding,
    pub model_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Live,
    Replay,
}

/// The judge's raw reply.
#[derive(Debug, Clone)]
pub struct JudgeResponse {
    pub raw_text: String,
    pub latency: Duration,
    pub client_kind: ClientKind,
}

/// A chat-completion backend. Implementations must be safe for concurrent
/// use; each call is independent.
pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<JudgeResponse, GatewayError>;
}

/// Stable hash of `(kind, prompt)`, used as the replay fixture key.
pub fn request_hash(kind: &str, prompt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(kind.as_bytes());
    hasher.update([0x1f]);
    hasher.update(prompt.as_bytes());
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(32);
    for byte in &digest[..16] {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Configuration for the live HTTP client.
#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub api_base: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub retry_backoff: Duration,
}

impl LiveConfig {
    /// Read the endpoint configuration from the environment. `EM_API_BASE`
    /// is required; everything else has defaults.
    pub fn from_env() -> Result<Self, GatewayError> {
        let api_base = std::env::var("EM_API_BASE")
            .map_err(|_| GatewayError::Config("EM_API_BASE is not set".to_string()))?;
        let api_key = std::env::var("EM_API_KEY").ok().filter(|k| !k.is_empty());
        let model = std::env::var("EM_MODEL").unwrap_or_else(|_| "judge".to_string());
        let timeout_secs = match std::env::var("EM_TIMEOUT_SECS") {
            Ok(raw) => raw.parse::<u64>().map_err(|_| {
                GatewayError::Config(format!("EM_TIMEOUT_SECS is not an integer: {raw}"))
            })?,
            Err(_) => 120,
        };
        Ok(Self {
            api_base,
            api_key,
            model,
            timeout: Duration::from_secs(timeout_secs),
            max_retries: 3,
            retry_backoff: Duration::from_millis(250),
        })
    }
}

/// Chat-completions HTTP client with retry/backoff on transient failures.
pub struct LiveClient {
    config: LiveConfig,
    http: reqwest::blocking::Client,
}

impl LiveClient {
    pub fn new(config: LiveConfig) -> Result<Self, GatewayError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|err| GatewayError::Config(err.to_string()))?;
        Ok(Self { config, http })
    }

    pub fn from_env() -> Result<Self, GatewayError> {
        Self::new(LiveConfig::from_env()?)
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.api_base.trim_end_matches('/')
        )
    }

    fn send_once(&self, request: &CompletionRequest) -> Result<JudgeResponse, TransientOr> {
        let body = serde_json::json!({
            "model": request.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.decoding.temperature,
            "max_tokens": request.decoding.max_output_tokens,
            "seed": request.decoding.seed,
        });
        let started = Instant::now();
        let mut builder = self.http.post(self.endpoint()).json(&body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|err| TransientOr::Transient(err.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|err| TransientOr::Transient(err.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(TransientOr::Transient(format!("status {status}: {text}")));
        }
        if !status.is_success() {
            return Err(TransientOr::Fatal(GatewayError::Endpoint {
                status: status.as_u16(),
                body: text,
            }));
        }
        let payload: serde_json::Value = serde_json::from_str(&text)
            .map_err(|err| TransientOr::Fatal(GatewayError::MalformedPayload(err.to_string())))?;
        let choice = payload
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| {
                TransientOr::Fatal(GatewayError::MalformedPayload(
                    "missing choices[0]".to_string(),
                ))
            })?;
        if choice.get("finish_reason").and_then(|r| r.as_str()) == Some("length") {
            return Err(TransientOr::Fatal(GatewayError::Truncated));
        }
        let content = choice
            .get("message")
            .and_then(|m| m.get("content"))
            .and_then(|c| c.as_str())
            .ok_or_else(|| {
                TransientOr::Fatal(GatewayError::MalformedPayload(
                    "missing message.content".to_string(),
                ))
            })?;
        if content.is_empty() {
            return Err(TransientOr::Fatal(GatewayError::EmptyResponse));
        }
        Ok(JudgeResponse {
            raw_text: content.to_string(),
            latency: started.elapsed(),
            client_kind: ClientKind::Live,
        })
    }
}

enum TransientOr {
    Transient(String),
    Fatal(GatewayError),
}

impl ChatClient for LiveClient {
    fn complete(&self, request: &CompletionRequest) -> Result<JudgeResponse, GatewayError> {
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.send_once(request) {
                Ok(response) => return Ok(response),
                Err(TransientOr::Fatal(err)) => return Err(err),
                Err(TransientOr::Transient(message)) => {
                    last = message;
                    if attempt + 1 < attempts {
                        let backoff = self.config.retry_backoff * 2u32.pow(attempt);
                        std::thread::sleep(backoff);
                    }
                }
            }
        }
        Err(GatewayError::TransportExhausted {
            attempts,
            message: last,
        })
    }
}

/// Serves recorded responses from a fixture directory, one file per request
/// hash. Fails on a missing fixture, naming the hash.
pub struct ReplayClient {
    dir: PathBuf,
}

impl ReplayClient {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        Self {
            dir: dir.as_ref().to_path_buf(),
        }
    }

    fn fixture_path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.txt"))
    }
}

impl ChatClient for ReplayClient {
    fn complete(&self, request: &CompletionRequest) -> Result<JudgeResponse, GatewayError> {
        let started = Instant::now();
        let hash = request_hash(&request.kind, &request.prompt);
        let path = self.fixture_path(&hash);
        let raw_text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => {
                return Err(GatewayError::MissingFixture {
                    kind: request.kind.clone(),
                    hash,
                })
            }
            Err(source) => {
                return Err(GatewayError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        if raw_text.is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        Ok(JudgeResponse {
            raw_text,
            latency: started.elapsed(),
            client_kind: ClientKind::Replay,
        })
    }
}

/// Wraps another client and persists every `(request hash -> response)` pair
/// so replay fixtures can be committed.
pub struct RecordingClient {
    inner: Box<dyn ChatClient>,
    dir: PathBuf,
}

impl RecordingClient {
    pub fn new(inner: Box<dyn ChatClient>, dir: impl AsRef<Path>) -> Self {
        Self {
            inner,
            dir: dir.as_ref().to_path_buf(),
        }
    }
}

impl ChatClient for RecordingClient {
    fn complete(&self, request: &CompletionRequest) -> Result<JudgeResponse, GatewayError> {
        let response = self.inner.complete(request)?;
        let hash = request_hash(&request.kind, &request.prompt);
        std::fs::create_dir_all(&self.dir).map_err(|source| GatewayError::Io {
            path: self.dir.display().to_string(),
            source,
        })?;
        let path = self.dir.join(format!("{hash}.txt"));
        std::fs::write(&path, &response.raw_text).map_err(|source| GatewayError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(response)
    }
}

/// Counting semaphore bounding in-flight judge calls.
struct Limiter {
    available: Mutex<usize>,
    signal: Condvar,
}

impl Limiter {
    fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit.max(1)),
            signal: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut available = self.available.lock().expect("limiter poisoned");
        while *available == 0 {
            available = self.signal.wait(available).expect("limiter poisoned");
        }
        *available -= 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut available = self.limiter.available.lock().expect("limiter poisoned");
        *available += 1;
        self.limiter.signal.notify_one();
    }
}

/// Default cap on concurrent judge calls per gateway.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

/// Handle through which all pipeline stages talk to the judge: owns the
/// client, the decoding defaults, and the in-flight limit.
pub struct Gateway {
    client: Box<dyn ChatClient>,
    limiter: Limiter,
    model_name: String,
    decoding: Decoding,
}

impl Gateway {
    pub fn new(client: Box<dyn ChatClient>, model_name: impl Into<String>) -> Self {
        Self {
            client,
            limiter: Limiter::new(DEFAULT_MAX_IN_FLIGHT),
            model_name: model_name.into(),
            decoding: Decoding::default(),
        }
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.limiter = Limiter::new(limit);
        self
    }

    pub fn with_decoding(mut self, decoding: Decoding) -> Self {
        self.decoding = decoding;
        self
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    /// Execute one judge call. `kind` names the originating template or
    /// probe and keys replay fixtures.
    pub fn complete(&self, kind: &str, prompt: String) -> Result<JudgeResponse, GatewayError> {
        let _permit = self.limiter.acquire();
        let request = CompletionRequest {
            kind: kind.to_string(),
            prompt,
            decoding: self.decoding.clone(),
            model_name: self.model_name.clone(),
        };
        self.client.complete(&request)
    }

    /// Render a registered template and execute it in one step.
    pub fn run_template(
        &self,
        name: &str,
        bindings: &BTreeMap<String, String>,
    ) -> Result<JudgeResponse, GatewayError> {
        let prompt = templates::render_named(name, bindings)?;
        self.complete(name, prompt)
    }
}
