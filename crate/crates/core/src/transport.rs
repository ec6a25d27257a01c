//! Chat-completions transport shared by the LLM sampler and reflector.
//!
//! [`HttpTransport`] talks to any OpenAI-compatible `/chat/completions`
//! endpoint. [`RecordingTransport`] and [`ReplayTransport`] capture and
//! replay exchanges as JSON lines for offline tests.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request failed: {0}")]
    Network(String),
    #[error("malformed completion response: {0}")]
    Decode(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("sampler backend: {0}")]
    Backend(String),
    #[error("no recorded response for request: {0}")]
    ReplayMiss(String),
    #[error("fixture io: {0}")]
    Io(#[from] std::io::Error),
    #[error("fixture json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: "assistant".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

pub trait ChatTransport: Send + Sync {
    /// Returns the assistant message content of the first choice.
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    /// Environment variable holding the bearer token; unset means no auth.
    pub api_key_env: Option<String>,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            max_retries: 4,
            timeout_secs: 120.0,
            backoff_base_ms: 500,
            max_in_flight: 8,
        }
    }
}

/// Counting gate limiting concurrent requests.
struct InFlightGate {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlightGate {
    fn new(limit: usize) -> Self {
        Self { limit: limit.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a InFlightGate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
    cfg: HttpConfig,
    api_key: Option<String>,
    gate: InFlightGate,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    content: Option<String>,
}

fn is_retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

impl HttpTransport {
    pub fn new(cfg: HttpConfig) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let api_key = cfg.api_key_env.as_deref().and_then(|var| std::env::var(var).ok());
        let gate = InFlightGate::new(cfg.max_in_flight);
        Ok(Self { client, cfg, api_key, gate })
    }

    fn attempt(&self, request: &ChatRequest) -> Result<String, (bool, TransportError)> {
        let _slot = self.gate.acquire();
        let mut builder = self.client.post(&self.cfg.endpoint).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .map_err(|e| (true, TransportError::Network(e.to_string())))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| (true, TransportError::Network(e.to_string())))?;
        if !(200..300).contains(&status) {
            return Err((is_retryable(status), TransportError::Status { status, body }));
        }
        let parsed: CompletionResponse =
            serde_json::from_str(&body).map_err(|e| (false, TransportError::Decode(e.to_string())))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| (false, TransportError::Decode("response has no message content".into())))
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(request) {
                Ok(content) => return Ok(content),
                Err((false, err)) => return Err(err),
                Err((true, err)) if attempts > self.cfg.max_retries => {
                    return Err(TransportError::Exhausted { attempts, last: err.to_string() })
                }
                Err((true, err)) => {
                    let delay = self.cfg.backoff_base_ms.saturating_mul(1 << (attempts - 1).min(10));
                    log::warn!("chat request failed ({err}); retrying in {delay} ms");
                    std::thread::sleep(Duration::from_millis(delay));
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedExchange {
    pub request: ChatRequest,
    pub response: String,
}

/// Wraps a transport and appends every successful exchange to a JSONL file.
pub struct RecordingTransport<T> {
    inner: T,
    sink: Mutex<File>,
}

impl<T: ChatTransport> RecordingTransport<T> {
    pub fn new(inner: T, path: impl AsRef<Path>) -> Result<Self, TransportError> {
        let sink = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { inner, sink: Mutex::new(sink) })
    }
}

impl<T: ChatTransport> ChatTransport for RecordingTransport<T> {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let response = self.inner.complete(request)?;
        let line = serde_json::to_string(&RecordedExchange { request: request.clone(), response: response.clone() })?;
        let mut sink = self.sink.lock().unwrap_or_else(|e| e.into_inner());
        writeln!(sink, "{line}")?;
        Ok(response)
    }
}

/// Answers requests from recorded exchanges, matching on the full request.
#[derive(Debug, Clone, Default)]
pub struct ReplayTransport {
    exchanges: Vec<RecordedExchange>,
}

impl ReplayTransport {
    pub fn new(exchanges: Vec<RecordedExchange>) -> Self {
        Self { exchanges }
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self, TransportError> {
        let mut exchanges = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            exchanges.push(serde_json::from_str(&line)?);
        }
        Ok(Self { exchanges })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, TransportError> {
        Self::from_jsonl(BufReader::new(File::open(path)?))
    }
}

impl ChatTransport for ReplayTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        self.exchanges
            .iter()
            .find(|x| &x.request == request)
            .map(|x| x.response.clone())
            .ok_or_else(|| {
                let last = request.messages.last().map(|m| m.content.as_str()).unwrap_or("");
                TransportError::ReplayMiss(last.chars().take(120).collect())
            })
    }
}
