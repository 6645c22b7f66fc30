//! Chat-completion client for OpenAI-compatible endpoints, with
//! record/replay so that anything built on top can run offline.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jsonx;

pub const API_KEY_VAR: &str = "LLM_API_KEY";
pub const BASE_URL_VAR: &str = "LLM_BASE_URL";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com";
const COMPLETIONS_PATH: &str = "/v1/chat/completions";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("no API key: set {API_KEY_VAR}")]
    AuthMissing,
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no recorded response for request {hash}")]
    ReplayMiss { hash: String },
    #[error("replay store {0} does not exist")]
    StoreMissing(PathBuf),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("store I/O: {0}")]
    Store(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_reasoning_tokens: u32,
    pub max_output_tokens: u32,
    /// Provider-specific fields merged verbatim into the wire body.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Value>,
}

impl ChatRequest {
    pub fn new(model: &str, messages: Vec<Message>) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages,
            temperature: 0.0,
            max_reasoning_tokens: 0,
            max_output_tokens: 1024,
            extra: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        match self.messages.first() {
            None => return bad("no messages"),
            Some(m) if m.role == Role::Assistant => return bad("first message must be system or user"),
            _ => {}
        }
        if !(self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be > 0");
        }
        Ok(())
    }

    pub fn wire_body(&self) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
        });
        let obj = body.as_object_mut().expect("object literal");
        if self.max_reasoning_tokens > 0 {
            obj.insert("reasoning".into(), json!({ "max_tokens": self.max_reasoning_tokens }));
        }
        for (k, v) in &self.extra {
            obj.insert(k.clone(), v.clone());
        }
        body
    }

    /// SHA-256 of the canonical JSON form; equal requests hash equally.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(jsonx::canonical_string(self).as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: String,
    #[serde(default)]
    pub usage: Usage,
}

impl ChatResponse {
    pub fn text(content: impl Into<String>) -> Self {
        ChatResponse {
            content: content.into(),
            finish_reason: "stop".into(),
            usage: Usage::default(),
        }
    }

    pub fn from_wire(body: &str) -> Result<Self, GatewayError> {
        let malformed = |m: &str| GatewayError::MalformedResponse(m.to_string());
        let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let choice = v.get("choices").and_then(|c| c.get(0)).ok_or_else(|| malformed("no choices"))?;
        let finish_reason = choice
            .get("finish_reason")
            .and_then(Value::as_str)
            .unwrap_or("unknown")
            .to_string();
        let content = match choice.pointer("/message/content") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Null) | None if finish_reason != "stop" => String::new(),
            _ => return Err(malformed("missing message content")),
        };
        let usage = v
            .get("usage")
            .map(|u| Usage {
                prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
                completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
                total_tokens: u.get("total_tokens").and_then(Value::as_u64).unwrap_or(0),
            })
            .unwrap_or_default();
        Ok(ChatResponse {
            content,
            finish_reason,
            usage,
        })
    }
}

/// Anything that answers chat requests. Shared across worker threads.
pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).chat(request)
    }
}

pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// One POST of a JSON body. Errors are connection-level failures only;
/// HTTP error statuses come back as replies.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, api_key: &str, body: &str) -> Result<HttpReply, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        UreqTransport {
            agent: ureq::Agent::new_with_config(config),
        }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(600))
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, api_key: &str, body: &str) -> Result<HttpReply, String> {
        let mut resp = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {api_key}"))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    pub fn no_wait() -> Self {
        RetryPolicy {
            base_delay: Duration::ZERO,
            ..Self::default()
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(attempt as i32))
    }
}

/// Talks to a real endpoint.
pub struct LiveBackend<T: HttpTransport> {
    transport: T,
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    posts: AtomicUsize,
}

impl<T: HttpTransport> LiveBackend<T> {
    pub fn new(transport: T, base_url: &str, api_key: Option<String>, retry: RetryPolicy) -> Self {
        LiveBackend {
            transport,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            retry,
            posts: AtomicUsize::new(0),
        }
    }

    /// Reads the key and base URL from the environment.
    pub fn from_env(transport: T) -> Self {
        let key = std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty());
        let base = std::env::var(BASE_URL_VAR).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string());
        Self::new(transport, &base, key, RetryPolicy::default())
    }

    /// Number of HTTP posts attempted so far.
    pub fn posts(&self) -> usize {
        self.posts.load(Ordering::SeqCst)
    }

    pub fn url(&self) -> String {
        format!("{}{COMPLETIONS_PATH}", self.base_url)
    }
}

impl<T: HttpTransport> ChatBackend for LiveBackend<T> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = self.api_key.as_deref().ok_or(GatewayError::AuthMissing)?;
        request.validate()?;
        let body = serde_json::to_string(&request.wire_body()).expect("request serializes");
        let url = self.url();
        let mut last = GatewayError::Transport("no attempt made".into());
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            self.posts.fetch_add(1, Ordering::SeqCst);
            match self.transport.post_json(&url, key, &body) {
                Ok(reply) if reply.status == 200 => return ChatResponse::from_wire(&reply.body),
                Ok(reply) if reply.status == 429 => {
                    last = GatewayError::RateLimited {
                        attempts: attempt + 1,
                    }
                }
                Ok(reply) if reply.status >= 500 => {
                    last = GatewayError::HttpStatus {
                        status: reply.status,
                        body: reply.body,
                    }
                }
                Ok(reply) => {
                    return Err(GatewayError::HttpStatus {
                        status: reply.status,
                        body: reply.body,
                    })
                }
                Err(e) => last = GatewayError::Transport(e),
            }
        }
        Err(last)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoreEntry {
    request_hash: String,
    request: ChatRequest,
    response: ChatResponse,
}

/// Forwards to `inner` and appends every successful exchange to a JSON-lines store.
pub struct Recorder<B> {
    inner: B,
    store: Mutex<File>,
}

impl<B: ChatBackend> Recorder<B> {
    /// Truncates any existing store.
    pub fn create(inner: B, store: &Path) -> Result<Self, GatewayError> {
        let file = File::create(store).map_err(|e| GatewayError::Store(format!("{}: {e}", store.display())))?;
        Ok(Recorder {
            inner,
            store: Mutex::new(file),
        })
    }
}

impl<B: ChatBackend> ChatBackend for Recorder<B> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let response = self.inner.chat(request)?;
        let entry = StoreEntry {
            request_hash: request.hash(),
            request: request.clone(),
            response: response.clone(),
        };
        let line = serde_json::to_string(&entry).expect("entries serialize");
        let mut f = self.store.lock().expect("store lock");
        writeln!(f, "{line}").map_err(|e| GatewayError::Store(e.to_string()))?;
        f.flush().map_err(|e| GatewayError::Store(e.to_string()))?;
        Ok(response)
    }
}

/// Serves responses from a store. Repeated requests get their recorded
/// responses in order; once exhausted the last one is repeated.
pub struct Replayer {
    entries: Mutex<HashMap<String, (Vec<ChatResponse>, usize)>>,
}

impl Replayer {
    pub fn open(store: &Path) -> Result<Self, GatewayError> {
        if !store.exists() {
            return Err(GatewayError::StoreMissing(store.to_path_buf()));
        }
        let file = File::open(store).map_err(|e| GatewayError::Store(format!("{}: {e}", store.display())))?;
        let mut entries: HashMap<String, (Vec<ChatResponse>, usize)> = HashMap::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| GatewayError::Store(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: StoreEntry = serde_json::from_str(&line)
                .map_err(|e| GatewayError::Store(format!("{} line {}: {e}", store.display(), n + 1)))?;
            entries.entry(entry.request_hash).or_default().0.push(entry.response);
        }
        Ok(Replayer {
            entries: Mutex::new(entries),
        })
    }

    /// Builds a replayer from in-memory pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (ChatRequest, ChatResponse)>) -> Self {
        let mut entries: HashMap<String, (Vec<ChatResponse>, usize)> = HashMap::new();
        for (req, resp) in pairs {
            entries.entry(req.hash()).or_default().0.push(resp);
        }
        Replayer {
            entries: Mutex::new(entries),
        }
    }
}

impl ChatBackend for Replayer {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let hash = request.hash();
        let mut entries = self.entries.lock().expect("replay lock");
        let (responses, cursor) = entries.get_mut(&hash).ok_or(GatewayError::ReplayMiss { hash })?;
        let resp = responses[(*cursor).min(responses.len() - 1)].clone();
        *cursor += 1;
        Ok(resp)
    }
}

/// Appends a recorded exchange to a store without a live call (fixture authoring).
pub fn append_to_store(store: &Path, request: &ChatRequest, response: &ChatResponse) -> Result<(), GatewayError> {
    let entry = StoreEntry {
        request_hash: request.hash(),
        request: request.clone(),
        response: response.clone(),
    };
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(store)
        .map_err(|e| GatewayError::Store(e.to_string()))?;
    writeln!(f, "{}", serde_json::to_string(&entry).expect("entries serialize")).map_err(|e| GatewayError::Store(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    #[default]
    Live,
    Record,
    Replay,
}

impl std::str::FromStr for GatewayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(GatewayMode::Live),
            "record" => Ok(GatewayMode::Record),
            "replay" => Ok(GatewayMode::Replay),
            other => Err(format!("unknown gateway mode `{other}`")),
        }
    }
}

/// Wraps `live` according to `mode`. Replay never touches `live`.
pub fn record_replay(
    mode: GatewayMode,
    store: Option<&Path>,
    live: Arc<dyn ChatBackend>,
) -> Result<Arc<dyn ChatBackend>, GatewayError> {
    let need_store = || store.ok_or_else(|| GatewayError::Store(format!("{mode:?} mode needs a store path")));
    Ok(match mode {
        GatewayMode::Live => live,
        GatewayMode::Record => Arc::new(Recorder::create(live, need_store()?)?),
        GatewayMode::Replay => Arc::new(Replayer::open(need_store()?)?),
    })
}
