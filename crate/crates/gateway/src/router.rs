//! Model-name routing, upstream credentials and request forwarding.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::pin::Pin;
use std::sync::Arc;
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use futures::{Stream, StreamExt};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{debug, info};
use url::Url;
use verde_core::metering::{BackendClass, Price};
use verde_core::persistence::{Keyspace, Store};
use verde_core::{Error, Result};

use crate::wire::{FinishReason, Usage};

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
const EXCERPT_LIMIT: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Backend {
    pub name: String,
    pub class: BackendClass,
    pub base_url: Url,
    /// Key into the secrets file. Empty means the upstream takes no credential.
    #[serde(default)]
    pub credential_ref: String,
    pub model_names: BTreeSet<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT_MS
}

impl Backend {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::validation("backend name is required"));
        }
        if self.model_names.is_empty() {
            return Err(Error::validation("backend must serve at least one model"));
        }
        if self.model_names.iter().any(String::is_empty) {
            return Err(Error::validation("model names must be nonempty"));
        }
        if self.timeout_ms == 0 {
            return Err(Error::validation("timeout_ms must be positive"));
        }
        if !matches!(self.base_url.scheme(), "http" | "https") {
            return Err(Error::validation("base_url must be http or https"));
        }
        Ok(())
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.as_str().trim_end_matches('/'))
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

/// An upstream credential. Never printed, serialized, or stored.
#[derive(Clone)]
pub struct Secret(Arc<str>);

impl Secret {
    pub fn new(s: impl Into<String>) -> Self {
        Self(Arc::from(s.into()))
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

/// Upstream secrets keyed by `credential_ref`, loaded from a TOML file of
/// `ref = "secret"` pairs.
#[derive(Debug, Clone, Default)]
pub struct SecretStore {
    secrets: HashMap<String, Secret>,
}

impl SecretStore {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading secrets file {}: {e}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let raw: HashMap<String, String> = toml::from_str(text)?;
        Ok(Self { secrets: raw.into_iter().map(|(k, v)| (k, Secret::new(v))).collect() })
    }

    pub fn insert(&mut self, credential_ref: impl Into<String>, secret: impl Into<String>) {
        self.secrets.insert(credential_ref.into(), Secret::new(secret));
    }

    pub fn get(&self, credential_ref: &str) -> Option<&Secret> {
        self.secrets.get(credential_ref)
    }

    /// Every secret value, for redaction.
    pub fn values(&self) -> impl Iterator<Item = &Secret> {
        self.secrets.values()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum UpstreamError {
    #[error("upstream timed out")]
    Timeout,
    #[error("upstream returned HTTP {status}: {excerpt}")]
    Status { status: u16, excerpt: String },
    #[error("upstream transport failure: {0}")]
    Transport(String),
    #[error("malformed upstream response: {0}")]
    Protocol(String),
    #[error("no credential configured for backend {0}")]
    MissingCredential(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpstreamResult {
    pub content: String,
    pub finish_reason: FinishReason,
    pub usage: Option<Usage>,
}

#[derive(Debug)]
pub enum StreamItem {
    Delta(String),
    Done { finish_reason: FinishReason, usage: Option<Usage> },
    Error(UpstreamError),
}

pub type UpstreamStream = Pin<Box<dyn Stream<Item = StreamItem> + Send>>;

fn backend_key(name: &str) -> String {
    format!("backend:{name}")
}

/// Backend table plus the HTTP client used to reach them.
pub struct Router {
    store: Store,
    secrets: SecretStore,
    table: RwLock<Arc<HashMap<String, Arc<Backend>>>>,
    register_lock: Mutex<()>,
    http: reqwest::Client,
}

impl Router {
    pub fn open(store: Store, secrets: SecretStore) -> Result<Self> {
        let mut table = HashMap::new();
        for (_, record) in store.scan_prefix(Keyspace::Backends, "backend:") {
            let backend: Arc<Backend> = Arc::new(serde_json::from_slice(&record.body)?);
            for model in &backend.model_names {
                table.insert(model.clone(), backend.clone());
            }
        }
        let http = reqwest::Client::builder()
            .build()
            .map_err(|e| Error::validation(format!("http client: {e}")))?;
        Ok(Self {
            store,
            secrets,
            table: RwLock::new(Arc::new(table)),
            register_lock: Mutex::new(()),
            http,
        })
    }

    pub fn secrets(&self) -> &SecretStore {
        &self.secrets
    }

    /// Persists `backend` and publishes its models. Re-registering a name
    /// replaces that backend's model set. `prices` are only checked to name
    /// served models; storing them is the caller's job.
    pub fn register(&self, backend: Backend, prices: &[Price]) -> Result<Backend> {
        backend.validate()?;
        for p in prices {
            if !backend.model_names.contains(&p.model) {
                return Err(Error::validation(format!("price for unserved model {}", p.model)));
            }
        }
        let _guard = self.register_lock.lock();
        let current = self.table.read().clone();
        for model in &backend.model_names {
            if let Some(owner) = current.get(model) {
                if owner.name != backend.name {
                    return Err(Error::Conflict(format!(
                        "model {model} is already served by backend {}",
                        owner.name
                    )));
                }
            }
        }
        let key = backend_key(&backend.name);
        let version = self.store.try_get(Keyspace::Backends, &key).map_or(0, |r| r.version);
        self.store.put_json(Keyspace::Backends, &key, version, &backend)?;
        let mut next: HashMap<String, Arc<Backend>> =
            current.iter().filter(|(_, b)| b.name != backend.name).map(|(k, v)| (k.clone(), v.clone())).collect();
        let shared = Arc::new(backend.clone());
        for model in &backend.model_names {
            next.insert(model.clone(), shared.clone());
        }
        *self.table.write() = Arc::new(next);
        info!(backend = %backend.name, models = backend.model_names.len(), "backend registered");
        Ok(backend)
    }

    pub fn resolve(&self, model: &str) -> Result<Arc<Backend>> {
        self.table
            .read()
            .get(model)
            .cloned()
            .ok_or_else(|| Error::not_found(format!("model {model}")))
    }

    pub fn backends(&self) -> Vec<Backend> {
        let table = self.table.read();
        let mut seen: Vec<Backend> = Vec::new();
        for b in table.values() {
            if !seen.iter().any(|s| s.name == b.name) {
                seen.push((**b).clone());
            }
        }
        seen.sort_by(|a, b| a.name.cmp(&b.name));
        seen
    }

    fn request(&self, backend: &Backend, body: Bytes) -> std::result::Result<reqwest::RequestBuilder, UpstreamError> {
        let mut req = self
            .http
            .post(backend.completions_url())
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body);
        if !backend.credential_ref.is_empty() {
            let secret = self
                .secrets
                .get(&backend.credential_ref)
                .ok_or_else(|| UpstreamError::MissingCredential(backend.name.clone()))?;
            req = req.bearer_auth(secret.expose());
        }
        Ok(req)
    }

    /// Strips every known upstream secret from text headed to a client.
    pub fn redact(&self, text: &str) -> String {
        let mut out = text.to_string();
        for s in self.secrets.values() {
            if !s.expose().is_empty() {
                out = out.replace(s.expose(), "[redacted]");
            }
        }
        out
    }

    fn excerpt(&self, body: &[u8]) -> String {
        let text = String::from_utf8_lossy(body);
        let mut cut = text.len().min(EXCERPT_LIMIT);
        while !text.is_char_boundary(cut) {
            cut -= 1;
        }
        self.redact(&text[..cut])
    }

    fn map_send_error(&self, e: reqwest::Error) -> UpstreamError {
        if e.is_timeout() {
            UpstreamError::Timeout
        } else {
            UpstreamError::Transport(self.redact(&e.to_string()))
        }
    }

    /// Unary chat completion. `body` is sent as-is.
    pub async fn forward(&self, backend: &Backend, body: Bytes) -> std::result::Result<UpstreamResult, UpstreamError> {
        let req = self.request(backend, body)?.timeout(backend.timeout());
        let resp = req.send().await.map_err(|e| self.map_send_error(e))?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|e| self.map_send_error(e))?;
        if !status.is_success() {
            return Err(UpstreamError::Status { status: status.as_u16(), excerpt: self.excerpt(&bytes) });
        }
        parse_completion(&bytes)
    }

    /// Streaming chat completion. The body must request `stream: true`.
    /// The backend timeout bounds the wait for response headers and each
    /// gap between received bytes.
    pub async fn forward_stream(
        self: &Arc<Self>,
        backend: &Backend,
        body: Bytes,
    ) -> std::result::Result<UpstreamStream, UpstreamError> {
        let timeout = backend.timeout();
        let req = self.request(backend, body)?;
        let resp = tokio::time::timeout(timeout, req.send())
            .await
            .map_err(|_| UpstreamError::Timeout)?
            .map_err(|e| self.map_send_error(e))?;
        let status = resp.status();
        if !status.is_success() {
            let bytes = tokio::time::timeout(timeout, resp.bytes()).await.ok().and_then(|r| r.ok()).unwrap_or_default();
            return Err(UpstreamError::Status { status: status.as_u16(), excerpt: self.excerpt(&bytes) });
        }
        let router = self.clone();
        let body = resp.bytes_stream();
        let state = SseState { body: Box::pin(body), parser: SseParser::default(), pending: Vec::new(), finished: false };
        let stream = futures::stream::unfold(state, move |mut st| {
            let router = router.clone();
            async move {
                loop {
                    if let Some(item) = st.pending.pop() {
                        return Some((item, st));
                    }
                    if st.finished {
                        return None;
                    }
                    match tokio::time::timeout(timeout, st.body.next()).await {
                        Err(_) => {
                            st.finished = true;
                            return Some((StreamItem::Error(UpstreamError::Timeout), st));
                        }
                        Ok(None) => {
                            st.finished = true;
                            return Some((
                                StreamItem::Error(UpstreamError::Transport("upstream closed the stream early".into())),
                                st,
                            ));
                        }
                        Ok(Some(Err(e))) => {
                            st.finished = true;
                            return Some((StreamItem::Error(router.map_send_error(e)), st));
                        }
                        Ok(Some(Ok(chunk))) => {
                            let mut items = st.parser.feed(&chunk);
                            if items.iter().any(|i| !matches!(i, StreamItem::Delta(_))) {
                                st.finished = true;
                                if let Some(pos) = items.iter().position(|i| !matches!(i, StreamItem::Delta(_))) {
                                    items.truncate(pos + 1);
                                }
                            }
                            items.reverse();
                            st.pending = items;
                        }
                    }
                }
            }
        });
        debug!(backend = %backend.name, "upstream stream opened");
        Ok(Box::pin(stream))
    }
}

struct SseState {
    body: Pin<Box<dyn Stream<Item = reqwest::Result<Bytes>> + Send>>,
    parser: SseParser,
    /// Parsed items not yet yielded, in reverse order.
    pending: Vec<StreamItem>,
    finished: bool,
}

/// Incremental parser for OpenAI-style `data:` event streams.
#[derive(Debug, Default)]
pub struct SseParser {
    buf: BytesMut,
    finish_reason: Option<FinishReason>,
    usage: Option<Usage>,
}

impl SseParser {
    pub fn feed(&mut self, bytes: &[u8]) -> Vec<StreamItem> {
        self.buf.extend_from_slice(bytes);
        let mut out = Vec::new();
        while let Some(pos) = self.buf.iter().position(|&b| b == b'\n') {
            let line = self.buf.split_to(pos + 1);
            let line = String::from_utf8_lossy(&line);
            let line = line.trim_end_matches(['\n', '\r']);
            let Some(data) = line.strip_prefix("data:") else { continue };
            let data = data.strip_prefix(' ').unwrap_or(data);
            if data == crate::wire::SSE_DONE {
                out.push(StreamItem::Done {
                    finish_reason: self.finish_reason.unwrap_or(FinishReason::Stop),
                    usage: self.usage,
                });
                return out;
            }
            match self.event(data) {
                Ok(Some(delta)) => out.push(StreamItem::Delta(delta)),
                Ok(None) => {}
                Err(e) => {
                    out.push(StreamItem::Error(e));
                    return out;
                }
            }
        }
        out
    }

    fn event(&mut self, data: &str) -> std::result::Result<Option<String>, UpstreamError> {
        let v: Value = serde_json::from_str(data).map_err(|e| UpstreamError::Protocol(e.to_string()))?;
        if let Some(err) = v.get("error") {
            let msg = err.get("message").and_then(Value::as_str).unwrap_or("upstream error");
            return Err(UpstreamError::Protocol(msg.to_string()));
        }
        if let Some(u) = v.get("usage").filter(|u| !u.is_null()) {
            self.usage = Some(parse_usage(u)?);
        }
        let Some(choice) = v.get("choices").and_then(|c| c.get(0)) else { return Ok(None) };
        if let Some(reason) = choice.get("finish_reason").and_then(Value::as_str) {
            self.finish_reason = Some(FinishReason::parse(reason));
        }
        Ok(choice
            .get("delta")
            .and_then(|d| d.get("content"))
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty())
            .map(str::to_string))
    }
}

fn parse_usage(u: &Value) -> std::result::Result<Usage, UpstreamError> {
    let field = |name: &str| {
        u.get(name)
            .and_then(Value::as_u64)
            .ok_or_else(|| UpstreamError::Protocol(format!("usage.{name} missing or negative")))
    };
    Ok(Usage::new(field("prompt_tokens")?, field("completion_tokens")?))
}

pub fn parse_completion(bytes: &[u8]) -> std::result::Result<UpstreamResult, UpstreamError> {
    let v: Value = serde_json::from_slice(bytes).map_err(|e| UpstreamError::Protocol(e.to_string()))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| UpstreamError::Protocol("response has no choices".into()))?;
    let content = choice
        .get("message")
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let finish_reason = choice
        .get("finish_reason")
        .and_then(Value::as_str)
        .map_or(FinishReason::Stop, FinishReason::parse);
    let usage = match v.get("usage").filter(|u| !u.is_null()) {
        Some(u) => Some(parse_usage(u)?),
        None => None,
    };
    Ok(UpstreamResult { content, finish_reason, usage })
}
