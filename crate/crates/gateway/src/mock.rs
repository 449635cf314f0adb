//! Deterministic OpenAI-wire test upstream.
//!
//! The completion is the last user message uppercased, cut to `max_tokens`
//! whitespace tokens. Directives inside the last user message inject faults:
//! `!fail` (HTTP 500), `!hang` (stall past any sane timeout), `!drop` (cut the
//! connection after the first delta), `!slow` (pause between deltas) and
//! `!overuse` (report more completion tokens than allowed) and `!leak` (an
//! HTTP 500 whose body echoes the request's credential header).

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;
use futures::StreamExt;
use parking_lot::Mutex;
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use verde_core::chat::{Message, Role};
use verde_core::metering::count_tokens;

use crate::wire::{FinishReason, Usage, DEFAULT_MAX_TOKENS};

pub const MOCK_MODEL: &str = "mock-echo";
const OVERUSE_EXTRA_TOKENS: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockCompletion {
    pub content: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
}

impl MockCompletion {
    /// Stream deltas: the first token, then each following token with one
    /// leading space. Their concatenation is `content`.
    pub fn deltas(&self) -> Vec<String> {
        self.content
            .split(' ')
            .enumerate()
            .filter(|(_, t)| !t.is_empty())
            .map(|(i, t)| if i == 0 { t.to_string() } else { format!(" {t}") })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct MockValidationError(pub String);

/// The mock contract as a pure function.
pub fn mock_complete(messages: &[Message], max_tokens: u64) -> Result<MockCompletion, MockValidationError> {
    let last = messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .ok_or_else(|| MockValidationError("no user message".into()))?;
    let upper = last.content.to_uppercase();
    let tokens: Vec<&str> = upper.split_whitespace().collect();
    let limit = usize::try_from(max_tokens).unwrap_or(usize::MAX);
    let kept = &tokens[..tokens.len().min(limit)];
    let content = kept.join(" ");
    let finish_reason = if tokens.len() > limit { FinishReason::Length } else { FinishReason::Stop };
    let prompt_tokens = messages.iter().map(|m| count_tokens(&m.content)).sum();
    let usage = Usage::new(prompt_tokens, count_tokens(&content));
    Ok(MockCompletion { content, finish_reason, usage })
}

#[derive(Debug, Clone)]
pub struct MockConfig {
    pub models: Vec<String>,
    /// When set, requests must carry `Authorization: Bearer <secret>`.
    pub expected_secret: Option<String>,
    pub slow_delay: Duration,
    pub hang: Duration,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            models: vec![MOCK_MODEL.to_string()],
            expected_secret: None,
            slow_delay: Duration::from_millis(25),
            hang: Duration::from_secs(600),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Bytes,
}

impl RecordedRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or(serde_json::Value::Null)
    }
}

struct MockState {
    config: MockConfig,
    recorded: Mutex<Vec<RecordedRequest>>,
}

/// A running mock upstream bound to a local port.
pub struct MockUpstream {
    addr: SocketAddr,
    state: Arc<MockState>,
    task: JoinHandle<()>,
}

impl MockUpstream {
    pub async fn start(config: MockConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        Self::serve(listener, config)
    }

    pub fn serve(listener: TcpListener, config: MockConfig) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let state = Arc::new(MockState { config, recorded: Mutex::new(Vec::new()) });
        let app = app(state.clone());
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(Self { addr, state, task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL suitable for `Backend::base_url`.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.recorded.lock().clone()
    }

    pub fn chat_requests(&self) -> Vec<RecordedRequest> {
        self.requests().into_iter().filter(|r| r.path.ends_with("/chat/completions")).collect()
    }

    pub fn clear(&self) {
        self.state.recorded.lock().clear();
    }
}

impl Drop for MockUpstream {
    fn drop(&mut self) {
        self.task.abort();
    }
}

pub fn app_with(config: MockConfig) -> axum::Router {
    app(Arc::new(MockState { config, recorded: Mutex::new(Vec::new()) }))
}

fn app(state: Arc<MockState>) -> axum::Router {
    axum::Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/v1/models", get(models))
        .with_state(state)
}

fn error(status: StatusCode, message: &str, code: &str) -> Response {
    let body = json!({"error": {"message": message, "type": "mock_error", "code": code}});
    (status, Json(body)).into_response()
}

fn record(state: &MockState, method: &Method, uri: &Uri, headers: &HeaderMap, body: &Bytes) {
    let headers = headers
        .iter()
        .map(|(k, v)| (k.as_str().to_string(), String::from_utf8_lossy(v.as_bytes()).into_owned()))
        .collect();
    state.recorded.lock().push(RecordedRequest {
        method: method.to_string(),
        path: uri.path().to_string(),
        headers,
        body: body.clone(),
    });
}

fn authorized(state: &MockState, headers: &HeaderMap) -> bool {
    match &state.config.expected_secret {
        None => true,
        Some(secret) => headers
            .get(axum::http::header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v == format!("Bearer {secret}")),
    }
}

async fn models(State(state): State<Arc<MockState>>, method: Method, uri: Uri, headers: HeaderMap) -> Response {
    record(&state, &method, &uri, &headers, &Bytes::new());
    if !authorized(&state, &headers) {
        return error(StatusCode::UNAUTHORIZED, "bad upstream credential", "invalid_api_key");
    }
    let data: Vec<_> = state
        .config
        .models
        .iter()
        .map(|m| json!({"id": m, "object": "model", "created": 0, "owned_by": "mock"}))
        .collect();
    Json(json!({"object": "list", "data": data})).into_response()
}

#[derive(Deserialize)]
struct MockRequest {
    model: String,
    messages: Vec<Message>,
    #[serde(default)]
    max_tokens: Option<u64>,
    #[serde(default)]
    stream: bool,
}

#[derive(Default)]
struct Directives {
    fail: bool,
    hang: bool,
    drop: bool,
    slow: bool,
    overuse: bool,
    leak: bool,
}

fn directives(messages: &[Message]) -> Directives {
    let Some(last) = messages.iter().rev().find(|m| m.role == Role::User) else {
        return Directives::default();
    };
    let c = &last.content;
    Directives {
        fail: c.contains("!fail"),
        hang: c.contains("!hang"),
        drop: c.contains("!drop"),
        slow: c.contains("!slow"),
        overuse: c.contains("!overuse"),
        leak: c.contains("!leak"),
    }
}

async fn chat(
    State(state): State<Arc<MockState>>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    record(&state, &method, &uri, &headers, &body);
    if !authorized(&state, &headers) {
        return error(StatusCode::UNAUTHORIZED, "bad upstream credential", "invalid_api_key");
    }
    let req: MockRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, &e.to_string(), "invalid_request"),
    };
    if !state.config.models.iter().any(|m| m == &req.model) {
        return error(StatusCode::NOT_FOUND, "unknown model", "model_not_found");
    }
    let d = directives(&req.messages);
    if d.leak {
        let credential = headers.get(axum::http::header::AUTHORIZATION).and_then(|v| v.to_str().ok()).unwrap_or("");
        return error(StatusCode::INTERNAL_SERVER_ERROR, &format!("rejected credential {credential}"), "mock_failure");
    }
    if d.fail {
        return error(StatusCode::INTERNAL_SERVER_ERROR, "injected failure", "mock_failure");
    }
    if d.hang {
        tokio::time::sleep(state.config.hang).await;
    }
    let mut completion = match mock_complete(&req.messages, req.max_tokens.unwrap_or(DEFAULT_MAX_TOKENS)) {
        Ok(c) => c,
        Err(e) => return error(StatusCode::BAD_REQUEST, &e.0, "invalid_request"),
    };
    if d.overuse {
        completion.usage = Usage::new(
            completion.usage.prompt_tokens,
            completion.usage.completion_tokens + OVERUSE_EXTRA_TOKENS,
        );
    }
    let id = format!("mockcmpl-{}", uuid::Uuid::new_v4().simple());
    if req.stream {
        stream_response(id, req.model, completion, d, state.config.slow_delay)
    } else if d.drop {
        let broken = futures::stream::once(async {
            Err::<Bytes, std::io::Error>(std::io::Error::new(std::io::ErrorKind::BrokenPipe, "dropped"))
        });
        Response::new(Body::from_stream(broken))
    } else {
        Json(json!({
            "id": id,
            "object": "chat.completion",
            "created": 0,
            "model": req.model,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": completion.content},
                "finish_reason": completion.finish_reason,
            }],
            "usage": completion.usage,
        }))
        .into_response()
    }
}

fn sse(value: serde_json::Value) -> Bytes {
    Bytes::from(format!("data: {value}\n\n"))
}

fn stream_response(id: String, model: String, c: MockCompletion, d: Directives, delay: Duration) -> Response {
    let chunk = |delta: serde_json::Value, finish: Option<FinishReason>| {
        json!({
            "id": id, "object": "chat.completion.chunk", "created": 0, "model": model,
            "choices": [{"index": 0, "delta": delta, "finish_reason": finish}],
        })
    };
    let mut frames: Vec<Result<Bytes, std::io::Error>> =
        vec![Ok(sse(chunk(json!({"role": "assistant", "content": ""}), None)))];
    let deltas = c.deltas();
    for (i, delta) in deltas.iter().enumerate() {
        frames.push(Ok(sse(chunk(json!({"content": delta}), None))));
        if d.drop && i == 0 {
            frames.push(Err(std::io::Error::new(std::io::ErrorKind::BrokenPipe, "dropped")));
            break;
        }
    }
    if d.drop && deltas.is_empty() {
        frames.push(Err(std::io::Error::new(std::io::ErrorKind::BrokenPipe, "dropped")));
    }
    if !d.drop {
        let mut last = chunk(json!({}), Some(c.finish_reason));
        last["usage"] = json!(c.usage);
        frames.push(Ok(sse(last)));
        frames.push(Ok(Bytes::from_static(b"data: [DONE]\n\n")));
    }
    let pause = if d.slow { delay } else { Duration::ZERO };
    let stream = futures::stream::iter(frames.into_iter().enumerate()).then(move |(i, frame)| async move {
        if i > 0 && !pause.is_zero() {
            tokio::time::sleep(pause).await;
        }
        frame
    });
    Response::builder()
        .header("content-type", "text/event-stream")
        .header("cache-control", "no-cache")
        .body(Body::from_stream(stream))
        .unwrap_or_else(|_| StatusCode::INTERNAL_SERVER_ERROR.into_response())
}
