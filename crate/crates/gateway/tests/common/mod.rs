//! Shared end-to-end fixtures: an in-process gateway on a real socket, the
//! mock upstream, and a TCP tap that records raw bytes in both directions.
#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;
use url::Url;
use verde_core::metering::{BackendClass, Price};
use verde_core::rag::VectorIndex;
use verde_core::tenancy::{ChatMode, Course, NewCourse, Role, User};
use verde_gateway::mock::{MockConfig, MockUpstream, MOCK_MODEL};
use verde_gateway::{Backend, Gateway, GatewayConfig, SecretStore};

pub const ADMIN_TOKEN: &str = "admin-test-token-0123456789";
pub const UPSTREAM_SECRET: &str = "sk-upstream-4f1c9a7e2b6d8053";
pub const PROXY_MODEL: &str = "mock-proxy";

/// Forwards TCP connections to `target`, recording every byte.
pub struct Tap {
    pub addr: SocketAddr,
    /// Bytes flowing from the connecting side towards `target`.
    pub forward: Arc<Mutex<Vec<u8>>>,
    /// Bytes flowing back from `target`.
    pub backward: Arc<Mutex<Vec<u8>>>,
    task: JoinHandle<()>,
}

impl Tap {
    pub async fn start(target: SocketAddr) -> Tap {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let forward = Arc::new(Mutex::new(Vec::new()));
        let backward = Arc::new(Mutex::new(Vec::new()));
        let (f, b) = (forward.clone(), backward.clone());
        let task = tokio::spawn(async move {
            loop {
                let Ok((inbound, _)) = listener.accept().await else { return };
                let Ok(outbound) = TcpStream::connect(target).await else { continue };
                let (mut ir, mut iw) = inbound.into_split();
                let (mut or, mut ow) = outbound.into_split();
                let (f, b) = (f.clone(), b.clone());
                tokio::spawn(async move {
                    let mut buf = vec![0u8; 16 * 1024];
                    loop {
                        match ir.read(&mut buf).await {
                            Ok(0) | Err(_) => break,
                            Ok(n) => {
                                f.lock().extend_from_slice(&buf[..n]);
                                if ow.write_all(&buf[..n]).await.is_err() {
                                    break;
                                }
                            }
                        }
                    }
                    let _ = ow.shutdown().await;
                });
                tokio::spawn(async move {
                    let mut buf = vec![0u8; 16 * 1024];
                    loop {
                        match or.read(&mut buf).await {
                            Ok(0) | Err(_) => break,
                            Ok(n) => {
                                b.lock().extend_from_slice(&buf[..n]);
                                if iw.write_all(&buf[..n]).await.is_err() {
                                    break;
                                }
                            }
                        }
                    }
                    let _ = iw.shutdown().await;
                });
            }
        });
        Tap { addr, forward, backward, task }
    }

    pub fn forward_bytes(&self) -> Vec<u8> {
        self.forward.lock().clone()
    }

    pub fn backward_bytes(&self) -> Vec<u8> {
        self.backward.lock().clone()
    }
}

impl Drop for Tap {
    fn drop(&mut self) {
        self.task.abort();
    }
}

pub fn count_occurrences(haystack: &[u8], needle: &[u8]) -> usize {
    if needle.is_empty() || haystack.len() < needle.len() {
        return 0;
    }
    haystack.windows(needle.len()).filter(|w| *w == needle).count()
}

#[derive(Clone)]
pub struct Options {
    pub upstream_secret: Option<String>,
    pub denylist: Vec<String>,
    pub timeout_ms: u64,
    /// Put taps between client and gateway and between gateway and upstream.
    pub tap: bool,
    pub history_budget: u64,
    pub login_public_key: Option<String>,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            upstream_secret: Some(UPSTREAM_SECRET.to_string()),
            denylist: Vec::new(),
            timeout_ms: 2_000,
            tap: false,
            history_budget: 3072,
            login_public_key: None,
        }
    }
}

pub struct Harness {
    pub gw: Arc<Gateway>,
    /// Base URL clients use (through the client tap when enabled).
    pub base: String,
    pub mock: MockUpstream,
    pub http: reqwest::Client,
    pub client_tap: Option<Tap>,
    pub upstream_tap: Option<Tap>,
    server: JoinHandle<()>,
}

impl Drop for Harness {
    fn drop(&mut self) {
        self.server.abort();
    }
}

pub struct Member {
    pub user: User,
    pub key: String,
}

pub struct Seeded {
    pub course: Course,
    pub student: Member,
    pub instructor: Member,
}

impl Harness {
    pub async fn start(opts: Options) -> Harness {
        let mock = MockUpstream::start(MockConfig {
            models: vec![MOCK_MODEL.to_string(), PROXY_MODEL.to_string()],
            expected_secret: opts.upstream_secret.clone(),
            slow_delay: Duration::from_millis(20),
            ..Default::default()
        })
        .await
        .unwrap();
        let upstream_tap = if opts.tap { Some(Tap::start(mock.addr()).await) } else { None };
        let upstream_addr = upstream_tap.as_ref().map_or(mock.addr(), |t| t.addr);

        let mut config = GatewayConfig::default();
        config.guardrails.denylist = opts.denylist.clone();
        config.history.token_budget = opts.history_budget;
        config.login.public_key = opts.login_public_key.clone();
        let mut secrets = SecretStore::default();
        if let Some(s) = &opts.upstream_secret {
            secrets.insert("mock", s.clone());
        }
        let gw = Gateway::with_store(config, secrets, verde_core::persistence::Store::in_memory())
            .unwrap()
            .with_admin_token(ADMIN_TOKEN);
        let credential_ref = if opts.upstream_secret.is_some() { "mock" } else { "" };
        let base_url = Url::parse(&format!("http://{upstream_addr}/v1")).unwrap();
        gw.register_backend(
            Backend {
                name: "local".into(),
                class: BackendClass::SelfHosted,
                base_url: base_url.clone(),
                credential_ref: credential_ref.into(),
                model_names: [MOCK_MODEL.to_string()].into(),
                timeout_ms: opts.timeout_ms,
            },
            &[],
        )
        .unwrap();
        gw.register_backend(
            Backend {
                name: "proxy".into(),
                class: BackendClass::Proxy,
                base_url,
                credential_ref: credential_ref.into(),
                model_names: [PROXY_MODEL.to_string()].into(),
                timeout_ms: opts.timeout_ms,
            },
            &[],
        )
        .unwrap();
        let gw = Arc::new(gw);

        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let gw_addr = listener.local_addr().unwrap();
        let state = gw.clone();
        let server = tokio::spawn(async move {
            let _ = verde_gateway::serve(listener, state).await;
        });
        let client_tap = if opts.tap { Some(Tap::start(gw_addr).await) } else { None };
        let base = format!("http://{}", client_tap.as_ref().map_or(gw_addr, |t| t.addr));
        let http = reqwest::Client::builder().timeout(Duration::from_secs(30)).build().unwrap();
        Harness { gw, base, mock, http, client_tap, upstream_tap, server }
    }

    pub fn member(&self, course: &Course, subject: &str, role: Role) -> Member {
        let user = self.gw.tenancy.upsert_user(subject, subject, &format!("{subject}@example.edu")).unwrap();
        self.gw.tenancy.enroll(&course.id, &user.id, role).unwrap();
        let key = self.gw.tenancy.issue_key(&course.id, &user.id, "test").unwrap().plaintext;
        Member { user, key }
    }

    /// A course with one student and one instructor and a generous budget.
    pub fn course(&self, name: &str, new: NewCourse) -> Seeded {
        let course = self.gw.tenancy.create_course(NewCourse { name: name.into(), ..new }).unwrap();
        self.gw.metering.set_limit(&course.id, 1_000_000_000).unwrap();
        let student = self.member(&course, &format!("{name}-student"), Role::Student);
        let instructor = self.member(&course, &format!("{name}-instructor"), Role::Instructor);
        let course = self.gw.tenancy.course(&course.id).unwrap();
        Seeded { course, student, instructor }
    }

    pub fn pass_through(&self, name: &str) -> Seeded {
        self.course(
            name,
            NewCourse {
                allowed_models: [MOCK_MODEL.to_string(), PROXY_MODEL.to_string()].into(),
                mode: Some(ChatMode::PassThrough),
                ..Default::default()
            },
        )
    }

    pub fn rag(&self, name: &str, collection: &str, chunks: &[(&str, u32, &str)]) -> Seeded {
        if self.gw.index.collection(collection).is_err() {
            self.gw.index.create_collection(collection, collection).unwrap();
        }
        for (source, seq, text) in chunks {
            self.gw.index.upsert(collection, text, source, *seq).unwrap();
        }
        self.course(
            name,
            NewCourse {
                allowed_models: [MOCK_MODEL.to_string()].into(),
                mode: Some(ChatMode::Rag),
                collection_id: Some(collection.into()),
                ..Default::default()
            },
        )
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn post_raw(&self, key: &str, path: &str, body: impl Into<reqwest::Body>) -> reqwest::Response {
        self.http
            .post(self.url(path))
            .bearer_auth(key)
            .header("content-type", "application/json")
            .body(body)
            .send()
            .await
            .unwrap()
    }

    pub async fn chat(&self, key: &str, body: &Value) -> (u16, Value) {
        let resp = self.post_raw(key, "/v1/chat/completions", body.to_string()).await;
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    /// Sends a streaming request and collects every `data:` payload.
    pub async fn chat_stream(&self, key: &str, body: &Value) -> (u16, Vec<String>) {
        let resp = self.post_raw(key, "/v1/chat/completions", body.to_string()).await;
        let status = resp.status().as_u16();
        let text = resp.text().await.unwrap_or_default();
        (status, sse_data(&text))
    }

    pub async fn get(&self, token: &str, path: &str) -> (u16, Value) {
        let resp = self.http.get(self.url(path)).bearer_auth(token).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn send_json(&self, method: reqwest::Method, token: &str, path: &str, body: &Value) -> (u16, Value) {
        let resp = self.http.request(method, self.url(path)).bearer_auth(token).json(body).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    /// Waits until every reservation has been settled or cancelled.
    pub async fn quiesce(&self) {
        for _ in 0..500 {
            if self.gw.metering.outstanding_count() == 0 {
                return;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("{} reservations still outstanding", self.gw.metering.outstanding_count());
    }

    pub fn set_price(&self, model: &str, input: u64, output: u64) {
        self.gw
            .metering
            .set_price(Price { model: model.into(), input_per_1k_tokens: input, output_per_1k_tokens: output })
            .unwrap();
    }
}

/// Payloads of `data:` lines, in order.
pub fn sse_data(text: &str) -> Vec<String> {
    text.split("\n\n")
        .filter_map(|frame| frame.lines().find_map(|l| l.strip_prefix("data: ")))
        .map(str::to_string)
        .collect()
}

pub struct StreamSummary {
    pub content: String,
    pub deltas: usize,
    pub finish_reason: Option<String>,
    pub usage: Option<Value>,
    pub error: Option<Value>,
    pub done: bool,
}

pub fn summarize(events: &[String]) -> StreamSummary {
    let mut s = StreamSummary { content: String::new(), deltas: 0, finish_reason: None, usage: None, error: None, done: false };
    for e in events {
        if e == "[DONE]" {
            s.done = true;
            continue;
        }
        let v: Value = serde_json::from_str(e).unwrap();
        if let Some(err) = v.get("error") {
            s.error = Some(err.clone());
            continue;
        }
        let choice = &v["choices"][0];
        if let Some(c) = choice["delta"]["content"].as_str() {
            if !c.is_empty() {
                s.deltas += 1;
            }
            s.content.push_str(c);
        }
        if let Some(f) = choice["finish_reason"].as_str() {
            s.finish_reason = Some(f.to_string());
        }
        if !v["usage"].is_null() {
            s.usage = Some(v["usage"].clone());
        }
    }
    s
}

pub fn user_request(model: &str, text: &str) -> Value {
    json!({"model": model, "messages": [{"role": "user", "content": text}]})
}
