//! `/v1/chat/completions`, `/v1/models` and `/v1/conversations`.

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::Json;
use chrono::Utc;
use futures::StreamExt;
use tokio::sync::mpsc;
use tracing::{debug, error, warn};
use verde_core::chat::{Message, Role};
use verde_core::metering::{count_tokens, LedgerEntry};
use verde_core::rag::{PromptTemplate, VectorIndex};
use verde_core::tenancy::{Action, ChatMode, Course, Principal};

use super::{AppState, Gateway, CONVERSATION_HEADER};
use crate::conversations::{Conversation, Conversations, Turn};
use crate::error::ApiError;
use crate::guard::guard;
use crate::history::truncate_history;
use crate::router::{Backend, StreamItem, UpstreamError};
use crate::wire::{
    ChatCompletion, ChatCompletionChunk, ChatRequest, Delta, FinishReason, ModelList, ModelObject, StreamOptions,
    UpstreamChatRequest, Usage, FALLBACK_TEMPERATURE, SSE_DONE,
};

/// Releases a reservation unless it was settled. Dropping the guard (for
/// example when the client goes away mid-request) cancels it.
struct ReservationGuard {
    gw: AppState,
    id: Option<String>,
}

impl ReservationGuard {
    fn settle(mut self, usage: Usage, backend: &Backend) -> Result<LedgerEntry, ApiError> {
        let id = self.id.take().ok_or_else(|| ApiError::internal("reservation already closed"))?;
        Ok(self.gw.metering.settle(&id, usage.prompt_tokens, usage.completion_tokens, backend.class)?)
    }

    fn cancel(mut self) {
        self.release();
    }

    fn release(&mut self) {
        if let Some(id) = self.id.take() {
            if let Err(e) = self.gw.metering.cancel(&id) {
                error!(reservation = %id, error = %e, "cancel failed");
            }
        }
    }
}

impl Drop for ReservationGuard {
    fn drop(&mut self) {
        self.release();
    }
}

/// A validated, authorized request with its upstream payload built.
struct Prepared {
    principal: Principal,
    course: Course,
    request: ChatRequest,
    backend: Arc<Backend>,
    existing: Option<Conversation>,
    conversation_id: String,
    new_turns: Vec<Turn>,
    upstream_body: Bytes,
    prompt_estimate: u64,
    input_blocked: bool,
}

impl Gateway {
    fn prepare(&self, headers: &HeaderMap, body: &Bytes) -> Result<Prepared, ApiError> {
        let principal = self.principal(headers)?;
        super::Caller::Member(principal.clone()).require(Action::Chat, None)?;
        let request: ChatRequest =
            serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))?;
        request.validate().map_err(ApiError::bad_request)?;
        let course = self.tenancy.course(&principal.course_id)?;
        if !course.allowed_models.contains(&request.model) {
            return Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "permission_error",
                "model_not_allowed",
                format!("model `{}` is not enabled for this course", request.model),
            ));
        }
        let backend = self.router.resolve(&request.model).map_err(|_| ApiError::model_not_found(&request.model))?;
        let existing = match &request.conversation_id {
            Some(id) => Some(self.conversations.get(&principal.user_id, &course.id, id)?),
            None => None,
        };
        let conversation_id = existing.as_ref().map_or_else(Conversations::new_id, |c| c.id.clone());

        let now = Utc::now();
        let new_turns: Vec<Turn> = request
            .messages
            .iter()
            .filter(|m| m.role != Role::System)
            .map(|m| Turn { role: m.role, content: m.content.clone(), timestamp: now })
            .collect();

        let user_text: Vec<&str> =
            request.messages.iter().filter(|m| m.role == Role::User).map(|m| m.content.as_str()).collect();
        let input_blocked = guard(&user_text.join("\n"), &self.config.guardrails).is_blocked();

        let prior: Vec<Message> = existing.as_ref().map(Conversation::messages).unwrap_or_default();
        let budget = self.config.history.token_budget;
        let max_tokens = request.max_tokens_or_default();
        let temperature = request.temperature.or(course.default_temperature).unwrap_or(FALLBACK_TEMPERATURE);
        let stream_options = request.stream.then_some(StreamOptions { include_usage: true });

        let (messages, upstream_body) = match course.mode {
            ChatMode::PassThrough if existing.is_none() => (request.messages.clone(), body.clone()),
            ChatMode::PassThrough => {
                let mut all = prior;
                all.extend(request.messages.iter().cloned());
                let messages = truncate_history(&all, budget);
                let body = serialize(&UpstreamChatRequest {
                    model: &request.model,
                    messages: &messages,
                    max_tokens,
                    temperature,
                    stream: request.stream,
                    stream_options,
                })?;
                (messages, body)
            }
            ChatMode::Rag => {
                let last_user = request.messages.iter().rposition(|m| m.role == Role::User).unwrap_or(0);
                let question = request.messages[last_user].content.clone();
                let mut history = prior;
                history.extend(request.messages[..last_user].iter().filter(|m| m.role != Role::System).cloned());
                let history = truncate_history(&history, budget);
                let results = if input_blocked {
                    Vec::new()
                } else {
                    let collection = course
                        .collection_id
                        .as_deref()
                        .ok_or_else(|| ApiError::internal("rag course without a collection"))?;
                    let k = course.rag_top_k.unwrap_or(self.config.rag.default_top_k);
                    let threshold = course.rag_threshold.unwrap_or(self.config.rag.default_threshold);
                    self.index.top_k(collection, &question, k, threshold)?
                };
                debug!(course_id = %course.id, retrieved = results.len(), "rag retrieval");
                let template = course
                    .system_prompt_override
                    .as_deref()
                    .map_or_else(PromptTemplate::default, PromptTemplate::with_instructions);
                let messages = template.assemble(&results, &question, &history);
                let body = serialize(&UpstreamChatRequest {
                    model: &request.model,
                    messages: &messages,
                    max_tokens,
                    temperature,
                    stream: request.stream,
                    stream_options,
                })?;
                (messages, body)
            }
        };
        let prompt_estimate = messages.iter().map(|m| count_tokens(&m.content)).sum();
        Ok(Prepared {
            principal,
            course,
            request,
            backend,
            existing,
            conversation_id,
            new_turns,
            upstream_body,
            prompt_estimate,
            input_blocked,
        })
    }

    fn reserve(self: &Arc<Self>, prep: &Prepared) -> Result<ReservationGuard, ApiError> {
        let reservation = self.metering.reserve(
            &prep.course.id,
            &prep.principal.key_id,
            &prep.request.model,
            prep.prompt_estimate,
            prep.request.max_tokens_or_default(),
        )?;
        Ok(ReservationGuard { gw: self.clone(), id: Some(reservation.id) })
    }

    /// Stores the request's turns and the assistant reply. Failures are
    /// logged rather than returned: the call has already been accounted.
    fn persist(&self, prep: &Prepared, reply: &str) {
        let mut turns = prep.new_turns.clone();
        turns.push(Turn { role: Role::Assistant, content: reply.to_string(), timestamp: Utc::now() });
        let p = &prep.principal;
        let result = match &prep.existing {
            Some(_) => self.conversations.append(&p.user_id, &prep.course.id, &prep.conversation_id, &turns).map(drop),
            None => self
                .conversations
                .create(&prep.conversation_id, &p.user_id, &prep.course.id, prep.course.mode, turns)
                .map(drop),
        };
        if let Err(e) = result {
            error!(conversation = %prep.conversation_id, error = %e, "failed to store conversation turns");
        }
    }

    fn usage_or_count(prep: &Prepared, usage: Option<Usage>, content: &str) -> Usage {
        usage.unwrap_or_else(|| Usage::new(prep.prompt_estimate, count_tokens(content)))
    }
}

fn serialize<T: serde::Serialize>(value: &T) -> Result<Bytes, ApiError> {
    serde_json::to_vec(value).map(Bytes::from).map_err(|e| ApiError::internal(e.to_string()))
}

fn completion_id() -> String {
    format!("chatcmpl-{}", uuid::Uuid::new_v4().simple())
}

fn with_conversation_header(mut response: Response, id: &str) -> Response {
    if let Ok(v) = HeaderValue::from_str(id) {
        response.headers_mut().insert(CONVERSATION_HEADER, v);
    }
    response
}

pub(super) async fn chat_completions(State(gw): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    let prep = match gw.prepare(&headers, &body) {
        Ok(p) => p,
        Err(e) => return e.into_response(),
    };
    let conversation_id = prep.conversation_id.clone();
    let response = if prep.request.stream { stream(gw, prep).await } else { unary(gw, prep).await };
    match response {
        Ok(r) => with_conversation_header(r, &conversation_id),
        Err(e) => e.into_response(),
    }
}

async fn unary(gw: AppState, prep: Prepared) -> Result<Response, ApiError> {
    let blocked_reply = |prep: &Prepared| {
        let message = gw.config.guardrails.blocked_message.clone();
        gw.persist(prep, &message);
        let mut body = ChatCompletion::new(completion_id(), &prep.request.model, message, FinishReason::Stop, Usage::default());
        body.conversation_id = Some(prep.conversation_id.clone());
        Json(body).into_response()
    };
    if prep.input_blocked {
        return Ok(blocked_reply(&prep));
    }
    let reservation = gw.reserve(&prep)?;
    let result = match gw.router.forward(&prep.backend, prep.upstream_body.clone()).await {
        Ok(r) => r,
        Err(e) => {
            reservation.cancel();
            warn!(backend = %prep.backend.name, error = %e, "upstream call failed");
            return Err(e.into());
        }
    };
    if guard(&result.content, &gw.config.guardrails).is_blocked() {
        reservation.cancel();
        return Ok(blocked_reply(&prep));
    }
    let usage = Gateway::usage_or_count(&prep, result.usage, &result.content);
    let entry = reservation.settle(usage, &prep.backend)?;
    gw.persist(&prep, &result.content);
    let usage = Usage::new(entry.prompt_tokens, entry.completion_tokens);
    let mut body = ChatCompletion::new(completion_id(), &prep.request.model, result.content, result.finish_reason, usage);
    body.conversation_id = Some(prep.conversation_id.clone());
    Ok(Json(body).into_response())
}

struct Chunks {
    id: String,
    model: String,
}

impl Chunks {
    fn chunk(&self, delta: Delta, finish: Option<FinishReason>) -> ChatCompletionChunk {
        ChatCompletionChunk::new(&self.id, &self.model, delta, finish)
    }

    fn delta(&self, content: &str) -> ChatCompletionChunk {
        self.chunk(Delta { role: None, content: Some(content.to_string()) }, None)
    }

    fn last(&self, finish: FinishReason, usage: Usage, conversation_id: &str) -> ChatCompletionChunk {
        let mut c = self.chunk(Delta::default(), Some(finish));
        c.usage = Some(usage);
        c.conversation_id = Some(conversation_id.to_string());
        c
    }
}

fn data_event<T: serde::Serialize>(value: &T) -> Event {
    Event::default().data(serde_json::to_string(value).unwrap_or_else(|_| "{}".into()))
}

fn done_event() -> Event {
    Event::default().data(SSE_DONE)
}

fn sse_response(rx: mpsc::Receiver<Event>) -> Response {
    let events = futures::stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|e| (Ok::<_, Infallible>(e), rx))
    });
    Sse::new(events).into_response()
}

async fn stream(gw: AppState, prep: Prepared) -> Result<Response, ApiError> {
    let chunks = Chunks { id: completion_id(), model: prep.request.model.clone() };

    if prep.input_blocked {
        let message = gw.config.guardrails.blocked_message.clone();
        gw.persist(&prep, &message);
        let mut only = chunks.chunk(Delta { role: Some(Role::Assistant), content: Some(message) }, Some(FinishReason::Stop));
        only.usage = Some(Usage::default());
        only.conversation_id = Some(prep.conversation_id.clone());
        let (tx, rx) = mpsc::channel(2);
        let _ = tx.try_send(data_event(&only));
        let _ = tx.try_send(done_event());
        return Ok(sse_response(rx));
    }

    let reservation = gw.reserve(&prep)?;
    let mut upstream = match gw.router.forward_stream(&prep.backend, prep.upstream_body.clone()).await {
        Ok(s) => s,
        Err(e) => {
            reservation.cancel();
            warn!(backend = %prep.backend.name, error = %e, "upstream stream failed to open");
            return Err(e.into());
        }
    };

    let (tx, rx) = mpsc::channel::<Event>(64);
    let first = data_event(&chunks.chunk(Delta { role: Some(Role::Assistant), content: Some(String::new()) }, None));
    tokio::spawn(async move {
        let error_event = |e: ApiError| data_event(&e.body());
        if tx.send(first).await.is_err() {
            reservation.cancel();
            return;
        }
        let mut content = String::new();
        loop {
            let item = tokio::select! {
                biased;
                _ = tx.closed() => {
                    debug!(reservation = ?reservation.id, "client disconnected mid-stream");
                    reservation.cancel();
                    return;
                }
                item = upstream.next() => item,
            };
            match item {
                Some(StreamItem::Delta(d)) => {
                    content.push_str(&d);
                    if guard(&content, &gw.config.guardrails).is_blocked() {
                        reservation.cancel();
                        let message = gw.config.guardrails.blocked_message.clone();
                        gw.persist(&prep, &message);
                        let _ = tx.send(data_event(&chunks.delta(&message))).await;
                        let _ = tx.send(data_event(&chunks.last(FinishReason::Stop, Usage::default(), &prep.conversation_id))).await;
                        let _ = tx.send(done_event()).await;
                        return;
                    }
                    if tx.send(data_event(&chunks.delta(&d))).await.is_err() {
                        reservation.cancel();
                        return;
                    }
                }
                Some(StreamItem::Done { finish_reason, usage }) => {
                    drop(upstream);
                    if tx.is_closed() {
                        reservation.cancel();
                        return;
                    }
                    let usage = Gateway::usage_or_count(&prep, usage, &content);
                    let entry = match reservation.settle(usage, &prep.backend) {
                        Ok(entry) => entry,
                        Err(e) => {
                            let _ = tx.send(error_event(e)).await;
                            let _ = tx.send(done_event()).await;
                            return;
                        }
                    };
                    gw.persist(&prep, &content);
                    let usage = Usage::new(entry.prompt_tokens, entry.completion_tokens);
                    let _ = tx.send(data_event(&chunks.last(finish_reason, usage, &prep.conversation_id))).await;
                    let _ = tx.send(done_event()).await;
                    return;
                }
                Some(StreamItem::Error(e)) => {
                    reservation.cancel();
                    warn!(backend = %prep.backend.name, error = %e, "upstream stream failed");
                    let _ = tx.send(error_event(e.into())).await;
                    let _ = tx.send(done_event()).await;
                    return;
                }
                None => {
                    reservation.cancel();
                    let e = UpstreamError::Transport("upstream stream ended".into());
                    let _ = tx.send(error_event(e.into())).await;
                    let _ = tx.send(done_event()).await;
                    return;
                }
            }
        }
    });
    Ok(sse_response(rx))
}

pub(super) async fn list_models(State(gw): State<AppState>, headers: HeaderMap) -> Result<Json<ModelList>, ApiError> {
    let principal = gw.principal(&headers)?;
    let course = gw.tenancy.course(&principal.course_id)?;
    let data = course
        .allowed_models
        .iter()
        .map(|m| ModelObject {
            id: m.clone(),
            object: "model".into(),
            created: 0,
            owned_by: gw.router.resolve(m).map_or_else(|_| "verde".to_string(), |b| b.name.clone()),
        })
        .collect();
    Ok(Json(ModelList { object: "list".into(), data }))
}

pub(super) async fn list_conversations(
    State(gw): State<AppState>,
    headers: HeaderMap,
) -> Result<Json<serde_json::Value>, ApiError> {
    let p = gw.principal(&headers)?;
    super::Caller::Member(p.clone()).require(Action::ListOwnConversations, None)?;
    let data = gw.conversations.list(&p.user_id, &p.course_id)?;
    Ok(Json(serde_json::json!({"object": "list", "data": data})))
}

pub(super) async fn get_conversation(
    State(gw): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<Conversation>, ApiError> {
    let p = gw.principal(&headers)?;
    super::Caller::Member(p.clone()).require(Action::ListOwnConversations, None)?;
    Ok(Json(gw.conversations.get(&p.user_id, &p.course_id, &id)?))
}

pub(super) async fn delete_conversation(
    State(gw): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    let p = gw.principal(&headers)?;
    super::Caller::Member(p.clone()).require(Action::ListOwnConversations, None)?;
    gw.conversations.delete(&p.user_id, &p.course_id, &id)?;
    Ok(StatusCode::NO_CONTENT)
}
