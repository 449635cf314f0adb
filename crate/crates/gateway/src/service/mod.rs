//! HTTP surface: OpenAI-compatible `/v1` routes, `/admin` provisioning
//! routes and session login.

mod admin;
mod chat;

use std::sync::Arc;

use axum::extract::State;
use axum::http::HeaderMap;
use axum::routing::{delete, get, post, put};
use axum::Json;
use chrono::Utc;
use serde_json::json;
use subtle::ConstantTimeEq;
use tokio::net::TcpListener;
use verde_core::metering::{Metering, Price};
use verde_core::persistence::{Store, StoreOptions};
use verde_core::rag::ExactIndex;
use verde_core::tenancy::{
    authorize, Action, Decision, LoginProvider, Principal, SessionStore, SignedAssertionProvider, Tenancy,
};
use verde_core::Result;

use crate::config::GatewayConfig;
use crate::conversations::Conversations;
use crate::error::ApiError;
use crate::router::{Backend, Router, SecretStore};

/// Header naming the course a web session is acting in.
pub const COURSE_HEADER: &str = "x-verde-course";
/// Response header carrying the conversation a chat was stored under.
pub const CONVERSATION_HEADER: &str = "x-verde-conversation-id";

pub struct Gateway {
    pub store: Store,
    pub tenancy: Tenancy,
    pub metering: Metering,
    pub index: ExactIndex,
    pub router: Arc<Router>,
    pub conversations: Conversations,
    pub config: GatewayConfig,
    login: Option<Arc<dyn LoginProvider>>,
    admin_token: Option<String>,
}

impl Gateway {
    /// Opens the store named by `config.storage` (or an in-memory one).
    pub fn open(config: GatewayConfig, secrets: SecretStore) -> Result<Self> {
        let store = match &config.storage.path {
            Some(dir) => Store::open(dir, StoreOptions { sync: config.storage.sync, ..Default::default() })?,
            None => Store::in_memory(),
        };
        Self::with_store(config, secrets, store)
    }

    pub fn with_store(config: GatewayConfig, secrets: SecretStore, store: Store) -> Result<Self> {
        let login: Option<Arc<dyn LoginProvider>> = match &config.login.public_key {
            Some(hex_key) => Some(Arc::new(SignedAssertionProvider::from_hex(hex_key)?)),
            None => None,
        };
        Ok(Self {
            tenancy: Tenancy::new(store.clone()),
            metering: Metering::open(store.clone())?,
            index: ExactIndex::new(store.clone())?,
            router: Arc::new(Router::open(store.clone(), secrets)?),
            conversations: Conversations::new(store.clone()),
            admin_token: config.server.admin_token.clone(),
            login,
            config,
            store,
        })
    }

    pub fn with_admin_token(mut self, token: impl Into<String>) -> Self {
        self.admin_token = Some(token.into());
        self
    }

    pub fn with_login_provider(mut self, provider: Arc<dyn LoginProvider>) -> Self {
        self.login = Some(provider);
        self
    }

    /// Registers a backend and records prices for its models. Models with
    /// no price given keep their existing price, or are free.
    pub fn register_backend(&self, backend: Backend, prices: &[Price]) -> Result<Backend> {
        let backend = self.router.register(backend, prices)?;
        for model in &backend.model_names {
            match prices.iter().find(|p| &p.model == model) {
                Some(p) => self.metering.set_price(p.clone())?,
                None if self.metering.price(model).is_err() => self.metering.set_price(Price::free(model.clone()))?,
                None => {}
            }
        }
        Ok(backend)
    }

    fn is_admin_token(&self, token: &str) -> bool {
        self.admin_token
            .as_deref()
            .is_some_and(|t| !t.is_empty() && bool::from(t.as_bytes().ct_eq(token.as_bytes())))
    }

    /// Resolves the caller. `course_hint` scopes a web session; without it a
    /// session falls back to the `x-verde-course` header.
    pub(crate) fn caller(&self, headers: &HeaderMap, course_hint: Option<&str>) -> Result<Caller, ApiError> {
        let token = bearer(headers).ok_or_else(ApiError::unauthorized)?;
        if self.is_admin_token(token) {
            return Ok(Caller::Admin);
        }
        if SessionStore::is_session_token(token) {
            let now = Utc::now();
            let user_id = self.tenancy.sessions().user_for(token, now).ok_or_else(ApiError::unauthorized)?;
            let course = course_hint
                .map(str::to_string)
                .or_else(|| headers.get(COURSE_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string));
            return match course {
                Some(course_id) => self
                    .tenancy
                    .session_principal(token, &course_id, now)
                    .map(Caller::Member)
                    .map_err(|_| ApiError::forbidden("not a member of this course")),
                None => Ok(Caller::Session { user_id }),
            };
        }
        Ok(Caller::Member(self.tenancy.authenticate(token)?))
    }

    /// A course-scoped principal (API key, or session plus course).
    pub(crate) fn principal(&self, headers: &HeaderMap) -> Result<Principal, ApiError> {
        match self.caller(headers, None)? {
            Caller::Member(p) => Ok(p),
            Caller::Session { .. } => Err(ApiError::bad_request(format!("session requests need the {COURSE_HEADER} header"))),
            Caller::Admin => Err(ApiError::forbidden("the admin token is not a course member")),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Caller {
    Admin,
    Member(Principal),
    Session { user_id: String },
}

impl Caller {
    /// Admins pass everything; members need the action in their role and,
    /// when `course_id` is given, to be acting in that course.
    pub(crate) fn require(&self, action: Action, course_id: Option<&str>) -> Result<(), ApiError> {
        match self {
            Caller::Admin => Ok(()),
            Caller::Member(p) => {
                if authorize(p, action) == Decision::Deny {
                    return Err(ApiError::forbidden(format!("role {:?} may not {action:?}", p.role)));
                }
                if course_id.is_some_and(|c| c != p.course_id) {
                    return Err(ApiError::forbidden("resource belongs to another course"));
                }
                Ok(())
            }
            Caller::Session { .. } => Err(ApiError::forbidden("select a course for this action")),
        }
    }
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    let value = headers.get(axum::http::header::AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = value.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim()).filter(|t| !t.is_empty())
}

pub type AppState = Arc<Gateway>;

pub fn app(state: AppState) -> axum::Router {
    axum::Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/chat/completions", post(chat::chat_completions))
        .route("/v1/models", get(chat::list_models))
        .route("/v1/conversations", get(chat::list_conversations))
        .route("/v1/conversations/{id}", get(chat::get_conversation).delete(chat::delete_conversation))
        .route("/v1/me", get(admin::me))
        .route("/v1/keys", get(admin::own_keys).post(admin::issue_own_key))
        .route("/v1/keys/{id}", delete(admin::revoke_own_key))
        .route("/auth/login", post(admin::login))
        .route("/admin/users", post(admin::create_user))
        .route("/admin/courses", post(admin::create_course).get(admin::list_courses))
        .route("/admin/courses/{id}", get(admin::get_course))
        .route("/admin/courses/{id}/members", get(admin::list_members).post(admin::add_member))
        .route("/admin/courses/{id}/keys", get(admin::list_keys).post(admin::issue_key))
        .route("/admin/keys/{id}", delete(admin::revoke_key))
        .route("/admin/courses/{id}/budget", get(admin::get_budget).put(admin::set_budget))
        .route("/admin/courses/{id}/budget/funds", post(admin::add_funds))
        .route("/admin/backends", post(admin::register_backend).get(admin::list_backends))
        .route("/admin/usage", get(admin::usage))
        .route("/admin/collections", post(admin::create_collection).get(admin::list_collections))
        .route("/admin/collections/{id}/import", put(admin::import_collection).post(admin::import_collection))
        .route("/admin/collections/{id}/export", get(admin::export_collection))
        .with_state(state)
}

async fn healthz(State(gw): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "backends": gw.router.backends().len()}))
}

pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, app(state)).await
}
