//! Provisioning, reporting and login routes.

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Json;
use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use verde_core::metering::{Budget, Price, UsageReport};
use verde_core::rag::{Collection, VectorIndex};
use verde_core::tenancy::{Action, ApiKey, Course, Member, NewCourse, Role, SignedAssertion, User};

use super::{AppState, Caller};
use crate::error::ApiError;
use crate::router::Backend;

#[derive(Debug, Serialize)]
pub(super) struct MeResponse {
    user: User,
    #[serde(skip_serializing_if = "Option::is_none")]
    course_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    role: Option<Role>,
    memberships: Vec<Membership>,
}

#[derive(Debug, Serialize)]
struct Membership {
    course_id: String,
    course_name: String,
    role: Role,
    mode: verde_core::tenancy::ChatMode,
}

/// Decodes a JSON body once the caller has been authorized, so malformed
/// bodies never reveal more than a 401 or 403 would.
fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// The caller's identity and course memberships.
pub(super) async fn me(State(gw): State<AppState>, headers: HeaderMap) -> Result<Json<MeResponse>, ApiError> {
    let (user_id, course_id, role) = match gw.caller(&headers, None)? {
        Caller::Admin => return Err(ApiError::bad_request("the admin token has no user profile")),
        Caller::Member(p) => (p.user_id, Some(p.course_id), Some(p.role)),
        Caller::Session { user_id } => (user_id, None, None),
    };
    let user = gw.tenancy.user(&user_id)?;
    let memberships = gw
        .tenancy
        .courses()?
        .into_iter()
        .filter_map(|c| {
            c.member(&user_id).map(|m| Membership {
                course_id: c.id.clone(),
                course_name: c.name.clone(),
                role: m.role,
                mode: c.mode,
            })
        })
        .collect();
    Ok(Json(MeResponse { user, course_id, role, memberships }))
}

#[derive(Debug, Serialize)]
pub(super) struct IssuedKeyResponse {
    #[serde(flatten)]
    key: ApiKey,
    /// Shown once; only its hash is stored.
    api_key: String,
}

#[derive(Debug, Deserialize)]
pub(super) struct OwnKeyRequest {
    #[serde(default)]
    label: String,
}

pub(super) async fn own_keys(State(gw): State<AppState>, headers: HeaderMap) -> Result<Json<Vec<ApiKey>>, ApiError> {
    let p = gw.principal(&headers)?;
    Caller::Member(p.clone()).require(Action::ViewOwnKey, None)?;
    Ok(Json(gw.tenancy.keys_for(&p.course_id, Some(&p.user_id))?))
}

/// Self-service key issuance for the caller in their current course.
pub(super) async fn issue_own_key(
    State(gw): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<(StatusCode, Json<IssuedKeyResponse>), ApiError> {
    let p = gw.principal(&headers)?;
    Caller::Member(p.clone()).require(Action::ViewOwnKey, None)?;
    let label = if body.is_empty() { String::new() } else { parse_body::<OwnKeyRequest>(&body)?.label };
    let issued = gw.tenancy.issue_key(&p.course_id, &p.user_id, &label)?;
    Ok((StatusCode::CREATED, Json(IssuedKeyResponse { key: issued.key, api_key: issued.plaintext })))
}

pub(super) async fn revoke_own_key(
    State(gw): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<ApiKey>, ApiError> {
    let p = gw.principal(&headers)?;
    Caller::Member(p.clone()).require(Action::ViewOwnKey, None)?;
    let key = gw.tenancy.key(&id).map_err(|_| ApiError::not_found("key not found"))?;
    if key.user_id != p.user_id || key.course_id != p.course_id {
        return Err(ApiError::not_found("key not found"));
    }
    Ok(Json(gw.tenancy.revoke_key(&id)?))
}

#[derive(Debug, Serialize)]
pub(super) struct LoginResponse {
    token: String,
    user: User,
}

pub(super) async fn login(
    State(gw): State<AppState>,
    body: Bytes,
) -> Result<Json<LoginResponse>, ApiError> {
    let provider = gw
        .login
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_IMPLEMENTED, "server_error", "login_disabled", "login is not configured"))?;
    let signed: SignedAssertion = parse_body(&body)?;
    let (user, token) = gw.tenancy.federated_login(provider.as_ref(), &signed, Utc::now())?;
    Ok(Json(LoginResponse { token, user }))
}

#[derive(Debug, Deserialize)]
pub(super) struct NewUser {
    external_subject: String,
    #[serde(default)]
    display_name: String,
    #[serde(default)]
    email: String,
}

pub(super) async fn create_user(
    State(gw): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<(StatusCode, Json<User>), ApiError> {
    gw.caller(&headers, None)?.require(Action::EnrollMember, None)?;
    let body: NewUser = parse_body(&body)?;
    let user = gw.tenancy.upsert_user(&body.external_subject, &body.display_name, &body.email)?;
    Ok((StatusCode::CREATED, Json(user)))
}

pub(super) async fn create_course(
    State(gw): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<(StatusCode, Json<Course>), ApiError> {
    gw.caller(&headers, None)?.require(Action::CreateCourse, None)?;
    let body: NewCourse = parse_body(&body)?;
    Ok((StatusCode::CREATED, Json(gw.tenancy.create_course(body)?)))
}

/// Admins see every course; members see the courses they belong to.
pub(super) async fn list_courses(State(gw): State<AppState>, headers: HeaderMap) -> Result<Json<Vec<Course>>, ApiError> {
    let courses = gw.tenancy.courses()?;
    let visible = match gw.caller(&headers, None)? {
        Caller::Admin => courses,
        Caller::Member(p) => courses.into_iter().filter(|c| c.id == p.course_id).collect(),
        Caller::Session { user_id } => courses.into_iter().filter(|c| c.member(&user_id).is_some()).collect(),
    };
    Ok(Json(visible))
}

pub(super) async fn get_course(
    State(gw): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<Course>, ApiError> {
    gw.caller(&headers, Some(&id))?.require(Action::ListMembers, Some(&id))?;
    Ok(Json(gw.tenancy.course(&id)?))
}

#[derive(Debug, Serialize)]
pub(super) struct MemberView {
    user_id: String,
    role: Role,
    display_name: String,
    email: String,
}

pub(super) async fn list_members(
    State(gw): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<Vec<MemberView>>, ApiError> {
    gw.caller(&headers, Some(&id))?.require(Action::ListMembers, Some(&id))?;
    let course = gw.tenancy.course(&id)?;
    let members = course
        .members
        .iter()
        .map(|m| {
            let user = gw.tenancy.user(&m.user_id).ok();
            MemberView {
                user_id: m.user_id.clone(),
                role: m.role,
                display_name: user.as_ref().map(|u| u.display_name.clone()).unwrap_or_default(),
                email: user.map(|u| u.email).unwrap_or_default(),
            }
        })
        .collect();
    Ok(Json(members))
}

#[derive(Debug, Deserialize)]
pub(super) struct AddMember {
    user_id: String,
    role: Role,
}

pub(super) async fn add_member(
    State(gw): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<(StatusCode, Json<Member>), ApiError> {
    gw.caller(&headers, Some(&id))?.require(Action::EnrollMember, Some(&id))?;
    let body: AddMember = parse_body(&body)?;
    Ok((StatusCode::CREATED, Json(gw.tenancy.enroll(&id, &body.user_id, body.role)?)))
}

#[derive(Debug, Deserialize)]
pub(super) struct IssueKey {
    user_id: String,
    #[serde(default)]
    label: String,
}

pub(super) async fn issue_key(
    State(gw): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<(StatusCode, Json<IssuedKeyResponse>), ApiError> {
    gw.caller(&headers, Some(&id))?.require(Action::IssueKey, Some(&id))?;
    let body: IssueKey = parse_body(&body)?;
    let issued = gw.tenancy.issue_key(&id, &body.user_id, &body.label)?;
    Ok((StatusCode::CREATED, Json(IssuedKeyResponse { key: issued.key, api_key: issued.plaintext })))
}

pub(super) async fn list_keys(
    State(gw): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<Vec<ApiKey>>, ApiError> {
    gw.caller(&headers, Some(&id))?.require(Action::IssueKey, Some(&id))?;
    Ok(Json(gw.tenancy.keys_for(&id, None)?))
}

/// Keys outside the caller's course look the same as unknown keys.
pub(super) async fn revoke_key(
    State(gw): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<ApiKey>, ApiError> {
    let caller = gw.caller(&headers, None)?;
    caller.require(Action::RevokeKey, None)?;
    let key = gw.tenancy.key(&id).map_err(|_| ApiError::not_found("key not found"))?;
    if let Caller::Member(p) = &caller {
        if p.course_id != key.course_id {
            return Err(ApiError::not_found("key not found"));
        }
    }
    Ok(Json(gw.tenancy.revoke_key(&id)?))
}

pub(super) async fn get_budget(
    State(gw): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Json<Budget>, ApiError> {
    gw.caller(&headers, Some(&id))?.require(Action::ViewBudget, Some(&id))?;
    Ok(Json(gw.metering.budget(&id)?))
}

#[derive(Debug, Deserialize)]
pub(super) struct SetLimit {
    limit_microcredits: u64,
}

pub(super) async fn set_budget(
    State(gw): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Budget>, ApiError> {
    gw.caller(&headers, Some(&id))?.require(Action::ModifyBudget, Some(&id))?;
    let body: SetLimit = parse_body(&body)?;
    Ok(Json(gw.metering.set_limit(&id, body.limit_microcredits)?))
}

#[derive(Debug, Deserialize)]
pub(super) struct AddFunds {
    amount_microcredits: u64,
}

pub(super) async fn add_funds(
    State(gw): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Budget>, ApiError> {
    gw.caller(&headers, Some(&id))?.require(Action::ModifyBudget, Some(&id))?;
    let body: AddFunds = parse_body(&body)?;
    Ok(Json(gw.metering.add_funds(&id, body.amount_microcredits)?))
}

#[derive(Debug, Deserialize)]
pub(super) struct RegisterBackend {
    #[serde(flatten)]
    backend: Backend,
    #[serde(default)]
    prices: Vec<Price>,
}

pub(super) async fn register_backend(
    State(gw): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<(StatusCode, Json<Backend>), ApiError> {
    gw.caller(&headers, None)?.require(Action::RegisterBackend, None)?;
    let body: RegisterBackend = parse_body(&body)?;
    Ok((StatusCode::CREATED, Json(gw.register_backend(body.backend, &body.prices)?)))
}

pub(super) async fn list_backends(State(gw): State<AppState>, headers: HeaderMap) -> Result<Json<Vec<Backend>>, ApiError> {
    gw.caller(&headers, None)?.require(Action::RegisterBackend, None)?;
    Ok(Json(gw.router.backends()))
}

#[derive(Debug, Deserialize)]
pub(super) struct UsageQuery {
    from: String,
    to: String,
    #[serde(default)]
    course_id: Option<String>,
}

/// Accepts RFC 3339 timestamps or bare `YYYY-MM-DD` dates (midnight UTC).
pub(crate) fn parse_instant(s: &str) -> Result<DateTime<Utc>, ApiError> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|t| t.and_utc())
        .ok_or_else(|| ApiError::bad_request(format!("invalid timestamp `{s}`")))
}

/// Instructors get their own course's report whether or not they name it.
pub(super) async fn usage(
    State(gw): State<AppState>,
    headers: HeaderMap,
    uri: Uri,
) -> Result<Json<UsageReport>, ApiError> {
    // Authenticate before looking at the query.
    gw.caller(&headers, None)?;
    let Query(q) = Query::<UsageQuery>::try_from_uri(&uri).map_err(|e| ApiError::bad_request(e.body_text()))?;
    let caller = gw.caller(&headers, q.course_id.as_deref())?;
    let course_id = match &caller {
        Caller::Member(p) => {
            caller.require(Action::ViewUsage, q.course_id.as_deref())?;
            Some(p.course_id.clone())
        }
        _ => {
            caller.require(Action::ViewUsage, None)?;
            q.course_id.clone()
        }
    };
    let from = parse_instant(&q.from)?;
    let to = parse_instant(&q.to)?;
    Ok(Json(gw.metering.aggregate(from, to, course_id.as_deref())?))
}

#[derive(Debug, Deserialize)]
pub(super) struct NewCollection {
    id: String,
    #[serde(default)]
    name: Option<String>,
}

pub(super) async fn create_collection(
    State(gw): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<(StatusCode, Json<Collection>), ApiError> {
    gw.caller(&headers, None)?.require(Action::ManageCollections, None)?;
    let body: NewCollection = parse_body(&body)?;
    let name = body.name.unwrap_or_else(|| body.id.clone());
    Ok((StatusCode::CREATED, Json(gw.index.create_collection(&body.id, &name)?)))
}

pub(super) async fn list_collections(
    State(gw): State<AppState>,
    headers: HeaderMap,
) -> Result<Json<Vec<Collection>>, ApiError> {
    gw.caller(&headers, None)?.require(Action::ManageCollections, None)?;
    Ok(Json(gw.index.collections()))
}

#[derive(Debug, Serialize)]
pub(super) struct ImportResult {
    collection: Collection,
    imported: usize,
}

/// Body is the line-JSON export format.
pub(super) async fn import_collection(
    State(gw): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<ImportResult>, ApiError> {
    gw.caller(&headers, None)?.require(Action::ManageCollections, None)?;
    let imported = gw.index.import(&id, &body[..])?;
    Ok(Json(ImportResult { collection: gw.index.collection(&id)?, imported }))
}

pub(super) async fn export_collection(
    State(gw): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    gw.caller(&headers, None)?.require(Action::ManageCollections, None)?;
    let mut out = Vec::new();
    gw.index.export(&id, &mut out)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from(out)).into_response())
}
