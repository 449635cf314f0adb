//! Courses, members, surrogate API keys and federated login.

mod login;
mod policy;

pub use login::{
    sign_assertion, IdentityAssertion, LoginProvider, SessionStore, SignedAssertion,
    SignedAssertionProvider, SESSION_TTL,
};
pub use policy::{authorize, policy, Action, Decision};

use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use tracing::info;
use uuid::Uuid;

use crate::error::{Error, Result};
use crate::metering::create_budget;
use crate::persistence::{Keyspace, Store};

pub const KEY_PREFIX: &str = "verde-";
const KEY_RANDOM_BYTES: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub id: String,
    pub external_subject: String,
    pub display_name: String,
    pub email: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    Instructor,
    Admin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub user_id: String,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatMode {
    PassThrough,
    Rag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Course {
    pub id: String,
    pub name: String,
    /// Sorted by `user_id`, at most one entry per user.
    pub members: Vec<Member>,
    pub allowed_models: BTreeSet<String>,
    pub mode: ChatMode,
    #[serde(default)]
    pub collection_id: Option<String>,
    pub budget_id: String,
    #[serde(default)]
    pub system_prompt_override: Option<String>,
    /// Sampling temperature used when a request does not set one.
    #[serde(default)]
    pub default_temperature: Option<f64>,
    #[serde(default)]
    pub rag_top_k: Option<usize>,
    #[serde(default)]
    pub rag_threshold: Option<f64>,
}

impl Course {
    pub fn member(&self, user_id: &str) -> Option<&Member> {
        self.members
            .binary_search_by(|m| m.user_id.as_str().cmp(user_id))
            .ok()
            .map(|i| &self.members[i])
    }
}

/// Input for [`Tenancy::create_course`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NewCourse {
    pub name: String,
    pub allowed_models: BTreeSet<String>,
    pub mode: Option<ChatMode>,
    #[serde(default)]
    pub collection_id: Option<String>,
    #[serde(default)]
    pub system_prompt_override: Option<String>,
    #[serde(default)]
    pub default_temperature: Option<f64>,
    #[serde(default)]
    pub rag_top_k: Option<usize>,
    #[serde(default)]
    pub rag_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiKey {
    pub id: String,
    pub key_hash: String,
    pub user_id: String,
    pub course_id: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub revoked_at: Option<DateTime<Utc>>,
    pub label: String,
}

/// A freshly issued key. `plaintext` exists only here and is never stored.
#[derive(Debug, Clone)]
pub struct IssuedKey {
    pub key: ApiKey,
    pub plaintext: String,
}

/// The authenticated caller of a course-scoped request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub user_id: String,
    pub course_id: String,
    pub role: Role,
    pub key_id: String,
}

impl Principal {
    /// The operator identity behind the admin token. Not bound to a course.
    pub fn admin() -> Self {
        Self {
            user_id: "admin".into(),
            course_id: String::new(),
            role: Role::Admin,
            key_id: "admin".into(),
        }
    }
}

/// Lowercase hex SHA-256 of a presented key.
pub fn hash_key(plaintext: &str) -> String {
    hex::encode(Sha256::digest(plaintext.as_bytes()))
}

fn user_key(id: &str) -> String {
    format!("user:{id}")
}
fn subject_key(subject: &str) -> String {
    format!("subject:{subject}")
}
fn course_key(id: &str) -> String {
    format!("course:{id}")
}
fn api_key_key(id: &str) -> String {
    format!("key:{id}")
}
fn hash_index_key(hash: &str) -> String {
    format!("hash:{hash}")
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: String,
}

pub struct Tenancy {
    store: Store,
    sessions: SessionStore,
}

impl Tenancy {
    pub fn new(store: Store) -> Self {
        Self { store, sessions: SessionStore::default() }
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }

    /// Creates the user for `external_subject`, or refreshes its profile
    /// fields if it already exists.
    pub fn upsert_user(&self, external_subject: &str, display_name: &str, email: &str) -> Result<User> {
        if external_subject.is_empty() {
            return Err(Error::validation("external_subject must not be empty"));
        }
        loop {
            if let Some((_, idx)) = self
                .store
                .try_get_json::<IndexEntry>(Keyspace::Users, &subject_key(external_subject))?
            {
                let (_, user) = self.store.modify_json::<User, _>(Keyspace::Users, &user_key(&idx.id), |u| {
                    let mut u = u.ok_or_else(|| Error::not_found(format!("user {}", idx.id)))?;
                    u.display_name = display_name.to_string();
                    u.email = email.to_string();
                    Ok(u)
                })?;
                return Ok(user);
            }
            let user = User {
                id: Uuid::new_v4().to_string(),
                external_subject: external_subject.to_string(),
                display_name: display_name.to_string(),
                email: email.to_string(),
            };
            // Claim the subject first; losing the race means another caller
            // created the user, so loop and update theirs.
            match self.store.put_json(
                Keyspace::Users,
                &subject_key(external_subject),
                0,
                &IndexEntry { id: user.id.clone() },
            ) {
                Ok(_) => {
                    self.store.put_json(Keyspace::Users, &user_key(&user.id), 0, &user)?;
                    return Ok(user);
                }
                Err(Error::VersionConflict { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }

    pub fn user(&self, id: &str) -> Result<User> {
        self.store
            .try_get_json::<User>(Keyspace::Users, &user_key(id))?
            .map(|(_, u)| u)
            .ok_or_else(|| Error::not_found(format!("user {id}")))
    }

    pub fn create_course(&self, new: NewCourse) -> Result<Course> {
        if new.name.trim().is_empty() {
            return Err(Error::validation("course name must not be empty"));
        }
        if new.allowed_models.is_empty() || new.allowed_models.iter().any(|m| m.is_empty()) {
            return Err(Error::validation("allowed_models must be a nonempty set of model names"));
        }
        let mode = new.mode.unwrap_or(ChatMode::PassThrough);
        if mode == ChatMode::Rag && new.collection_id.as_deref().map_or(true, str::is_empty) {
            return Err(Error::validation("rag mode requires a collection_id"));
        }
        if let Some(t) = new.default_temperature {
            if !(0.0..=2.0).contains(&t) {
                return Err(Error::validation("default_temperature must be in [0, 2]"));
            }
        }
        if new.rag_top_k == Some(0) {
            return Err(Error::validation("rag_top_k must be at least 1"));
        }
        let id = Uuid::new_v4().to_string();
        let course = Course {
            id: id.clone(),
            name: new.name,
            members: Vec::new(),
            allowed_models: new.allowed_models,
            mode,
            collection_id: new.collection_id,
            budget_id: id.clone(),
            system_prompt_override: new.system_prompt_override,
            default_temperature: new.default_temperature,
            rag_top_k: new.rag_top_k,
            rag_threshold: new.rag_threshold,
        };
        create_budget(&self.store, &id)?;
        self.store.put_json(Keyspace::Courses, &course_key(&id), 0, &course)?;
        info!(course_id = %id, name = %course.name, "course created");
        Ok(course)
    }

    pub fn course(&self, id: &str) -> Result<Course> {
        self.store
            .try_get_json::<Course>(Keyspace::Courses, &course_key(id))?
            .map(|(_, c)| c)
            .ok_or_else(|| Error::not_found(format!("course {id}")))
    }

    pub fn courses(&self) -> Result<Vec<Course>> {
        self.store
            .scan_prefix(Keyspace::Courses, "course:")
            .into_iter()
            .map(|(_, r)| Ok(serde_json::from_slice(&r.body)?))
            .collect()
    }

    /// Adds `user_id` to the course, or changes its role if already enrolled.
    pub fn enroll(&self, course_id: &str, user_id: &str, role: Role) -> Result<Member> {
        if role == Role::Admin {
            return Err(Error::validation("admin is a global role, not a course role"));
        }
        self.user(user_id)?;
        let member = Member { user_id: user_id.to_string(), role };
        self.store.modify_json::<Course, _>(Keyspace::Courses, &course_key(course_id), |c| {
            let mut c = c.ok_or_else(|| Error::not_found(format!("course {course_id}")))?;
            match c.members.binary_search_by(|m| m.user_id.as_str().cmp(user_id)) {
                Ok(i) => c.members[i].role = role,
                Err(i) => c.members.insert(i, member.clone()),
            }
            Ok(c)
        })?;
        Ok(member)
    }

    pub fn issue_key(&self, course_id: &str, user_id: &str, label: &str) -> Result<IssuedKey> {
        let course = self.course(course_id)?;
        if course.member(user_id).is_none() {
            return Err(Error::not_found(format!("membership of {user_id} in {course_id}")));
        }
        loop {
            let mut secret = [0u8; KEY_RANDOM_BYTES];
            OsRng.fill_bytes(&mut secret);
            let plaintext = format!("{KEY_PREFIX}{}", hex::encode(secret));
            let key = ApiKey {
                id: Uuid::new_v4().to_string(),
                key_hash: hash_key(&plaintext),
                user_id: user_id.to_string(),
                course_id: course_id.to_string(),
                created_at: Utc::now(),
                revoked_at: None,
                label: label.to_string(),
            };
            match self.store.put_json(
                Keyspace::Keys,
                &hash_index_key(&key.key_hash),
                0,
                &IndexEntry { id: key.id.clone() },
            ) {
                Ok(_) => {}
                // 160-bit collision; draw again.
                Err(Error::VersionConflict { .. }) => continue,
                Err(e) => return Err(e),
            }
            self.store.put_json(Keyspace::Keys, &api_key_key(&key.id), 0, &key)?;
            info!(key_id = %key.id, course_id, user_id, "api key issued");
            return Ok(IssuedKey { key, plaintext });
        }
    }

    pub fn key(&self, key_id: &str) -> Result<ApiKey> {
        self.store
            .try_get_json::<ApiKey>(Keyspace::Keys, &api_key_key(key_id))?
            .map(|(_, k)| k)
            .ok_or_else(|| Error::not_found(format!("key {key_id}")))
    }

    pub fn keys_for(&self, course_id: &str, user_id: Option<&str>) -> Result<Vec<ApiKey>> {
        let mut keys = Vec::new();
        for (_, record) in self.store.scan_prefix(Keyspace::Keys, "key:") {
            let key: ApiKey = serde_json::from_slice(&record.body)?;
            if key.course_id == course_id && user_id.map_or(true, |u| key.user_id == u) {
                keys.push(key);
            }
        }
        Ok(keys)
    }

    /// Marks the key revoked. Revoking an already-revoked key is a no-op.
    pub fn revoke_key(&self, key_id: &str) -> Result<ApiKey> {
        let (_, key) = self.store.modify_json::<ApiKey, _>(Keyspace::Keys, &api_key_key(key_id), |k| {
            let mut k = k.ok_or_else(|| Error::not_found(format!("key {key_id}")))?;
            if k.revoked_at.is_none() {
                k.revoked_at = Some(Utc::now());
            }
            Ok(k)
        })?;
        Ok(key)
    }

    /// Resolves a presented surrogate key. Every failure is `Error::Auth`.
    pub fn authenticate(&self, presented: &str) -> Result<Principal> {
        let hash = hash_key(presented);
        let idx = self
            .store
            .try_get_json::<IndexEntry>(Keyspace::Keys, &hash_index_key(&hash))
            .ok()
            .flatten()
            .ok_or(Error::Auth)?
            .1;
        let key = self.key(&idx.id).map_err(|_| Error::Auth)?;
        let matches: bool = key.key_hash.as_bytes().ct_eq(hash.as_bytes()).into();
        if !matches || key.revoked_at.is_some() {
            return Err(Error::Auth);
        }
        let course = self.course(&key.course_id).map_err(|_| Error::Auth)?;
        let member = course.member(&key.user_id).ok_or(Error::Auth)?;
        Ok(Principal {
            user_id: key.user_id,
            course_id: key.course_id,
            role: member.role,
            key_id: key.id,
        })
    }

    /// Verifies an identity assertion, creates or refreshes the user, and
    /// opens a web session. Returns the user and the session token.
    pub fn federated_login(
        &self,
        provider: &dyn LoginProvider,
        assertion: &SignedAssertion,
        now: DateTime<Utc>,
    ) -> Result<(User, String)> {
        let identity = provider.verify(assertion, now)?;
        let user = self.upsert_user(&identity.subject, &identity.display_name, &identity.email)?;
        let token = self.sessions.open(&user.id, now);
        Ok((user, token))
    }

    /// The course-scoped principal for a web session acting in `course_id`.
    pub fn session_principal(&self, token: &str, course_id: &str, now: DateTime<Utc>) -> Result<Principal> {
        let user_id = self.sessions.user_for(token, now).ok_or(Error::Auth)?;
        let course = self.course(course_id).map_err(|_| Error::Auth)?;
        let member = course.member(&user_id).ok_or(Error::Auth)?;
        Ok(Principal {
            key_id: format!("session:{user_id}"),
            role: member.role,
            user_id,
            course_id: course_id.to_string(),
        })
    }
}
