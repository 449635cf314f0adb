//! Per-user conversation persistence.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use verde_core::chat::{Message, Role};
use verde_core::persistence::{Keyspace, Store};
use verde_core::tenancy::ChatMode;
use verde_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
    pub timestamp: DateTime<Utc>,
}

impl Turn {
    pub fn message(&self) -> Message {
        Message { role: self.role, content: self.content.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub user_id: String,
    pub course_id: String,
    pub mode: ChatMode,
    pub turns: Vec<Turn>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deleted_at: Option<DateTime<Utc>>,
}

impl Conversation {
    pub fn messages(&self) -> Vec<Message> {
        self.turns.iter().map(Turn::message).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationSummary {
    pub id: String,
    pub mode: ChatMode,
    pub title: String,
    pub turn_count: usize,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

const TITLE_CHARS: usize = 60;

impl From<&Conversation> for ConversationSummary {
    fn from(c: &Conversation) -> Self {
        let title = c
            .turns
            .iter()
            .find(|t| t.role == Role::User)
            .map(|t| t.content.split_whitespace().collect::<Vec<_>>().join(" ").chars().take(TITLE_CHARS).collect())
            .unwrap_or_default();
        Self {
            id: c.id.clone(),
            mode: c.mode,
            title,
            turn_count: c.turns.len(),
            created_at: c.created_at,
            updated_at: c.updated_at,
        }
    }
}

fn conv_key(course_id: &str, user_id: &str, id: &str) -> String {
    format!("conv:{course_id}:{user_id}:{id}")
}

/// Conversations are stored under their owner's key, so a lookup with the
/// wrong owner is indistinguishable from a missing id.
#[derive(Clone)]
pub struct Conversations {
    store: Store,
}

impl Conversations {
    pub fn new(store: Store) -> Self {
        Self { store }
    }

    pub fn new_id() -> String {
        format!("conv-{}", uuid::Uuid::new_v4().simple())
    }

    pub fn create(&self, id: &str, user_id: &str, course_id: &str, mode: ChatMode, turns: Vec<Turn>) -> Result<Conversation> {
        let now = Utc::now();
        let conv = Conversation {
            id: id.to_string(),
            user_id: user_id.to_string(),
            course_id: course_id.to_string(),
            mode,
            turns,
            created_at: now,
            updated_at: now,
            deleted_at: None,
        };
        self.store.put_json(Keyspace::Conversations, &conv_key(course_id, user_id, id), 0, &conv)?;
        Ok(conv)
    }

    pub fn get(&self, user_id: &str, course_id: &str, id: &str) -> Result<Conversation> {
        let missing = || Error::not_found(format!("conversation {id}"));
        if id.contains(':') {
            return Err(missing());
        }
        let (_, conv) = self
            .store
            .try_get_json::<Conversation>(Keyspace::Conversations, &conv_key(course_id, user_id, id))?
            .ok_or_else(missing)?;
        if conv.deleted_at.is_some() {
            return Err(missing());
        }
        Ok(conv)
    }

    /// Newest first by last update.
    pub fn list(&self, user_id: &str, course_id: &str) -> Result<Vec<ConversationSummary>> {
        let prefix = format!("conv:{course_id}:{user_id}:");
        let mut out = Vec::new();
        for (_, record) in self.store.scan_prefix(Keyspace::Conversations, &prefix) {
            let conv: Conversation = serde_json::from_slice(&record.body)?;
            if conv.deleted_at.is_none() {
                out.push(ConversationSummary::from(&conv));
            }
        }
        out.sort_by(|a, b| b.updated_at.cmp(&a.updated_at).then_with(|| a.id.cmp(&b.id)));
        Ok(out)
    }

    /// Appends turns under compare-and-set on the conversation version.
    pub fn append(&self, user_id: &str, course_id: &str, id: &str, turns: &[Turn]) -> Result<Conversation> {
        if id.contains(':') {
            return Err(Error::not_found(format!("conversation {id}")));
        }
        let (_, conv) = self.store.modify_json::<Conversation, _>(
            Keyspace::Conversations,
            &conv_key(course_id, user_id, id),
            |c| {
                let mut c = c
                    .filter(|c| c.deleted_at.is_none())
                    .ok_or_else(|| Error::not_found(format!("conversation {id}")))?;
                c.turns.extend_from_slice(turns);
                c.updated_at = Utc::now();
                Ok(c)
            },
        )?;
        Ok(conv)
    }

    /// Hides the conversation from its owner; the record is retained.
    pub fn delete(&self, user_id: &str, course_id: &str, id: &str) -> Result<()> {
        if id.contains(':') {
            return Err(Error::not_found(format!("conversation {id}")));
        }
        self.store.modify_json::<Conversation, _>(Keyspace::Conversations, &conv_key(course_id, user_id, id), |c| {
            let mut c = c
                .filter(|c| c.deleted_at.is_none())
                .ok_or_else(|| Error::not_found(format!("conversation {id}")))?;
            c.deleted_at = Some(Utc::now());
            Ok(c)
        })?;
        Ok(())
    }
}
