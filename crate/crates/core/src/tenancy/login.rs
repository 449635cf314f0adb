//! Login boundary: a signed identity assertion stands in for the federated
//! identity provider, and verified logins open short-lived web sessions.

use std::collections::HashMap;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use chrono::{DateTime, Duration, Utc};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use parking_lot::Mutex;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::hash_key;
use crate::error::{Error, Result};
use crate::persistence::canonical_json;

pub const SESSION_TTL: Duration = Duration::hours(1);
const SESSION_PREFIX: &str = "sess-";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityAssertion {
    pub subject: String,
    pub email: String,
    pub display_name: String,
    /// Unix seconds after which the assertion is rejected.
    pub expiry: i64,
}

/// An assertion plus a base64 Ed25519 signature over its canonical JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedAssertion {
    pub assertion: IdentityAssertion,
    pub signature: String,
}

pub trait LoginProvider: Send + Sync {
    fn verify(&self, signed: &SignedAssertion, now: DateTime<Utc>) -> Result<IdentityAssertion>;
}

pub fn sign_assertion(key: &SigningKey, assertion: IdentityAssertion) -> Result<SignedAssertion> {
    let message = canonical_json(&assertion)?;
    let signature = BASE64.encode(key.sign(&message).to_bytes());
    Ok(SignedAssertion { assertion, signature })
}

/// Verifies assertions against one static Ed25519 public key.
#[derive(Debug, Clone)]
pub struct SignedAssertionProvider {
    key: VerifyingKey,
}

impl SignedAssertionProvider {
    pub fn new(key: VerifyingKey) -> Self {
        Self { key }
    }

    /// `hex` is the 32-byte public key in hex.
    pub fn from_hex(hex_key: &str) -> Result<Self> {
        let bytes: [u8; 32] = hex::decode(hex_key.trim())
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::validation("login public key must be 32 bytes of hex"))?;
        let key = VerifyingKey::from_bytes(&bytes)
            .map_err(|e| Error::validation(format!("invalid login public key: {e}")))?;
        Ok(Self { key })
    }
}

impl LoginProvider for SignedAssertionProvider {
    fn verify(&self, signed: &SignedAssertion, now: DateTime<Utc>) -> Result<IdentityAssertion> {
        let raw = BASE64.decode(&signed.signature).map_err(|_| Error::Auth)?;
        let bytes: [u8; 64] = raw.try_into().map_err(|_| Error::Auth)?;
        let signature = Signature::from_bytes(&bytes);
        let message = canonical_json(&signed.assertion)?;
        self.key.verify(&message, &signature).map_err(|_| Error::Auth)?;
        if signed.assertion.expiry <= now.timestamp() {
            return Err(Error::Auth);
        }
        if signed.assertion.subject.is_empty() {
            return Err(Error::Auth);
        }
        Ok(signed.assertion.clone())
    }
}

struct Session {
    user_id: String,
    expires_at: DateTime<Utc>,
}

/// In-memory web sessions keyed by token hash.
#[derive(Default)]
pub struct SessionStore {
    sessions: Mutex<HashMap<String, Session>>,
}

impl SessionStore {
    pub fn open(&self, user_id: &str, now: DateTime<Utc>) -> String {
        let mut raw = [0u8; 32];
        OsRng.fill_bytes(&mut raw);
        let token = format!("{SESSION_PREFIX}{}", hex::encode(raw));
        let mut sessions = self.sessions.lock();
        sessions.retain(|_, s| s.expires_at > now);
        sessions.insert(
            hash_key(&token),
            Session { user_id: user_id.to_string(), expires_at: now + SESSION_TTL },
        );
        token
    }

    pub fn user_for(&self, token: &str, now: DateTime<Utc>) -> Option<String> {
        let sessions = self.sessions.lock();
        sessions
            .get(&hash_key(token))
            .filter(|s| s.expires_at > now)
            .map(|s| s.user_id.clone())
    }

    pub fn is_session_token(token: &str) -> bool {
        token.starts_with(SESSION_PREFIX)
    }
}
