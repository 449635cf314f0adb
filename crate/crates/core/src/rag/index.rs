//! Exact (brute-force) cosine index over named collections.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::embed::{cosine, Embedder, HashingEmbedder, Vector};
use crate::error::{Error, Result};
use crate::persistence::{canonical_json, Keyspace, Store};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub collection_id: String,
    pub text: String,
    pub source: String,
    pub seq: u32,
    pub vector: Vector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collection {
    pub id: String,
    pub name: String,
    pub dims: usize,
    pub chunk_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub chunk: Chunk,
    pub score: f64,
}

pub const DEFAULT_TOP_K: usize = 4;
pub const DEFAULT_THRESHOLD: f64 = 0.0;

/// Storage and similarity search over embedded chunks.
pub trait VectorIndex: Send + Sync {
    fn create_collection(&self, id: &str, name: &str) -> Result<Collection>;
    fn collection(&self, id: &str) -> Result<Collection>;
    fn collections(&self) -> Vec<Collection>;
    fn upsert(&self, collection_id: &str, text: &str, source: &str, seq: u32) -> Result<Chunk>;
    /// Drops chunks of `source` whose seq is at or beyond `from_seq`.
    fn truncate_source(&self, collection_id: &str, source: &str, from_seq: u32) -> Result<usize>;
    fn top_k(
        &self,
        collection_id: &str,
        query: &str,
        k: usize,
        threshold: f64,
    ) -> Result<Vec<RetrievalResult>>;
    fn chunks(&self, collection_id: &str) -> Result<Vec<Chunk>>;
}

/// Deterministic chunk id derived from its natural key.
pub fn chunk_id(collection_id: &str, source: &str, seq: u32) -> String {
    let mut hasher = Sha256::new();
    hasher.update(collection_id.as_bytes());
    hasher.update([0]);
    hasher.update(source.as_bytes());
    hasher.update([0]);
    hasher.update(seq.to_be_bytes());
    hex::encode(&hasher.finalize()[..16])
}

/// Ordering used for retrieval results: score descending, then id ascending.
pub fn rank_order(a: &RetrievalResult, b: &RetrievalResult) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.chunk.id.cmp(&b.chunk.id))
}

#[derive(Serialize, Deserialize)]
struct CollectionMeta {
    id: String,
    name: String,
    dims: usize,
}

struct CollectionState {
    meta: CollectionMeta,
    chunks: BTreeMap<(String, u32), Chunk>,
}

/// In-process exact index persisted through the record store.
///
/// Collection metadata lives under `collection:<id>`; chunks under
/// `chunk:<collection>:<chunk id>` with a `null` body once removed.
pub struct ExactIndex {
    store: Store,
    embedder: Arc<dyn Embedder>,
    collections: RwLock<HashMap<String, Arc<RwLock<CollectionState>>>>,
}

impl ExactIndex {
    pub fn new(store: Store) -> Result<Self> {
        Self::with_embedder(store, Arc::new(HashingEmbedder))
    }

    /// Loads every persisted collection, re-verifying each stored vector
    /// against the embedder.
    pub fn with_embedder(store: Store, embedder: Arc<dyn Embedder>) -> Result<Self> {
        let mut collections = HashMap::new();
        for (_, record) in store.scan_prefix(Keyspace::Collections, "collection:") {
            let meta: CollectionMeta = serde_json::from_slice(&record.body)?;
            collections.insert(
                meta.id.clone(),
                CollectionState { meta, chunks: BTreeMap::new() },
            );
        }
        for (key, record) in store.scan_prefix(Keyspace::Collections, "chunk:") {
            let Some(chunk) = serde_json::from_slice::<Option<Chunk>>(&record.body)? else {
                continue;
            };
            if chunk.vector != embedder.embed(&chunk.text) {
                return Err(Error::Corrupt(format!("stored vector for {key} does not match its text")));
            }
            let state = collections
                .get_mut(&chunk.collection_id)
                .ok_or_else(|| Error::Corrupt(format!("chunk {key} has no collection")))?;
            state.chunks.insert((chunk.source.clone(), chunk.seq), chunk);
        }
        let collections = collections
            .into_iter()
            .map(|(id, state)| (id, Arc::new(RwLock::new(state))))
            .collect();
        Ok(Self { store, embedder, collections: RwLock::new(collections) })
    }

    pub fn embedder(&self) -> &dyn Embedder {
        &*self.embedder
    }

    fn state(&self, collection_id: &str) -> Result<Arc<RwLock<CollectionState>>> {
        self.collections
            .read()
            .get(collection_id)
            .cloned()
            .ok_or_else(|| Error::not_found(format!("collection {collection_id}")))
    }

    fn persist_chunk(&self, collection_id: &str, id: &str, chunk: Option<&Chunk>) -> Result<()> {
        let key = format!("chunk:{collection_id}:{id}");
        let expected = self.store.try_get(Keyspace::Collections, &key).map_or(0, |r| r.version);
        self.store.put_cas(Keyspace::Collections, &key, expected, canonical_json(&chunk)?)?;
        Ok(())
    }

    /// Writes the collection as one canonical JSON chunk per line.
    pub fn export(&self, collection_id: &str, mut out: impl Write) -> Result<usize> {
        let chunks = self.chunks(collection_id)?;
        for chunk in &chunks {
            out.write_all(&canonical_json(chunk)?)?;
            out.write_all(b"\n")?;
        }
        Ok(chunks.len())
    }

    /// Loads line-JSON chunks into `collection_id`, creating it if needed.
    /// Every vector must match the embedding of its text.
    pub fn import(&self, collection_id: &str, input: impl BufRead) -> Result<usize> {
        let mut parsed = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let chunk: Chunk = serde_json::from_str(&line)
                .map_err(|e| Error::validation(format!("line {}: {e}", n + 1)))?;
            let expected = self.embedder.embed(&chunk.text);
            let matches = chunk.vector.dims() == expected.dims()
                && chunk
                    .vector
                    .as_slice()
                    .iter()
                    .zip(expected.as_slice())
                    .all(|(a, b)| (a - b).abs() <= 1e-9);
            if !matches {
                return Err(Error::validation(format!(
                    "line {}: vector does not match embedding of text",
                    n + 1
                )));
            }
            parsed.push(chunk);
        }
        if self.collection(collection_id).is_err() {
            self.create_collection(collection_id, collection_id)?;
        }
        for chunk in &parsed {
            self.upsert(collection_id, &chunk.text, &chunk.source, chunk.seq)?;
        }
        Ok(parsed.len())
    }
}

impl VectorIndex for ExactIndex {
    fn create_collection(&self, id: &str, name: &str) -> Result<Collection> {
        if id.is_empty() {
            return Err(Error::validation("collection id must not be empty"));
        }
        let mut collections = self.collections.write();
        if collections.contains_key(id) {
            return Err(Error::Conflict(format!("collection {id} already exists")));
        }
        let meta = CollectionMeta {
            id: id.to_string(),
            name: name.to_string(),
            dims: self.embedder.dims(),
        };
        self.store.put_json(Keyspace::Collections, &format!("collection:{id}"), 0, &meta)?;
        let collection = Collection {
            id: meta.id.clone(),
            name: meta.name.clone(),
            dims: meta.dims,
            chunk_count: 0,
        };
        collections.insert(
            id.to_string(),
            Arc::new(RwLock::new(CollectionState { meta, chunks: BTreeMap::new() })),
        );
        Ok(collection)
    }

    fn collection(&self, id: &str) -> Result<Collection> {
        let state = self.state(id)?;
        let state = state.read();
        Ok(Collection {
            id: state.meta.id.clone(),
            name: state.meta.name.clone(),
            dims: state.meta.dims,
            chunk_count: state.chunks.len(),
        })
    }

    fn collections(&self) -> Vec<Collection> {
        let mut ids: Vec<String> = self.collections.read().keys().cloned().collect();
        ids.sort();
        ids.iter().filter_map(|id| self.collection(id).ok()).collect()
    }

    fn upsert(&self, collection_id: &str, text: &str, source: &str, seq: u32) -> Result<Chunk> {
        let state = self.state(collection_id)?;
        let vector = self.embedder.embed(text);
        let mut state = state.write();
        let key = (source.to_string(), seq);
        let id = state
            .chunks
            .get(&key)
            .map(|c| c.id.clone())
            .unwrap_or_else(|| chunk_id(collection_id, source, seq));
        let chunk = Chunk {
            id,
            collection_id: collection_id.to_string(),
            text: text.to_string(),
            source: source.to_string(),
            seq,
            vector,
        };
        self.persist_chunk(collection_id, &chunk.id, Some(&chunk))?;
        state.chunks.insert(key, chunk.clone());
        Ok(chunk)
    }

    fn truncate_source(&self, collection_id: &str, source: &str, from_seq: u32) -> Result<usize> {
        let state = self.state(collection_id)?;
        let mut state = state.write();
        let stale: Vec<(String, u32)> = state
            .chunks
            .range((source.to_string(), from_seq)..)
            .take_while(|((s, _), _)| s == source)
            .map(|(k, _)| k.clone())
            .collect();
        for key in &stale {
            if let Some(chunk) = state.chunks.remove(key) {
                self.persist_chunk(collection_id, &chunk.id, None)?;
            }
        }
        Ok(stale.len())
    }

    fn top_k(
        &self,
        collection_id: &str,
        query: &str,
        k: usize,
        threshold: f64,
    ) -> Result<Vec<RetrievalResult>> {
        if k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        let state = self.state(collection_id)?;
        let query = self.embedder.embed(query);
        let state = state.read();
        let mut scored = Vec::with_capacity(state.chunks.len());
        for chunk in state.chunks.values() {
            let score = cosine(&query, &chunk.vector)?;
            if score >= threshold {
                scored.push((score, chunk));
            }
        }
        scored.sort_by(|(sa, a), (sb, b)| sb.total_cmp(sa).then_with(|| a.id.cmp(&b.id)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(score, chunk)| RetrievalResult { chunk: chunk.clone(), score })
            .collect())
    }

    fn chunks(&self, collection_id: &str) -> Result<Vec<Chunk>> {
        let state = self.state(collection_id)?;
        let state = state.read();
        Ok(state.chunks.values().cloned().collect())
    }
}
