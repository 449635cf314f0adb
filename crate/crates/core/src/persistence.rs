//! Namespaced record store with compare-and-set writes and an append-only
//! ledger.
//!
//! Every keyspace is held in memory and, when the store is opened on a
//! directory, mirrored to disk as:
//!
//! * `<keyspace>.log`: length-prefixed frames `[len: u32 LE][crc32: u32 LE][payload]`
//!   where the payload is `[version: u64 LE][key_len: u32 LE][key][body]`.
//! * `<keyspace>.snapshot.jsonl`: one `{"body":..,"key":..,"version":..}` line per
//!   record, written atomically via rename.
//!
//! Recovery loads the snapshot, then replays log frames up to the first torn or
//! corrupt frame. A frame is either fully present with a matching CRC or it is
//! discarded, so a key always recovers to a complete body of some version.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use tracing::{debug, warn};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keyspace {
    Users,
    Courses,
    Keys,
    Budgets,
    Ledger,
    Conversations,
    Collections,
    Backends,
}

impl Keyspace {
    pub const ALL: [Keyspace; 8] = [
        Keyspace::Users,
        Keyspace::Courses,
        Keyspace::Keys,
        Keyspace::Budgets,
        Keyspace::Ledger,
        Keyspace::Conversations,
        Keyspace::Collections,
        Keyspace::Backends,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Keyspace::Users => "users",
            Keyspace::Courses => "courses",
            Keyspace::Keys => "keys",
            Keyspace::Budgets => "budgets",
            Keyspace::Ledger => "ledger",
            Keyspace::Conversations => "conversations",
            Keyspace::Collections => "collections",
            Keyspace::Backends => "backends",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// A stored value: canonical JSON bytes plus the version that wrote them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub version: u64,
    pub body: Arc<[u8]>,
}

/// Encodes a value as canonical JSON: object keys sorted, no insignificant
/// whitespace.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    // `serde_json::Value` keeps object keys in a BTreeMap, so going through it
    // sorts every nested object.
    let value = serde_json::to_value(value)?;
    Ok(serde_json::to_vec(&value)?)
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    /// fsync the log after every write.
    pub sync: bool,
    /// Rewrite the snapshot and truncate the log after this many frames.
    pub snapshot_every: u64,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            sync: true,
            snapshot_every: 10_000,
        }
    }
}

#[derive(Clone)]
pub struct Store {
    inner: Arc<Inner>,
}

struct Inner {
    dir: Option<PathBuf>,
    opts: StoreOptions,
    spaces: Vec<Space>,
}

struct Space {
    keyspace: Keyspace,
    records: RwLock<BTreeMap<String, Record>>,
    writer: Mutex<Writer>,
}

struct Writer {
    log: Option<File>,
    frames_since_snapshot: u64,
    next_seq: u64,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("dir", &self.inner.dir).finish()
    }
}

impl Store {
    /// A purely in-memory store. Nothing survives the process.
    pub fn in_memory() -> Self {
        let spaces = Keyspace::ALL
            .iter()
            .map(|&keyspace| Space {
                keyspace,
                records: RwLock::new(BTreeMap::new()),
                writer: Mutex::new(Writer {
                    log: None,
                    frames_since_snapshot: 0,
                    next_seq: 1,
                }),
            })
            .collect();
        Self {
            inner: Arc::new(Inner {
                dir: None,
                opts: StoreOptions::default(),
                spaces,
            }),
        }
    }

    pub fn open(dir: impl AsRef<Path>, opts: StoreOptions) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut spaces = Vec::with_capacity(Keyspace::ALL.len());
        for keyspace in Keyspace::ALL {
            let mut records = BTreeMap::new();
            load_snapshot(&snapshot_path(&dir, keyspace), &mut records)?;
            let log_path = log_path(&dir, keyspace);
            let frames = replay_log(&log_path, &mut records)?;
            let log = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log_path)?;
            let next_seq = if keyspace == Keyspace::Ledger {
                records
                    .keys()
                    .next_back()
                    .and_then(|k| k.parse::<u64>().ok())
                    .map_or(1, |s| s + 1)
            } else {
                1
            };
            debug!(keyspace = keyspace.as_str(), records = records.len(), frames, "keyspace recovered");
            spaces.push(Space {
                keyspace,
                records: RwLock::new(records),
                writer: Mutex::new(Writer {
                    log: Some(log),
                    frames_since_snapshot: frames,
                    next_seq,
                }),
            });
        }
        Ok(Self {
            inner: Arc::new(Inner { dir: Some(dir), opts, spaces }),
        })
    }

    fn space(&self, keyspace: Keyspace) -> &Space {
        &self.inner.spaces[keyspace.index()]
    }

    /// Writes `body` under `key` if the current version equals
    /// `expected_version` (0 for "must not exist"). Returns the new version.
    pub fn put_cas(
        &self,
        keyspace: Keyspace,
        key: &str,
        expected_version: u64,
        body: Vec<u8>,
    ) -> Result<u64> {
        if keyspace == Keyspace::Ledger {
            return Err(Error::validation("ledger records are append-only"));
        }
        let space = self.space(keyspace);
        let mut writer = space.writer.lock();
        let found = space.records.read().get(key).map_or(0, |r| r.version);
        if found != expected_version {
            return Err(Error::VersionConflict {
                keyspace: keyspace.as_str(),
                key: key.to_string(),
                expected: expected_version,
                found,
            });
        }
        let version = found + 1;
        self.commit(space, &mut writer, key, version, body)?;
        Ok(version)
    }

    /// Appends an immutable ledger record and returns its sequence number.
    pub fn append(&self, keyspace: Keyspace, body: Vec<u8>) -> Result<u64> {
        if keyspace != Keyspace::Ledger {
            return Err(Error::validation("append is only valid on the ledger"));
        }
        let space = self.space(keyspace);
        let mut writer = space.writer.lock();
        let seq = writer.next_seq;
        self.commit(space, &mut writer, &ledger_key(seq), 1, body)?;
        writer.next_seq += 1;
        Ok(seq)
    }

    fn commit(
        &self,
        space: &Space,
        writer: &mut Writer,
        key: &str,
        version: u64,
        body: Vec<u8>,
    ) -> Result<()> {
        if let Some(log) = writer.log.as_mut() {
            let frame = encode_frame(key, version, &body);
            log.write_all(&frame)?;
            if self.inner.opts.sync {
                log.sync_data()?;
            }
            writer.frames_since_snapshot += 1;
        }
        space.records.write().insert(
            key.to_string(),
            Record {
                version,
                body: body.into(),
            },
        );
        if writer.log.is_some() && writer.frames_since_snapshot >= self.inner.opts.snapshot_every {
            self.snapshot_space(space, writer)?;
        }
        Ok(())
    }

    pub fn get(&self, keyspace: Keyspace, key: &str) -> Result<Record> {
        self.try_get(keyspace, key)
            .ok_or_else(|| Error::not_found(format!("{}/{}", keyspace.as_str(), key)))
    }

    pub fn try_get(&self, keyspace: Keyspace, key: &str) -> Option<Record> {
        self.space(keyspace).records.read().get(key).cloned()
    }

    pub fn list_prefix(&self, keyspace: Keyspace, prefix: &str) -> Vec<String> {
        self.space(keyspace)
            .records
            .read()
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// All records of a keyspace in key order (sequence order for the ledger).
    pub fn scan(&self, keyspace: Keyspace) -> Vec<(String, Record)> {
        self.scan_prefix(keyspace, "")
    }

    pub fn scan_prefix(&self, keyspace: Keyspace, prefix: &str) -> Vec<(String, Record)> {
        self.space(keyspace)
            .records
            .read()
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, r)| (k.clone(), r.clone()))
            .collect()
    }

    pub fn get_json<T: DeserializeOwned>(&self, keyspace: Keyspace, key: &str) -> Result<(u64, T)> {
        let record = self.get(keyspace, key)?;
        Ok((record.version, serde_json::from_slice(&record.body)?))
    }

    pub fn try_get_json<T: DeserializeOwned>(
        &self,
        keyspace: Keyspace,
        key: &str,
    ) -> Result<Option<(u64, T)>> {
        match self.try_get(keyspace, key) {
            Some(record) => Ok(Some((record.version, serde_json::from_slice(&record.body)?))),
            None => Ok(None),
        }
    }

    pub fn put_json<T: Serialize>(
        &self,
        keyspace: Keyspace,
        key: &str,
        expected_version: u64,
        value: &T,
    ) -> Result<u64> {
        self.put_cas(keyspace, key, expected_version, canonical_json(value)?)
    }

    /// Read-modify-write loop over `put_cas`. `f` sees the current value (if
    /// any) and returns the replacement; it may run more than once under
    /// contention and must therefore be free of side effects.
    pub fn modify_json<T, F>(&self, keyspace: Keyspace, key: &str, mut f: F) -> Result<(u64, T)>
    where
        T: Serialize + DeserializeOwned,
        F: FnMut(Option<T>) -> Result<T>,
    {
        loop {
            let current = self.try_get_json::<T>(keyspace, key)?;
            let expected = current.as_ref().map_or(0, |(v, _)| *v);
            let next = f(current.map(|(_, t)| t))?;
            match self.put_json(keyspace, key, expected, &next) {
                Ok(version) => return Ok((version, next)),
                Err(Error::VersionConflict { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }

    /// Snapshots every keyspace and truncates the logs. No-op in memory.
    pub fn snapshot(&self) -> Result<()> {
        for space in &self.inner.spaces {
            let mut writer = space.writer.lock();
            if writer.log.is_some() {
                self.snapshot_space(space, &mut writer)?;
            }
        }
        Ok(())
    }

    fn snapshot_space(&self, space: &Space, writer: &mut Writer) -> Result<()> {
        let Some(dir) = self.inner.dir.as_ref() else {
            return Ok(());
        };
        let path = snapshot_path(dir, space.keyspace);
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut out = BufWriter::new(File::create(&tmp)?);
            for (key, record) in space.records.read().iter() {
                out.write_all(b"{\"body\":")?;
                out.write_all(&record.body)?;
                out.write_all(b",\"key\":")?;
                serde_json::to_writer(&mut out, key)?;
                write!(out, ",\"version\":{}}}\n", record.version)?;
            }
            out.flush()?;
            out.get_ref().sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        if let Some(log) = writer.log.as_mut() {
            log.set_len(0)?;
            log.sync_all()?;
        }
        writer.frames_since_snapshot = 0;
        debug!(keyspace = space.keyspace.as_str(), "snapshot written");
        Ok(())
    }
}

fn ledger_key(seq: u64) -> String {
    format!("{seq:020}")
}

fn log_path(dir: &Path, keyspace: Keyspace) -> PathBuf {
    dir.join(format!("{}.log", keyspace.as_str()))
}

fn snapshot_path(dir: &Path, keyspace: Keyspace) -> PathBuf {
    dir.join(format!("{}.snapshot.jsonl", keyspace.as_str()))
}

fn encode_frame(key: &str, version: u64, body: &[u8]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(12 + key.len() + body.len());
    payload.extend_from_slice(&version.to_le_bytes());
    payload.extend_from_slice(&(key.len() as u32).to_le_bytes());
    payload.extend_from_slice(key.as_bytes());
    payload.extend_from_slice(body);
    let mut frame = Vec::with_capacity(8 + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    frame.extend_from_slice(&payload);
    frame
}

fn decode_payload(payload: &[u8]) -> Option<(String, u64, &[u8])> {
    let version = u64::from_le_bytes(payload.get(0..8)?.try_into().ok()?);
    let key_len = u32::from_le_bytes(payload.get(8..12)?.try_into().ok()?) as usize;
    let key = std::str::from_utf8(payload.get(12..12 + key_len)?).ok()?;
    Some((key.to_string(), version, &payload[12 + key_len..]))
}

#[derive(Deserialize)]
struct SnapshotLine<'a> {
    #[serde(borrow)]
    body: &'a RawValue,
    key: String,
    version: u64,
}

fn load_snapshot(path: &Path, records: &mut BTreeMap<String, Record>) -> Result<()> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parsed: SnapshotLine<'_> = serde_json::from_str(&line)
            .map_err(|e| Error::Corrupt(format!("{} line {}: {e}", path.display(), n + 1)))?;
        records.insert(
            parsed.key,
            Record {
                version: parsed.version,
                body: parsed.body.get().as_bytes().into(),
            },
        );
    }
    Ok(())
}

/// Replays complete frames into `records`, truncating the file after the last
/// good frame. Returns the number of frames applied.
fn replay_log(path: &Path, records: &mut BTreeMap<String, Record>) -> Result<u64> {
    let mut file = match OpenOptions::new().read(true).write(true).open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(e.into()),
    };
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut offset = 0usize;
    let mut frames = 0u64;
    while offset + 8 <= bytes.len() {
        let len = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[offset + 4..offset + 8].try_into().unwrap());
        let Some(payload) = bytes.get(offset + 8..offset + 8 + len) else {
            break;
        };
        if crc32fast::hash(payload) != crc {
            break;
        }
        let Some((key, version, body)) = decode_payload(payload) else {
            break;
        };
        let newer = records.get(&key).map_or(true, |r| r.version < version);
        if newer {
            records.insert(
                key,
                Record {
                    version,
                    body: body.into(),
                },
            );
        }
        offset += 8 + len;
        frames += 1;
    }
    if offset < bytes.len() {
        warn!(
            path = %path.display(),
            discarded = bytes.len() - offset,
            "discarding torn log tail"
        );
        file.set_len(offset as u64)?;
        file.seek(SeekFrom::End(0))?;
        file.sync_all()?;
    }
    Ok(frames)
}
