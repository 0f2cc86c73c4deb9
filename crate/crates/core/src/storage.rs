//! Mutable and write-once (WORM) object stores.
//!
//! Both stores are keyed by `<csp>/<log_id>` and share one type; the
//! [`StoreKind`] decides whether `put` upserts or creates-only and whether
//! `delete` is gated by the retention deadline.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use chrono::Duration;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreKind {
    Mutable,
    Immutable,
}

impl StoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StoreKind::Mutable => "mutable",
            StoreKind::Immutable => "immutable",
        }
    }
}

impl fmt::Display for StoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StorageError {
    #[error("object {0:?} already exists in the write-once store")]
    WriteOnceViolation(String),
    #[error("object {key:?} is retention-locked until {until}")]
    RetentionLocked { key: String, until: Instant },
    #[error("object {0:?} not found")]
    NotFound(String),
    #[error("{0} store unavailable")]
    StorageUnavailable(StoreKind),
    #[error("object key must be non-empty")]
    EmptyKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    #[serde(with = "days")]
    pub period: Duration,
}

impl RetentionPolicy {
    /// Panics if `days` is not positive.
    pub fn days(days: i64) -> Self {
        assert!(days > 0, "retention period must be positive");
        Self {
            period: Duration::days(days),
        }
    }

    pub fn period_days(&self) -> i64 {
        self.period.num_days()
    }
}

impl Default for RetentionPolicy {
    fn default() -> Self {
        Self::days(365)
    }
}

mod days {
    use chrono::Duration;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(d.num_days())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::days(i64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredObject {
    pub key: String,
    pub payload: Vec<u8>,
    pub stored_at: Instant,
    pub retention_until: Option<Instant>,
    pub kind: StoreKind,
}

/// Result of an atomic create-if-absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PutOutcome {
    Created(StoredObject),
    AlreadyExists(StoredObject),
}

/// An in-memory object store. Safe for concurrent readers and writers.
#[derive(Debug)]
pub struct ObjectStore {
    kind: StoreKind,
    retention: RetentionPolicy,
    objects: RwLock<BTreeMap<String, StoredObject>>,
    available: AtomicBool,
}

impl ObjectStore {
    pub fn mutable() -> Self {
        Self::new(StoreKind::Mutable, RetentionPolicy::default())
    }

    pub fn immutable(retention: RetentionPolicy) -> Self {
        Self::new(StoreKind::Immutable, retention)
    }

    pub fn new(kind: StoreKind, retention: RetentionPolicy) -> Self {
        Self {
            kind,
            retention,
            objects: RwLock::new(BTreeMap::new()),
            available: AtomicBool::new(true),
        }
    }

    pub fn kind(&self) -> StoreKind {
        self.kind
    }

    /// Retention applied to new immutable objects; `None` for the mutable store.
    pub fn retention(&self) -> Option<RetentionPolicy> {
        match self.kind {
            StoreKind::Immutable => Some(self.retention),
            StoreKind::Mutable => None,
        }
    }

    /// Fault injection hook.
    pub fn set_available(&self, up: bool) {
        self.available.store(up, Ordering::SeqCst);
    }

    pub fn is_available(&self) -> bool {
        self.available.load(Ordering::SeqCst)
    }

    fn check(&self) -> Result<(), StorageError> {
        if self.is_available() {
            Ok(())
        } else {
            Err(StorageError::StorageUnavailable(self.kind))
        }
    }

    fn make_object(&self, key: &str, payload: Vec<u8>, now: Instant) -> StoredObject {
        StoredObject {
            key: key.to_string(),
            payload,
            stored_at: now,
            retention_until: self.retention().map(|r| now + r.period),
            kind: self.kind,
        }
    }

    /// Mutable: upsert. Immutable: create only.
    pub fn put(&self, key: &str, payload: Vec<u8>, now: Instant) -> Result<StoredObject, StorageError> {
        self.check()?;
        if key.is_empty() {
            return Err(StorageError::EmptyKey);
        }
        let object = self.make_object(key, payload, now);
        let mut objects = self.objects.write();
        match self.kind {
            StoreKind::Mutable => {
                objects.insert(key.to_string(), object.clone());
            }
            StoreKind::Immutable => {
                if objects.contains_key(key) {
                    return Err(StorageError::WriteOnceViolation(key.to_string()));
                }
                objects.insert(key.to_string(), object.clone());
            }
        }
        Ok(object)
    }

    /// Atomic check-and-create for either kind. Never overwrites.
    pub fn put_if_absent(&self, key: &str, payload: Vec<u8>, now: Instant) -> Result<PutOutcome, StorageError> {
        self.check()?;
        if key.is_empty() {
            return Err(StorageError::EmptyKey);
        }
        let mut objects = self.objects.write();
        if let Some(existing) = objects.get(key) {
            return Ok(PutOutcome::AlreadyExists(existing.clone()));
        }
        let object = self.make_object(key, payload, now);
        objects.insert(key.to_string(), object.clone());
        Ok(PutOutcome::Created(object))
    }

    pub fn get(&self, key: &str) -> Result<StoredObject, StorageError> {
        self.check()?;
        self.objects
            .read()
            .get(key)
            .cloned()
            .ok_or_else(|| StorageError::NotFound(key.to_string()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.objects.read().contains_key(key)
    }

    pub fn delete(&self, key: &str, now: Instant) -> Result<(), StorageError> {
        self.check()?;
        let mut objects = self.objects.write();
        let existing = objects
            .get(key)
            .ok_or_else(|| StorageError::NotFound(key.to_string()))?;
        if let Some(until) = existing.retention_until {
            if now < until {
                return Err(StorageError::RetentionLocked {
                    key: key.to_string(),
                    until,
                });
            }
        }
        objects.remove(key);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.objects.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> Vec<String> {
        self.objects.read().keys().cloned().collect()
    }

    /// Objects whose key starts with `prefix`, in key order (e.g. `"AWS/"`).
    pub fn list_prefix(&self, prefix: &str) -> Vec<StoredObject> {
        self.objects
            .read()
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn snapshot(&self) -> Vec<StoredObject> {
        self.objects.read().values().cloned().collect()
    }

    /// Writes one file per object under `<root>/<kind>/<key>.json`.
    pub fn persist_to_dir(&self, root: &Path) -> io::Result<usize> {
        let objects = self.objects.read();
        for object in objects.values() {
            let path = object_path(root, self.kind, &object.key);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, &object.payload)?;
        }
        Ok(objects.len())
    }
}

/// `<root>/<kind>/<csp>/<log_id>.json` for a `<csp>/<log_id>` key.
pub fn object_path(root: &Path, kind: StoreKind, key: &str) -> PathBuf {
    let mut path = root.join(kind.as_str());
    for part in key.split('/') {
        path.push(part);
    }
    path.set_extension("json");
    path
}

/// Reads back every object file under `<root>/<kind>/`. Returns `(key, bytes)`
/// in key order.
pub fn load_dir(root: &Path, kind: StoreKind) -> io::Result<Vec<(String, Vec<u8>)>> {
    let base = root.join(kind.as_str());
    if !base.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(&base).sort_by_file_name() {
        let entry = entry.map_err(io::Error::other)?;
        if !entry.file_type().is_file() || entry.path().extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(&base)
            .expect("walk stays under base")
            .with_extension("");
        let key = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        out.push((key, fs::read(entry.path())?));
    }
    Ok(out)
}
