//! Archiver: final stamp, then routing by `data_type` into storage.

use std::sync::Arc;

use thiserror::Error;

use crate::envelope::{DataType, EnvelopeError, StageName, TelemetryEnvelope};
use crate::storage::{ObjectStore, PutOutcome, StorageError, StoreKind, StoredObject};
use crate::time::Instant;

#[derive(Debug, Error, PartialEq)]
pub enum ArchiveError {
    /// Transient; the caller should leave the message unacknowledged.
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Invalid(#[from] EnvelopeError),
}

impl ArchiveError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Storage(StorageError::StorageUnavailable(_)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archived {
    pub object: StoredObject,
    /// `false` when the key was already present (redelivery).
    pub created: bool,
}

/// Metrics are mutable; logs and traces go to the WORM store.
pub fn destination(data_type: DataType) -> StoreKind {
    match data_type {
        DataType::Metrics => StoreKind::Mutable,
        DataType::Logs | DataType::Traces => StoreKind::Immutable,
    }
}

#[derive(Debug, Clone)]
pub struct Archiver {
    mutable: Arc<ObjectStore>,
    immutable: Arc<ObjectStore>,
}

impl Archiver {
    pub fn new(mutable: Arc<ObjectStore>, immutable: Arc<ObjectStore>) -> Self {
        assert_eq!(mutable.kind(), StoreKind::Mutable);
        assert_eq!(immutable.kind(), StoreKind::Immutable);
        Self { mutable, immutable }
    }

    pub fn store(&self, kind: StoreKind) -> &Arc<ObjectStore> {
        match kind {
            StoreKind::Mutable => &self.mutable,
            StoreKind::Immutable => &self.immutable,
        }
    }

    /// Stamps and stores `env` under its canonical key. A second delivery of
    /// the same `log_id` leaves the first object untouched and still succeeds.
    pub fn archive(&self, env: &TelemetryEnvelope, now: Instant) -> Result<Archived, ArchiveError> {
        let store = self.store(destination(env.data_type));
        let key = env.canonical_key();
        if !store.is_available() {
            return Err(StorageError::StorageUnavailable(store.kind()).into());
        }
        if let Ok(object) = store.get(&key) {
            return Ok(Archived { object, created: false });
        }
        let stamped = env.stamp_stage(StageName::ims_archiver(), now)?;
        Ok(match store.put_if_absent(&key, stamped.to_canonical_bytes(), now)? {
            PutOutcome::Created(object) => Archived { object, created: true },
            PutOutcome::AlreadyExists(object) => Archived { object, created: false },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::RetentionPolicy;
    use crate::time::parse_instant;

    fn sample(raw: &str) -> TelemetryEnvelope {
        let env = TelemetryEnvelope::parse_and_validate(raw.as_bytes()).unwrap();
        let mut ts = crate::envelope::StageTimestamps::new();
        for (s, at) in env
            .timestamps
            .iter()
            .filter(|(s, _)| s.as_str() != StageName::IMS_ARCHIVER)
        {
            ts.push(s.clone(), *at).unwrap();
        }
        TelemetryEnvelope { timestamps: ts, ..env }
    }

    fn archiver() -> Archiver {
        Archiver::new(
            Arc::new(ObjectStore::mutable()),
            Arc::new(ObjectStore::immutable(RetentionPolicy::default())),
        )
    }

    fn at(s: &str) -> Instant {
        parse_instant(s).unwrap()
    }

    #[test]
    fn aws_metrics_to_mutable_store() {
        let a = archiver();
        let golden = include_str!("../../tests/fixtures/aws_metrics.json");
        let env = sample(golden);
        let out = a.archive(&env, at("2024-09-06T15:13:46.444789+00:00")).unwrap();
        assert!(out.created);
        assert_eq!(out.object.kind, StoreKind::Mutable);
        assert_eq!(out.object.key, "AWS/a2bc98fb-d4f2-44b0-a093-3f766fd1016e");
        assert_eq!(out.object.retention_until, None);
        assert_eq!(String::from_utf8(out.object.payload).unwrap(), golden.trim_end());
        assert!(a.store(StoreKind::Immutable).is_empty());
    }

    #[test]
    fn ibm_logs_to_worm_store() {
        let a = archiver();
        let env = sample(include_str!("../../tests/fixtures/ibm_logs.json"));
        let now = env.timestamps.last().unwrap().1;
        let out = a.archive(&env, now).unwrap();
        assert_eq!(out.object.kind, StoreKind::Immutable);
        assert_eq!(
            out.object.retention_until,
            Some(now + RetentionPolicy::default().period)
        );
        assert!(a.store(StoreKind::Mutable).is_empty());
    }

    #[test]
    fn redelivery_is_idempotent() {
        let a = archiver();
        let env = sample(include_str!("../../tests/fixtures/ibm_logs.json"));
        let now = env.timestamps.last().unwrap().1;
        let first = a.archive(&env, now).unwrap();
        let later = now + chrono::Duration::seconds(3);
        let second = a.archive(&env, later).unwrap();
        assert!(!second.created);
        assert_eq!(second.object, first.object);
        assert_eq!(a.store(StoreKind::Immutable).len(), 1);
    }

    #[test]
    fn outage_is_retryable() {
        let a = archiver();
        a.store(StoreKind::Mutable).set_available(false);
        let env = sample(include_str!("../../tests/fixtures/aws_metrics.json"));
        let err = a.archive(&env, at("2024-09-06T15:13:47+00:00")).unwrap_err();
        assert!(err.is_retryable());
        a.store(StoreKind::Mutable).set_available(true);
        assert!(a.archive(&env, at("2024-09-06T15:13:47+00:00")).unwrap().created);
    }

    #[test]
    fn traces_are_immutable() {
        assert_eq!(destination(DataType::Traces), StoreKind::Immutable);
        assert_eq!(destination(DataType::Metrics), StoreKind::Mutable);
    }
}
