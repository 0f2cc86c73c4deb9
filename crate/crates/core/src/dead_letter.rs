//! Diagnostic sink for documents that cannot be processed.

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::time::{format_instant, Instant};

pub const EXCERPT_BYTES: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadLetterRecord {
    pub reason: String,
    pub received_at: String,
    pub raw_excerpt: String,
}

#[derive(Debug, Default)]
pub struct DeadLetterSink {
    records: Mutex<Vec<DeadLetterRecord>>,
}

impl DeadLetterSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, reason: impl Into<String>, raw: &[u8], now: Instant) {
        let cut = raw.len().min(EXCERPT_BYTES);
        self.records.lock().push(DeadLetterRecord {
            reason: reason.into(),
            received_at: format_instant(&now),
            raw_excerpt: String::from_utf8_lossy(&raw[..cut]).into_owned(),
        });
    }

    pub fn len(&self) -> usize {
        self.records.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<DeadLetterRecord> {
        self.records.lock().clone()
    }

    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.records
            .lock()
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}
