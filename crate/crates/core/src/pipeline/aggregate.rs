//! Groups envelopes into fixed-size batches per `(csp, data_type)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope::{Csp, DataType, TelemetryEnvelope};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("aggregation window must hold at least one envelope")]
pub struct InvalidWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct AggregationWindow(usize);

impl AggregationWindow {
    pub fn new(size: usize) -> Result<Self, InvalidWindow> {
        if size == 0 {
            Err(InvalidWindow)
        } else {
            Ok(Self(size))
        }
    }

    pub fn size(self) -> usize {
        self.0
    }
}

impl TryFrom<usize> for AggregationWindow {
    type Error = InvalidWindow;

    fn try_from(size: usize) -> Result<Self, InvalidWindow> {
        Self::new(size)
    }
}

impl From<AggregationWindow> for usize {
    fn from(w: AggregationWindow) -> usize {
        w.0
    }
}

impl Default for AggregationWindow {
    fn default() -> Self {
        Self(100)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    pub csp: Csp,
    pub data_type: DataType,
}

impl GroupKey {
    pub fn of(env: &TelemetryEnvelope) -> Self {
        Self {
            csp: env.csp.clone(),
            data_type: env.data_type,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub key: GroupKey,
    pub envelopes: Vec<TelemetryEnvelope>,
    pub sealed: bool,
    /// Flushed at close with fewer than a window's worth of members.
    pub partial: bool,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.envelopes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envelopes.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Aggregator {
    window: AggregationWindow,
    open: BTreeMap<GroupKey, Vec<TelemetryEnvelope>>,
}

impl Aggregator {
    pub fn new(window: AggregationWindow) -> Self {
        Self {
            window,
            open: BTreeMap::new(),
        }
    }

    pub fn window(&self) -> AggregationWindow {
        self.window
    }

    /// Adds `env`; returns the sealed batch when its group fills up.
    pub fn push(&mut self, env: TelemetryEnvelope) -> Option<Batch> {
        let key = GroupKey::of(&env);
        let members = self.open.entry(key.clone()).or_default();
        members.push(env);
        if members.len() < self.window.size() {
            return None;
        }
        let envelopes = self.open.remove(&key).unwrap_or_default();
        Some(Batch {
            key,
            envelopes,
            sealed: true,
            partial: false,
        })
    }

    /// Envelopes waiting in unsealed batches.
    pub fn pending(&self) -> usize {
        self.open.values().map(Vec::len).sum()
    }

    /// Flushes every non-empty open group, ordered by group key.
    pub fn close(self) -> Vec<Batch> {
        self.open
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(key, envelopes)| Batch {
                key,
                envelopes,
                sealed: true,
                partial: true,
            })
            .collect()
    }
}

/// Batches a finite stream: full batches in sealing order, then partials.
pub fn aggregate(window: AggregationWindow, envelopes: impl IntoIterator<Item = TelemetryEnvelope>) -> Vec<Batch> {
    let mut agg = Aggregator::new(window);
    let mut out: Vec<Batch> = envelopes.into_iter().filter_map(|e| agg.push(e)).collect();
    out.extend(agg.close());
    out
}
