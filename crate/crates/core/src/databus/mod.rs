//! Fault-tolerant data bus.
//!
//! A topic-addressed publish/subscribe bus with two channels. Publishing
//! follows the heartbeat-driven route (primary while healthy, auxiliary once
//! failed over) and falls back to the other channel on a transport failure.
//! Delivery is at-least-once: a message stays queued for a subscription until
//! that subscription acknowledges it. Consumers deduplicate by `message_id`.
//!
//! Ordering is guaranteed per (publisher, topic). Each subscription tracks the
//! next expected sequence per publisher and never hands out a message ahead
//! of an earlier one, even when the earlier one is parked on a channel that
//! is down. Parked messages move to the surviving channel once the heartbeat
//! monitor declares the primary failed (or, for the auxiliary, as soon as it is
//! found down while the primary is up).
//!
//! Envelopes whose serialized size exceeds the configured threshold are
//! spilled to a mutable object store and the message carries a
//! [`PayloadRef`] instead.

mod dedup;
mod health;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use chrono::Duration;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::envelope::{EnvelopeError, TelemetryEnvelope};
use crate::ids::IdGenerator;
use crate::storage::{ObjectStore, StorageError, StoreKind};
use crate::time::Instant;

pub use dedup::Deduplicator;
pub use health::{monitor_heartbeat, BusHealth, BusState, HeartbeatConfig};

pub const TOPIC_INGRESS: &str = "ingress";
pub const TOPIC_CONVERTER: &str = "converter";
pub const TOPIC_ARCHIVER: &str = "archiver";
pub const TOPIC_ALERTS: &str = "alerts";
pub const TOPIC_INCIDENTS: &str = "incidents";

pub const STANDARD_TOPICS: [&str; 5] = [
    TOPIC_INGRESS,
    TOPIC_CONVERTER,
    TOPIC_ARCHIVER,
    TOPIC_ALERTS,
    TOPIC_INCIDENTS,
];

pub const DEFAULT_INLINE_THRESHOLD: usize = 256 * 1024;

#[derive(Debug, Error)]
pub enum BusError {
    #[error("both primary and auxiliary channels are down")]
    AllChannelsDown,
    #[error("unknown subscription {0}")]
    UnknownSubscription(usize),
    #[error("spilled payload unavailable: {0}")]
    PayloadUnavailable(#[from] StorageError),
    #[error("spilled payload corrupt: {0}")]
    PayloadCorrupt(#[from] EnvelopeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Primary,
    Auxiliary,
}

impl Channel {
    fn idx(self) -> usize {
        match self {
            Channel::Primary => 0,
            Channel::Auxiliary => 1,
        }
    }

    fn other(self) -> Channel {
        match self {
            Channel::Primary => Channel::Auxiliary,
            Channel::Auxiliary => Channel::Primary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PublisherId(pub String);

impl From<&str> for PublisherId {
    fn from(s: &str) -> Self {
        PublisherId(s.to_string())
    }
}

impl fmt::Display for PublisherId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubscriptionId(usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadRef {
    pub store_kind: StoreKind,
    pub key: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MessageBody {
    Inline(TelemetryEnvelope),
    Ref(PayloadRef),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusMessage {
    pub message_id: Uuid,
    pub publisher: PublisherId,
    pub topic: String,
    pub sequence: u64,
    pub body: MessageBody,
    pub published_at: Instant,
}

/// A message handed to a subscriber, awaiting `ack` or `nack`.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub message: BusMessage,
    pub channel: Channel,
    pub redelivery: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FailoverEvent {
    pub bus: String,
    pub at: String,
    pub from: BusState,
    pub to: BusState,
}

#[derive(Debug, Clone, Copy)]
pub struct BusConfig {
    pub inline_threshold: usize,
    pub heartbeat: HeartbeatConfig,
}

impl Default for BusConfig {
    fn default() -> Self {
        Self {
            inline_threshold: DEFAULT_INLINE_THRESHOLD,
            heartbeat: HeartbeatConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
struct Queued {
    message: BusMessage,
    redelivery: bool,
}

#[derive(Debug)]
struct Subscription {
    subscriber: String,
    topic: String,
    /// Per channel, keyed by bus-wide publish index.
    queues: [BTreeMap<u64, Queued>; 2],
    inflight: HashMap<Uuid, (u64, BusMessage)>,
    next_expected: HashMap<PublisherId, u64>,
}

impl Subscription {
    fn is_idle(&self) -> bool {
        self.queues.iter().all(BTreeMap::is_empty) && self.inflight.is_empty()
    }

    fn expected(&self, publisher: &PublisherId) -> u64 {
        self.next_expected.get(publisher).copied().unwrap_or(1)
    }

    fn move_queue(&mut self, from: Channel, to: Channel) {
        let moved = std::mem::take(&mut self.queues[from.idx()]);
        self.queues[to.idx()].extend(moved);
    }

    /// First message, in publish order over the live channels, that does not
    /// jump ahead of an undelivered predecessor from the same publisher.
    fn next_deliverable(&self, up: [bool; 2]) -> Option<(Channel, u64)> {
        let mut best: Option<(Channel, u64)> = None;
        for channel in [Channel::Primary, Channel::Auxiliary] {
            if !up[channel.idx()] {
                continue;
            }
            let found = self.queues[channel.idx()]
                .iter()
                .find(|(_, q)| q.message.sequence <= self.expected(&q.message.publisher));
            if let Some((&idx, _)) = found {
                if best.is_none_or(|(_, b)| idx < b) {
                    best = Some((channel, idx));
                }
            }
        }
        best
    }
}

#[derive(Debug)]
struct BusInner {
    health: BusHealth,
    up: [bool; 2],
    subscriptions: Vec<Subscription>,
    last_sequence: HashMap<(PublisherId, String), u64>,
    publish_index: u64,
    pending_acks: HashMap<Uuid, (usize, Option<String>)>,
    ids: IdGenerator,
    failovers: Vec<FailoverEvent>,
    published: u64,
    delivered: u64,
    redelivered: u64,
}

impl BusInner {
    fn route(&self) -> Channel {
        if self.health.state == BusState::Primary {
            Channel::Primary
        } else {
            Channel::Auxiliary
        }
    }

    fn reroute(&mut self) {
        let [primary_up, aux_up] = self.up;
        let failed = self.health.state != BusState::Primary;
        for sub in &mut self.subscriptions {
            if failed && !primary_up && aux_up {
                sub.move_queue(Channel::Primary, Channel::Auxiliary);
            }
            if !aux_up && primary_up {
                sub.move_queue(Channel::Auxiliary, Channel::Primary);
            }
        }
    }

    fn settle(&mut self, message_id: Uuid, spill: &ObjectStore, now: Instant) {
        if let Some(entry) = self.pending_acks.get_mut(&message_id) {
            entry.0 = entry.0.saturating_sub(1);
            if entry.0 == 0 {
                let (_, key) = self.pending_acks.remove(&message_id).expect("present");
                if let Some(key) = key {
                    let _ = spill.delete(&key, now);
                }
            }
        }
    }
}

/// The two-channel bus. Cheap to share behind an `Arc`; all state sits behind
/// one mutex so health reads are consistent snapshots.
#[derive(Debug)]
pub struct DataBus {
    name: String,
    config: BusConfig,
    spill: Arc<ObjectStore>,
    inner: Mutex<BusInner>,
}

impl DataBus {
    pub fn new(name: impl Into<String>, config: BusConfig, seed: u64, now: Instant) -> Self {
        Self::with_spill_store(name, config, seed, now, Arc::new(ObjectStore::mutable()))
    }

    pub fn with_spill_store(
        name: impl Into<String>,
        config: BusConfig,
        seed: u64,
        now: Instant,
        spill: Arc<ObjectStore>,
    ) -> Self {
        Self {
            name: name.into(),
            config,
            spill,
            inner: Mutex::new(BusInner {
                health: BusHealth::healthy(now),
                up: [true, true],
                subscriptions: Vec::new(),
                last_sequence: HashMap::new(),
                publish_index: 0,
                pending_acks: HashMap::new(),
                ids: IdGenerator::seeded(seed),
                failovers: Vec::new(),
                published: 0,
                delivered: 0,
                redelivered: 0,
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn config(&self) -> &BusConfig {
        &self.config
    }

    pub fn spill_store(&self) -> &Arc<ObjectStore> {
        &self.spill
    }

    /// Registers a subscription. Only messages published afterwards are seen.
    pub fn subscribe(&self, subscriber: &str, topic: &str) -> SubscriptionId {
        let mut inner = self.inner.lock();
        let next_expected = inner
            .last_sequence
            .iter()
            .filter(|((_, t), _)| t == topic)
            .map(|((p, _), seq)| (p.clone(), seq + 1))
            .collect();
        inner.subscriptions.push(Subscription {
            subscriber: subscriber.to_string(),
            topic: topic.to_string(),
            queues: [BTreeMap::new(), BTreeMap::new()],
            inflight: HashMap::new(),
            next_expected,
        });
        SubscriptionId(inner.subscriptions.len() - 1)
    }

    pub fn topics(&self) -> Vec<String> {
        let inner = self.inner.lock();
        let mut topics: Vec<String> = inner.subscriptions.iter().map(|s| s.topic.clone()).collect();
        topics.sort();
        topics.dedup();
        topics
    }

    pub fn subscriber_of(&self, sub: SubscriptionId) -> Option<(String, String)> {
        let inner = self.inner.lock();
        inner
            .subscriptions
            .get(sub.0)
            .map(|s| (s.subscriber.clone(), s.topic.clone()))
    }

    pub fn publish(
        &self,
        publisher: &PublisherId,
        topic: &str,
        envelope: &TelemetryEnvelope,
        now: Instant,
    ) -> Result<BusMessage, BusError> {
        let mut inner = self.inner.lock();
        let routed = inner.route();
        let channel = if inner.up[routed.idx()] {
            routed
        } else if inner.up[routed.other().idx()] {
            routed.other()
        } else {
            return Err(BusError::AllChannelsDown);
        };

        let message_id = inner.ids.next_uuid();
        let bytes = envelope.to_canonical_bytes();
        let (body, spill_key) = if bytes.len() > self.config.inline_threshold {
            let key = format!("bus/{}/{}", self.name, message_id);
            let size = bytes.len();
            self.spill.put(&key, bytes, now)?;
            (
                MessageBody::Ref(PayloadRef {
                    store_kind: StoreKind::Mutable,
                    key: key.clone(),
                    size,
                }),
                Some(key),
            )
        } else {
            (MessageBody::Inline(envelope.clone()), None)
        };

        let seq_slot = inner
            .last_sequence
            .entry((publisher.clone(), topic.to_string()))
            .or_insert(0);
        *seq_slot += 1;
        let sequence = *seq_slot;
        inner.publish_index += 1;
        let index = inner.publish_index;

        let message = BusMessage {
            message_id,
            publisher: publisher.clone(),
            topic: topic.to_string(),
            sequence,
            body,
            published_at: now,
        };
        let mut receivers = 0;
        for sub in inner.subscriptions.iter_mut().filter(|s| s.topic == topic) {
            sub.queues[channel.idx()].insert(
                index,
                Queued {
                    message: message.clone(),
                    redelivery: false,
                },
            );
            receivers += 1;
        }
        if receivers > 0 {
            inner.pending_acks.insert(message_id, (receivers, spill_key));
        } else if let Some(key) = spill_key {
            let _ = self.spill.delete(&key, now);
        }
        inner.published += 1;
        Ok(message)
    }

    /// Hands out the next deliverable message for `sub`, if any.
    pub fn poll(&self, sub: SubscriptionId) -> Result<Option<Delivery>, BusError> {
        let mut inner = self.inner.lock();
        inner.reroute();
        let up = inner.up;
        let subscription = inner
            .subscriptions
            .get_mut(sub.0)
            .ok_or(BusError::UnknownSubscription(sub.0))?;
        let Some((channel, idx)) = subscription.next_deliverable(up) else {
            return Ok(None);
        };
        let queued = subscription.queues[channel.idx()]
            .remove(&idx)
            .expect("selected entry exists");
        let publisher = queued.message.publisher.clone();
        if queued.message.sequence == subscription.expected(&publisher) {
            subscription
                .next_expected
                .insert(publisher, queued.message.sequence + 1);
        }
        subscription
            .inflight
            .insert(queued.message.message_id, (idx, queued.message.clone()));
        inner.delivered += 1;
        if queued.redelivery {
            inner.redelivered += 1;
        }
        Ok(Some(Delivery {
            message: queued.message,
            channel,
            redelivery: queued.redelivery,
        }))
    }

    /// Iterator over everything currently deliverable. Messages are not acked.
    pub fn deliver(&self, sub: SubscriptionId) -> impl Iterator<Item = Delivery> + '_ {
        std::iter::from_fn(move || self.poll(sub).ok().flatten())
    }

    pub fn ack(&self, sub: SubscriptionId, message_id: Uuid, now: Instant) -> Result<bool, BusError> {
        let mut inner = self.inner.lock();
        let subscription = inner
            .subscriptions
            .get_mut(sub.0)
            .ok_or(BusError::UnknownSubscription(sub.0))?;
        if subscription.inflight.remove(&message_id).is_none() {
            return Ok(false);
        }
        inner.settle(message_id, &self.spill, now);
        Ok(true)
    }

    /// Returns an in-flight message to the queue for redelivery.
    pub fn nack(&self, sub: SubscriptionId, message_id: Uuid) -> Result<bool, BusError> {
        let mut inner = self.inner.lock();
        let routed = inner.route();
        let up = inner.up;
        let target = if up[routed.idx()] || !up[routed.other().idx()] {
            routed
        } else {
            routed.other()
        };
        let subscription = inner
            .subscriptions
            .get_mut(sub.0)
            .ok_or(BusError::UnknownSubscription(sub.0))?;
        let Some((idx, message)) = subscription.inflight.remove(&message_id) else {
            return Ok(false);
        };
        subscription.queues[target.idx()].insert(
            idx,
            Queued {
                message,
                redelivery: true,
            },
        );
        Ok(true)
    }

    /// Simulates a subscriber crash: every unacknowledged delivery is requeued.
    pub fn crash(&self, sub: SubscriptionId) -> Result<usize, BusError> {
        let ids: Vec<Uuid> = {
            let inner = self.inner.lock();
            let subscription = inner
                .subscriptions
                .get(sub.0)
                .ok_or(BusError::UnknownSubscription(sub.0))?;
            let mut ids: Vec<(u64, Uuid)> = subscription.inflight.iter().map(|(id, (idx, _))| (*idx, *id)).collect();
            ids.sort();
            ids.into_iter().map(|(_, id)| id).collect()
        };
        for id in &ids {
            self.nack(sub, *id)?;
        }
        Ok(ids.len())
    }

    /// Resolves a message body to its envelope, following a payload pointer.
    pub fn resolve(&self, message: &BusMessage) -> Result<TelemetryEnvelope, BusError> {
        match &message.body {
            MessageBody::Inline(env) => Ok(env.clone()),
            MessageBody::Ref(r) => {
                let object = self.spill.get(&r.key)?;
                Ok(TelemetryEnvelope::parse_and_validate(&object.payload)?)
            }
        }
    }

    /// Fault injection: take a channel up or down.
    pub fn set_channel_up(&self, channel: Channel, up: bool) {
        self.inner.lock().up[channel.idx()] = up;
    }

    pub fn channel_up(&self, channel: Channel) -> bool {
        self.inner.lock().up[channel.idx()]
    }

    /// One heartbeat period: the primary beats if it is up, the monitor runs,
    /// and parked messages are moved according to the new state. Returns the
    /// state transition, if any.
    pub fn tick(&self, now: Instant) -> Option<FailoverEvent> {
        let mut inner = self.inner.lock();
        let before = inner.health;
        let mut health = before;
        if inner.up[Channel::Primary.idx()] {
            health = health.record_beat(now);
        }
        let mid = health.state;
        health = health.monitor(&self.config.heartbeat, now);
        inner.health = health;
        inner.reroute();
        let mut event = None;
        for (from, to) in [(before.state, mid), (mid, health.state)] {
            if from != to {
                let e = FailoverEvent {
                    bus: self.name.clone(),
                    at: crate::time::format_instant(&now),
                    from,
                    to,
                };
                inner.failovers.push(e.clone());
                event = Some(e);
            }
        }
        event
    }

    pub fn health(&self) -> BusHealth {
        self.inner.lock().health
    }

    pub fn failover_events(&self) -> Vec<FailoverEvent> {
        self.inner.lock().failovers.clone()
    }

    pub fn is_idle(&self) -> bool {
        self.inner.lock().subscriptions.iter().all(Subscription::is_idle)
    }

    /// Whether `sub` has a message it could receive right now.
    pub fn has_deliverable(&self, sub: SubscriptionId) -> bool {
        let mut inner = self.inner.lock();
        inner.reroute();
        let up = inner.up;
        inner
            .subscriptions
            .get(sub.0)
            .and_then(|s| s.next_deliverable(up))
            .is_some()
    }

    pub fn queued_len(&self, sub: SubscriptionId) -> usize {
        let inner = self.inner.lock();
        inner
            .subscriptions
            .get(sub.0)
            .map(|s| s.queues.iter().map(BTreeMap::len).sum())
            .unwrap_or(0)
    }

    pub fn inflight_len(&self, sub: SubscriptionId) -> usize {
        let inner = self.inner.lock();
        inner.subscriptions.get(sub.0).map(|s| s.inflight.len()).unwrap_or(0)
    }

    /// (published, delivered, redelivered)
    pub fn counters(&self) -> (u64, u64, u64) {
        let inner = self.inner.lock();
        (inner.published, inner.delivered, inner.redelivered)
    }

    pub fn failover_bound(&self) -> Duration {
        self.config.heartbeat.failover_bound()
    }
}
