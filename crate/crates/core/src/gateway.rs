//! Ingestion: push gateways, pull collectors and the queue forwarder.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use chrono::Duration;
use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;
use uuid::Uuid;

use crate::databus::{BusError, BusMessage, DataBus, PublisherId};
use crate::dead_letter::DeadLetterSink;
use crate::envelope::{EnvelopeError, StageName, TelemetryEnvelope};
use crate::time::{Clock, Instant};

/// Fixed number of attempts with doubling backoff between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::milliseconds(100),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `n` (0-based): 0, 100 ms, 200 ms, ...
    pub fn backoff(&self, attempt: u32) -> Duration {
        if attempt == 0 {
            Duration::zero()
        } else {
            self.initial_backoff * (1i32 << (attempt - 1).min(20))
        }
    }

    pub fn backoffs(&self) -> impl Iterator<Item = Duration> + '_ {
        (0..self.attempts).map(|a| self.backoff(a))
    }
}

/// Reply of an ingestion endpoint: `{log_id, accepted, reason}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Acknowledgment {
    pub log_id: Option<Uuid>,
    pub accepted: bool,
    pub reason: Option<String>,
    #[serde(skip)]
    retryable: bool,
}

impl Acknowledgment {
    pub fn accepted(log_id: Uuid) -> Self {
        Self {
            log_id: Some(log_id),
            accepted: true,
            reason: None,
            retryable: false,
        }
    }

    /// Permanent rejection; retrying the same bytes cannot succeed.
    pub fn rejected(log_id: Option<Uuid>, reason: impl Into<String>) -> Self {
        Self {
            log_id,
            accepted: false,
            reason: Some(reason.into()),
            retryable: false,
        }
    }

    /// Transient failure; the caller may retry.
    pub fn unavailable(log_id: Option<Uuid>, reason: impl Into<String>) -> Self {
        Self {
            log_id,
            accepted: false,
            reason: Some(reason.into()),
            retryable: true,
        }
    }

    pub fn is_retryable(&self) -> bool {
        !self.accepted && self.retryable
    }
}

/// Anything that accepts canonical JSON documents.
pub trait IngestionEndpoint {
    fn submit(&self, raw: &[u8], now: Instant) -> Acknowledgment;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("rejected: {0}")]
    Rejected(EnvelopeError),
    #[error("bus unavailable: {0}")]
    BusUnavailable(BusError),
    #[error("gateway {0} unavailable")]
    Unavailable(String),
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub stage_name: StageName,
    pub rg_id: String,
    pub topic: String,
    pub publisher: PublisherId,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayCounters {
    pub ingress: u64,
    pub published: u64,
    pub rejected: u64,
    pub bus_unavailable: u64,
}

/// Push-style gateway: validate, stamp, publish.
#[derive(Debug)]
pub struct Gateway {
    config: GatewayConfig,
    bus: Arc<DataBus>,
    dead_letters: Arc<DeadLetterSink>,
    available: AtomicBool,
    counters: Mutex<GatewayCounters>,
}

impl Gateway {
    pub fn new(config: GatewayConfig, bus: Arc<DataBus>, dead_letters: Arc<DeadLetterSink>) -> Self {
        Self {
            config,
            bus,
            dead_letters,
            available: AtomicBool::new(true),
            counters: Mutex::new(GatewayCounters::default()),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn set_available(&self, up: bool) {
        self.available.store(up, Ordering::SeqCst);
    }

    pub fn is_available(&self) -> bool {
        self.available.load(Ordering::SeqCst)
    }

    pub fn counters(&self) -> GatewayCounters {
        *self.counters.lock()
    }

    /// Validates `raw`, appends this gateway's stamp and publishes the result.
    /// Rejected documents go to the dead-letter sink and never reach the bus.
    pub fn ingest_push(&self, raw: &[u8], now: Instant) -> Result<BusMessage, GatewayError> {
        if !self.is_available() {
            return Err(GatewayError::Unavailable(self.config.rg_id.clone()));
        }
        let mut counters = self.counters.lock();
        counters.ingress += 1;
        let stamped = TelemetryEnvelope::parse_and_validate(raw)
            .and_then(|env| env.stamp_stage(self.config.stage_name.clone(), now));
        let env = match stamped {
            Ok(env) => env,
            Err(e) => {
                counters.rejected += 1;
                self.dead_letters
                    .record(format!("{}: {e}", self.config.rg_id), raw, now);
                return Err(GatewayError::Rejected(e));
            }
        };
        match self.bus.publish(&self.config.publisher, &self.config.topic, &env, now) {
            Ok(msg) => {
                counters.published += 1;
                Ok(msg)
            }
            Err(e) => {
                counters.bus_unavailable += 1;
                Err(GatewayError::BusUnavailable(e))
            }
        }
    }
}

impl IngestionEndpoint for Gateway {
    fn submit(&self, raw: &[u8], now: Instant) -> Acknowledgment {
        match self.ingest_push(raw, now) {
            Ok(msg) => {
                let log_id = match &msg.body {
                    crate::databus::MessageBody::Inline(env) => env.log_id,
                    crate::databus::MessageBody::Ref(_) => self.bus.resolve(&msg).map(|e| e.log_id).unwrap_or_default(),
                };
                Acknowledgment::accepted(log_id)
            }
            Err(GatewayError::Rejected(e)) => Acknowledgment::rejected(None, e.to_string()),
            Err(e) => Acknowledgment::unavailable(None, e.to_string()),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CollectError {
    #[error("limit must be at least 1")]
    InvalidLimit,
    #[error("source unavailable after {attempts} attempts")]
    SourceUnavailable { attempts: u32 },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("source unavailable")]
pub struct SourceUnavailable;

/// A source that a collector agent polls.
pub trait PollSource {
    fn poll(&mut self, limit: usize) -> Result<Vec<TelemetryEnvelope>, SourceUnavailable>;
}

/// In-memory FIFO source with an optional number of leading failures.
#[derive(Debug, Default)]
pub struct QueueSource {
    pending: VecDeque<TelemetryEnvelope>,
    failures_left: u32,
}

impl QueueSource {
    pub fn new(items: impl IntoIterator<Item = TelemetryEnvelope>) -> Self {
        Self {
            pending: items.into_iter().collect(),
            failures_left: 0,
        }
    }

    pub fn failing(mut self, times: u32) -> Self {
        self.failures_left = times;
        self
    }

    pub fn push(&mut self, env: TelemetryEnvelope) {
        self.pending.push_back(env);
    }
}

impl PollSource for QueueSource {
    fn poll(&mut self, limit: usize) -> Result<Vec<TelemetryEnvelope>, SourceUnavailable> {
        if self.failures_left > 0 {
            self.failures_left -= 1;
            return Err(SourceUnavailable);
        }
        let n = limit.min(self.pending.len());
        Ok(self.pending.drain(..n).collect())
    }
}

/// Drains up to `limit` envelopes from `source`, in source order.
pub fn collect_pull(source: &mut dyn PollSource, limit: usize) -> Result<Vec<TelemetryEnvelope>, CollectError> {
    if limit == 0 {
        return Err(CollectError::InvalidLimit);
    }
    source
        .poll(limit)
        .map_err(|_| CollectError::SourceUnavailable { attempts: 1 })
}

/// [`collect_pull`] with the retry policy applied on the given clock.
pub fn collect_pull_with_retry(
    source: &mut dyn PollSource,
    limit: usize,
    retry: &RetryPolicy,
    clock: &dyn Clock,
) -> Result<Vec<TelemetryEnvelope>, CollectError> {
    if limit == 0 {
        return Err(CollectError::InvalidLimit);
    }
    for (attempt, backoff) in retry.backoffs().enumerate() {
        if attempt > 0 {
            clock.sleep(backoff);
        }
        if let Ok(items) = source.poll(limit) {
            return Ok(items);
        }
    }
    Err(CollectError::SourceUnavailable {
        attempts: retry.attempts,
    })
}

#[derive(Debug, Error)]
pub enum ForwardError {
    /// The envelope cannot be forwarded; it belongs in the dead-letter sink.
    #[error("unforwardable: {0}")]
    Unprocessable(String),
    /// The remote refused transiently; keep the message queued.
    #[error("remote unavailable: {}", .0.reason.clone().unwrap_or_default())]
    RemoteUnavailable(Acknowledgment),
}

/// Stamps the forwarder stage and returns the document to ship.
pub fn prepare_forward(fwd_stage: &StageName, env: &TelemetryEnvelope, now: Instant) -> Result<Vec<u8>, ForwardError> {
    env.stamp_stage(fwd_stage.clone(), now)
        .map(|e| e.to_canonical_bytes())
        .map_err(|e| ForwardError::Unprocessable(e.to_string()))
}

/// Stamps `fwd_stage` and delivers to `remote` in one step.
pub fn forward_queue(
    fwd_stage: &StageName,
    env: &TelemetryEnvelope,
    remote: &dyn IngestionEndpoint,
    now: Instant,
) -> Result<Acknowledgment, ForwardError> {
    let bytes = prepare_forward(fwd_stage, env, now)?;
    let ack = remote.submit(&bytes, now);
    if ack.accepted {
        Ok(ack)
    } else if ack.is_retryable() {
        Err(ForwardError::RemoteUnavailable(ack))
    } else {
        Err(ForwardError::Unprocessable(ack.reason.unwrap_or_default()))
    }
}
