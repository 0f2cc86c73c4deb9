//! Synthetic cloud-native application that emits metrics and logs envelopes.
//!
//! Payload values are a pure function of `(seed, kind, now)`; log ids come
//! from a separate seeded stream so repeated calls stay distinct.

use chrono::Duration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use uuid::Uuid;

use crate::envelope::{Csp, DataType, StageTimestamps, TelemetryEnvelope};
use crate::gateway::{Acknowledgment, IngestionEndpoint, RetryPolicy};
use crate::ids::{mix_seed, IdGenerator};
use crate::time::{micros_since_epoch, Clock, Instant};

pub const SERVICE_NAME: &str = "cna-app";

/// Operational log lines carried by every logs envelope.
pub const LOG_LINES: [&str; 10] = [
    "Application started successfully.",
    "Collecting system metrics.",
    "Metrics collected successfully.",
    "Sending data to API Gateway.",
    "Data sent successfully.",
    "Error handling and logging mechanism operational.",
    "System monitoring and logging active.",
    "Routine check completed successfully.",
    "No errors detected in the last cycle.",
    "All systems functional.",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IngestionPath {
    /// High-demand: local gateway, queue and forwarder before the governance gateway.
    Queued,
    /// Low-demand: straight to the governance gateway.
    Direct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnaConfig {
    pub csp: Csp,
    pub cadence: Duration,
    pub metrics_count: u64,
    pub logs_count: u64,
    pub seed: u64,
    pub path: IngestionPath,
}

impl CnaConfig {
    pub fn new(csp: impl Into<String>, path: IngestionPath) -> Self {
        Self {
            csp: Csp::new(csp),
            cadence: Duration::seconds(1),
            metrics_count: 0,
            logs_count: 0,
            seed: 0,
            path,
        }
    }

    pub fn total(&self) -> u64 {
        self.metrics_count + self.logs_count
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CnaError {
    #[error("only metrics and logs are emitted, not {0}")]
    UnsupportedKind(DataType),
    #[error("sink unavailable after {attempts} attempts: {reason}")]
    SinkUnavailable { attempts: u32, reason: String },
}

/// Builds one envelope stamped with `cna_timestamp = now`.
pub fn generate_envelope(
    cfg: &CnaConfig,
    kind: DataType,
    now: Instant,
    ids: &mut IdGenerator,
) -> Result<TelemetryEnvelope, CnaError> {
    let governance_data = match kind {
        DataType::Metrics => metrics_payload(cfg.seed, now),
        DataType::Logs => logs_payload(),
        DataType::Traces => return Err(CnaError::UnsupportedKind(kind)),
    };
    Ok(TelemetryEnvelope {
        csp: cfg.csp.clone(),
        data_type: kind,
        error: None,
        governance_data,
        log_id: ids.next_uuid(),
        service_name: SERVICE_NAME.to_string(),
        timestamps: StageTimestamps::origin(now),
    })
}

fn one_decimal(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn metrics_payload(seed: u64, now: Instant) -> Map<String, Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, micros_since_epoch(&now) as u64));
    let mut m = Map::new();
    m.insert(
        "memory_usage".into(),
        Value::from(one_decimal(rng.random_range(20.0..80.0))),
    );
    m.insert(
        "cpu_usage".into(),
        Value::from(one_decimal(rng.random_range(0.5..10.0))),
    );
    m.insert(
        "disk_usage".into(),
        Value::from(one_decimal(rng.random_range(1.0..60.0))),
    );
    m.insert(
        "bytes_sent".into(),
        Value::from(rng.random_range(1_000_000u64..10_000_000)),
    );
    m.insert(
        "bytes_recv".into(),
        Value::from(rng.random_range(1_000_000u64..100_000_000)),
    );
    m.insert("additional_metric_1".into(), Value::from("value_1"));
    m.insert("additional_metric_2".into(), Value::from("value_2"));
    m
}

fn logs_payload() -> Map<String, Value> {
    LOG_LINES
        .iter()
        .enumerate()
        .map(|(i, line)| (format!("log_{}", i + 1), Value::from(*line)))
        .collect()
}

/// Deterministic emission schedule: kinds alternate metrics, logs, ... until
/// one count is exhausted, then the remainder follows.
#[derive(Debug, Clone)]
pub struct EmissionSchedule {
    metrics_left: u64,
    logs_left: u64,
    next_metrics: bool,
}

impl EmissionSchedule {
    pub fn new(cfg: &CnaConfig) -> Self {
        Self {
            metrics_left: cfg.metrics_count,
            logs_left: cfg.logs_count,
            next_metrics: true,
        }
    }
}

impl Iterator for EmissionSchedule {
    type Item = DataType;

    fn next(&mut self) -> Option<DataType> {
        let metrics = match (self.metrics_left > 0, self.logs_left > 0) {
            (false, false) => return None,
            (true, false) => true,
            (false, true) => false,
            (true, true) => self.next_metrics,
        };
        self.next_metrics = !metrics;
        if metrics {
            self.metrics_left -= 1;
            Some(DataType::Metrics)
        } else {
            self.logs_left -= 1;
            Some(DataType::Logs)
        }
    }
}

/// Emission time of the `i`-th envelope.
pub fn emission_time(start: Instant, cadence: Duration, i: u64) -> Instant {
    start + cadence * i as i32
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EmissionReport {
    pub metrics: u64,
    pub logs: u64,
    pub total: u64,
    pub log_ids: Vec<Uuid>,
}

impl EmissionReport {
    pub fn record(&mut self, kind: DataType, log_id: Uuid) {
        match kind {
            DataType::Metrics => self.metrics += 1,
            DataType::Logs => self.logs += 1,
            DataType::Traces => {}
        }
        self.total += 1;
        self.log_ids.push(log_id);
    }
}

/// Result of a run that stopped on a persistently failing sink.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct EmitterFailure {
    pub error: CnaError,
    pub report: EmissionReport,
}

/// Runs one emitter to completion against `sink`, pacing with `clock`.
/// The report counts only acknowledged envelopes.
pub fn run_emitter(
    cfg: &CnaConfig,
    sink: &dyn IngestionEndpoint,
    clock: &dyn Clock,
    ids: &mut IdGenerator,
    retry: &RetryPolicy,
) -> Result<EmissionReport, EmitterFailure> {
    let start = clock.now();
    let mut report = EmissionReport::default();
    for (i, kind) in EmissionSchedule::new(cfg).enumerate() {
        clock.advance_to(emission_time(start, cfg.cadence, i as u64));
        let env = generate_envelope(cfg, kind, clock.now(), ids).map_err(|error| EmitterFailure {
            error,
            report: report.clone(),
        })?;
        let bytes = env.to_canonical_bytes();
        let mut last: Option<Acknowledgment> = None;
        for (attempt, backoff) in retry.backoffs().enumerate() {
            if attempt > 0 {
                clock.sleep(backoff);
            }
            let ack = sink.submit(&bytes, clock.now());
            if ack.accepted {
                report.record(kind, env.log_id);
                last = None;
                break;
            }
            let retryable = ack.is_retryable();
            last = Some(ack);
            if !retryable {
                break;
            }
        }
        if let Some(ack) = last {
            return Err(EmitterFailure {
                error: CnaError::SinkUnavailable {
                    attempts: retry.attempts,
                    reason: ack.reason.unwrap_or_default(),
                },
                report,
            });
        }
    }
    Ok(report)
}
