//! The canonical telemetry envelope.
//!
//! Every component in the pipeline speaks this document: a small fixed
//! top-level schema with an open `governance_data` payload and an ordered map
//! of stage timestamps. Each stage appends its own stamp; the map is
//! write-once per stage and non-decreasing in insertion order.
//!
//! ```text
//! {
//!   "CSP": "AWS",
//!   "data_type": "metrics",
//!   "error": null,
//!   "governance_data": { ... },
//!   "log_id": "a2bc98fb-d4f2-44b0-a093-3f766fd1016e",
//!   "service_name": "cna-app",
//!   "timestamps": { "cna_timestamp": "2024-09-06T15:13:45.460268+00:00", ... }
//! }
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;
use uuid::Uuid;

use crate::time::{format_instant, parse_instant, Instant};

pub const FIELD_CSP: &str = "CSP";
pub const FIELD_DATA_TYPE: &str = "data_type";
pub const FIELD_ERROR: &str = "error";
pub const FIELD_GOVERNANCE_DATA: &str = "governance_data";
pub const FIELD_LOG_ID: &str = "log_id";
pub const FIELD_SERVICE_NAME: &str = "service_name";
pub const FIELD_TIMESTAMPS: &str = "timestamps";

const TOP_LEVEL_FIELDS: [&str; 7] = [
    FIELD_CSP,
    FIELD_DATA_TYPE,
    FIELD_ERROR,
    FIELD_GOVERNANCE_DATA,
    FIELD_LOG_ID,
    FIELD_SERVICE_NAME,
    FIELD_TIMESTAMPS,
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvelopeError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("invalid data_type {0:?}")]
    InvalidDataType(String),
    #[error("invalid timestamp for {stage}: {reason}")]
    InvalidTimestamp { stage: String, reason: String },
    #[error("stage {0} already stamped")]
    DuplicateStage(StageName),
    #[error("stamp for {stage} at {now} precedes last stamp {last}")]
    NonMonotonicStamp {
        stage: StageName,
        last: String,
        now: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Metrics,
    Logs,
    Traces,
}

impl DataType {
    pub const ALL: [DataType; 3] = [DataType::Metrics, DataType::Logs, DataType::Traces];

    pub fn as_str(self) -> &'static str {
        match self {
            DataType::Metrics => "metrics",
            DataType::Logs => "logs",
            DataType::Traces => "traces",
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DataType {
    type Err = EnvelopeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "metrics" => Ok(DataType::Metrics),
            "logs" => Ok(DataType::Logs),
            "traces" => Ok(DataType::Traces),
            other => Err(EnvelopeError::InvalidDataType(other.to_string())),
        }
    }
}

/// Cloud provider identity. Open set; "AWS" and "IBM" are the usual values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Csp(String);

impl Csp {
    pub fn new(name: impl Into<String>) -> Self {
        Csp(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Csp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Csp {
    fn from(s: &str) -> Self {
        Csp(s.to_string())
    }
}

/// Key of a stage stamp, e.g. `RG_GOV_IMS_Converter_timestamp`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageName(String);

impl StageName {
    pub const CNA: &'static str = "cna_timestamp";
    pub const IMS_GATEWAY: &'static str = "RG_GOV_IMS_API_Gateway_timestamp";
    pub const IMS_CONVERTER: &'static str = "RG_GOV_IMS_Converter_timestamp";
    pub const IMS_ARCHIVER: &'static str = "RG_GOV_IMS_Archiver_timestamp";

    pub fn new(name: impl Into<String>) -> Result<Self, EnvelopeError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(EnvelopeError::SchemaViolation("stage name must be non-empty".into()));
        }
        Ok(StageName(name))
    }

    pub(crate) fn from_static(name: &str) -> Self {
        StageName(name.to_string())
    }

    pub fn cna() -> Self {
        Self::from_static(Self::CNA)
    }

    pub fn ims_gateway() -> Self {
        Self::from_static(Self::IMS_GATEWAY)
    }

    pub fn ims_converter() -> Self {
        Self::from_static(Self::IMS_CONVERTER)
    }

    pub fn ims_archiver() -> Self {
        Self::from_static(Self::IMS_ARCHIVER)
    }

    /// Gateway stamp of CNA resource group `rg` (`RG_1_API_Gateway_timestamp`).
    pub fn rg_gateway(rg: u32) -> Self {
        StageName(format!("RG_{rg}_API_Gateway_timestamp"))
    }

    /// Queue forwarder stamp of CNA resource group `rg`.
    pub fn rg_forwarder(rg: u32) -> Self {
        StageName(format!("RG_{rg}_SQS_Forwarder_timestamp"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered stage → instant map. Insertion order is stamping order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StageTimestamps {
    entries: Vec<(StageName, Instant)>,
}

impl StageTimestamps {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn origin(at: Instant) -> Self {
        Self {
            entries: vec![(StageName::cna(), at)],
        }
    }

    pub fn get(&self, stage: &str) -> Option<Instant> {
        self.entries
            .iter()
            .find(|(name, _)| name.as_str() == stage)
            .map(|(_, t)| *t)
    }

    pub fn contains(&self, stage: &str) -> bool {
        self.get(stage).is_some()
    }

    pub fn last(&self) -> Option<(&StageName, Instant)> {
        self.entries.last().map(|(n, t)| (n, *t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StageName, &Instant)> {
        self.entries.iter().map(|(n, t)| (n, t))
    }

    pub fn stages(&self) -> impl Iterator<Item = &StageName> {
        self.entries.iter().map(|(n, _)| n)
    }

    /// Appends a stamp, enforcing write-once and monotonic progress.
    pub fn push(&mut self, stage: StageName, at: Instant) -> Result<(), EnvelopeError> {
        if self.contains(stage.as_str()) {
            return Err(EnvelopeError::DuplicateStage(stage));
        }
        if let Some((_, last)) = self.last() {
            if at < last {
                return Err(EnvelopeError::NonMonotonicStamp {
                    stage,
                    last: format_instant(&last),
                    now: format_instant(&at),
                });
            }
        }
        self.entries.push((stage, at));
        Ok(())
    }

    pub fn is_monotonic(&self) -> bool {
        self.entries.windows(2).all(|w| w[0].1 <= w[1].1)
    }
}

impl Serialize for StageTimestamps {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(self.entries.len()))?;
        for (stage, at) in &self.entries {
            map.serialize_entry(stage.as_str(), &format_instant(at))?;
        }
        map.end()
    }
}

/// The canonical governance record.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryEnvelope {
    pub csp: Csp,
    pub data_type: DataType,
    pub error: Option<String>,
    pub governance_data: Map<String, Value>,
    pub log_id: Uuid,
    pub service_name: String,
    pub timestamps: StageTimestamps,
}

impl TelemetryEnvelope {
    /// Parses and validates a canonical JSON document.
    pub fn parse_and_validate(raw: &[u8]) -> Result<Self, EnvelopeError> {
        let text = std::str::from_utf8(raw).map_err(|e| EnvelopeError::MalformedDocument(format!("not UTF-8: {e}")))?;
        let value: Value = serde_json::from_str(text).map_err(|e| EnvelopeError::MalformedDocument(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self, EnvelopeError> {
        let Value::Object(mut obj) = value else {
            return Err(EnvelopeError::SchemaViolation("document must be a JSON object".into()));
        };
        if let Some(extra) = obj.keys().find(|k| !TOP_LEVEL_FIELDS.contains(&k.as_str())) {
            return Err(EnvelopeError::SchemaViolation(format!(
                "unknown top-level field {extra:?}"
            )));
        }

        let csp = take_string(&mut obj, FIELD_CSP)?;
        if csp.is_empty() {
            return Err(EnvelopeError::SchemaViolation("CSP must be non-empty".into()));
        }
        let data_type: DataType = take_string(&mut obj, FIELD_DATA_TYPE)?.parse()?;
        let error = match obj.remove(FIELD_ERROR) {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => return Err(EnvelopeError::SchemaViolation("error must be a string or null".into())),
        };
        let governance_data = match obj.remove(FIELD_GOVERNANCE_DATA) {
            Some(Value::Object(m)) => m,
            Some(_) => {
                return Err(EnvelopeError::SchemaViolation(
                    "governance_data must be an object".into(),
                ))
            }
            None => return Err(missing(FIELD_GOVERNANCE_DATA)),
        };
        if let Some((k, _)) = governance_data
            .iter()
            .find(|(_, v)| matches!(v, Value::Array(_) | Value::Object(_)))
        {
            return Err(EnvelopeError::SchemaViolation(format!(
                "governance_data.{k} must be a scalar"
            )));
        }
        let log_id_raw = take_string(&mut obj, FIELD_LOG_ID)?;
        let log_id = Uuid::parse_str(&log_id_raw)
            .map_err(|_| EnvelopeError::SchemaViolation(format!("log_id {log_id_raw:?} is not a UUID")))?;
        let service_name = take_string(&mut obj, FIELD_SERVICE_NAME)?;

        let raw_stamps = match obj.remove(FIELD_TIMESTAMPS) {
            Some(Value::Object(m)) => m,
            Some(_) => return Err(EnvelopeError::SchemaViolation("timestamps must be an object".into())),
            None => return Err(missing(FIELD_TIMESTAMPS)),
        };
        let mut timestamps = StageTimestamps::new();
        for (stage, v) in raw_stamps {
            let Value::String(s) = v else {
                return Err(EnvelopeError::InvalidTimestamp {
                    stage,
                    reason: "not a string".into(),
                });
            };
            let at = parse_instant(&s).ok_or_else(|| EnvelopeError::InvalidTimestamp {
                stage: stage.clone(),
                reason: format!("{s:?} is not a UTC RFC 3339 instant with microsecond precision"),
            })?;
            let name = StageName::new(stage.clone())?;
            timestamps.push(name, at).map_err(|e| EnvelopeError::InvalidTimestamp {
                stage,
                reason: e.to_string(),
            })?;
        }
        if !timestamps.contains(StageName::CNA) {
            return Err(missing("timestamps.cna_timestamp"));
        }

        Ok(Self {
            csp: Csp(csp),
            data_type,
            error,
            governance_data,
            log_id,
            service_name,
            timestamps,
        })
    }

    /// Returns a copy with `stage` appended at `now`.
    pub fn stamp_stage(&self, stage: StageName, now: Instant) -> Result<Self, EnvelopeError> {
        let mut next = self.clone();
        next.timestamps.push(stage, now)?;
        Ok(next)
    }

    /// Object key under which the archiver stores this envelope: `<csp>/<log_id>`.
    pub fn canonical_key(&self) -> String {
        format!("{}/{}", self.csp, self.log_id)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("envelope serializes")
    }

    /// Pretty-printed canonical document; byte-compatible with the golden samples.
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("envelope serializes")
    }

    pub fn to_compact_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("envelope serializes")
    }
}

impl Serialize for TelemetryEnvelope {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(TOP_LEVEL_FIELDS.len()))?;
        map.serialize_entry(FIELD_CSP, self.csp.as_str())?;
        map.serialize_entry(FIELD_DATA_TYPE, self.data_type.as_str())?;
        map.serialize_entry(FIELD_ERROR, &self.error)?;
        map.serialize_entry(FIELD_GOVERNANCE_DATA, &self.governance_data)?;
        map.serialize_entry(FIELD_LOG_ID, &self.log_id.hyphenated().to_string())?;
        map.serialize_entry(FIELD_SERVICE_NAME, &self.service_name)?;
        map.serialize_entry(FIELD_TIMESTAMPS, &self.timestamps)?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for TelemetryEnvelope {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        TelemetryEnvelope::from_value(value).map_err(serde::de::Error::custom)
    }
}

fn missing(field: &str) -> EnvelopeError {
    EnvelopeError::SchemaViolation(format!("missing required field {field}"))
}

fn take_string(obj: &mut Map<String, Value>, field: &str) -> Result<String, EnvelopeError> {
    match obj.remove(field) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(EnvelopeError::SchemaViolation(format!("{field} must be a string"))),
        None => Err(missing(field)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    const AWS_METRICS: &str = include_str!("../tests/fixtures/aws_metrics.json");
    const IBM_LOGS: &str = include_str!("../tests/fixtures/ibm_logs.json");

    fn patch(doc: &str, f: impl FnOnce(&mut Map<String, Value>)) -> Vec<u8> {
        let mut v: Value = serde_json::from_str(doc).unwrap();
        f(v.as_object_mut().unwrap());
        serde_json::to_vec(&v).unwrap()
    }

    #[test]
    fn parses_aws_metrics_sample() {
        let env = TelemetryEnvelope::parse_and_validate(AWS_METRICS.as_bytes()).unwrap();
        assert_eq!(env.csp.as_str(), "AWS");
        assert_eq!(env.data_type, DataType::Metrics);
        assert_eq!(env.log_id.to_string(), "a2bc98fb-d4f2-44b0-a093-3f766fd1016e");
        assert_eq!(env.timestamps.len(), 6);
        assert_eq!(env.error, None);
    }

    #[test]
    fn rejects_unknown_data_type() {
        let raw = patch(AWS_METRICS, |o| {
            o.insert("data_type".into(), Value::String("video".into()));
        });
        assert_eq!(
            TelemetryEnvelope::parse_and_validate(&raw),
            Err(EnvelopeError::InvalidDataType("video".into()))
        );
    }

    #[test]
    fn rejects_missing_log_id() {
        let raw = patch(AWS_METRICS, |o| {
            o.remove("log_id");
        });
        assert!(matches!(
            TelemetryEnvelope::parse_and_validate(&raw),
            Err(EnvelopeError::SchemaViolation(_))
        ));
    }

    #[test]
    fn rejects_extra_top_level_field_but_keeps_open_payload() {
        let raw = patch(AWS_METRICS, |o| {
            o.insert("tenant".into(), Value::String("x".into()));
        });
        assert!(matches!(
            TelemetryEnvelope::parse_and_validate(&raw),
            Err(EnvelopeError::SchemaViolation(_))
        ));

        let raw = patch(AWS_METRICS, |o| {
            o["governance_data"]
                .as_object_mut()
                .unwrap()
                .insert("zz_custom".into(), Value::from(7));
        });
        let env = TelemetryEnvelope::parse_and_validate(&raw).unwrap();
        assert_eq!(env.governance_data.keys().next_back().unwrap(), "zz_custom");
    }

    #[test]
    fn rejects_bad_timestamps() {
        let raw = patch(AWS_METRICS, |o| {
            o["timestamps"]["cna_timestamp"] = Value::String("2024-09-06 15:13".into());
        });
        assert!(matches!(
            TelemetryEnvelope::parse_and_validate(&raw),
            Err(EnvelopeError::InvalidTimestamp { .. })
        ));
        // out of order
        let raw = patch(AWS_METRICS, |o| {
            o["timestamps"]["RG_1_API_Gateway_timestamp"] = Value::String("2024-09-06T15:13:44.000000+00:00".into());
        });
        assert!(matches!(
            TelemetryEnvelope::parse_and_validate(&raw),
            Err(EnvelopeError::InvalidTimestamp { .. })
        ));
        let raw = patch(AWS_METRICS, |o| {
            o["timestamps"].as_object_mut().unwrap().shift_remove("cna_timestamp");
        });
        assert!(matches!(
            TelemetryEnvelope::parse_and_validate(&raw),
            Err(EnvelopeError::SchemaViolation(_))
        ));
    }

    #[test]
    fn malformed_bytes() {
        assert!(matches!(
            TelemetryEnvelope::parse_and_validate(b"\x00\x9f garbage"),
            Err(EnvelopeError::MalformedDocument(_))
        ));
        assert!(matches!(
            TelemetryEnvelope::parse_and_validate(b"{\"CSP\": "),
            Err(EnvelopeError::MalformedDocument(_))
        ));
        assert!(matches!(
            TelemetryEnvelope::parse_and_validate(b"[1,2]"),
            Err(EnvelopeError::SchemaViolation(_))
        ));
    }

    #[test]
    fn stamping_appends_in_order() {
        let origin = parse_instant("2024-08-12T17:21:47.260626+00:00").unwrap();
        let mut env = TelemetryEnvelope::parse_and_validate(IBM_LOGS.as_bytes()).unwrap();
        env.timestamps = StageTimestamps::origin(origin);
        let stamped = env
            .stamp_stage(StageName::ims_gateway(), origin + Duration::microseconds(67_236))
            .unwrap();
        let stages: Vec<_> = stamped.timestamps.stages().map(|s| s.as_str()).collect();
        assert_eq!(stages, vec![StageName::CNA, StageName::IMS_GATEWAY]);
        assert_eq!(
            format_instant(&stamped.timestamps.get(StageName::IMS_GATEWAY).unwrap()),
            "2024-08-12T17:21:47.327862+00:00"
        );
        // original untouched
        assert_eq!(env.timestamps.len(), 1);

        assert!(matches!(
            stamped.stamp_stage(StageName::ims_gateway(), origin + Duration::seconds(1)),
            Err(EnvelopeError::DuplicateStage(_))
        ));
        assert!(matches!(
            stamped.stamp_stage(StageName::ims_converter(), origin),
            Err(EnvelopeError::NonMonotonicStamp { .. })
        ));
    }

    #[test]
    fn canonical_keys() {
        let aws = TelemetryEnvelope::parse_and_validate(AWS_METRICS.as_bytes()).unwrap();
        let ibm = TelemetryEnvelope::parse_and_validate(IBM_LOGS.as_bytes()).unwrap();
        assert_eq!(aws.canonical_key(), "AWS/a2bc98fb-d4f2-44b0-a093-3f766fd1016e");
        assert_eq!(ibm.canonical_key(), "IBM/090f53c3-11f4-4871-a716-7357e6153259");
        assert_eq!(aws.clone().canonical_key(), aws.canonical_key());
    }
}
