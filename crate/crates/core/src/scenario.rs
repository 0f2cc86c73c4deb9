//! Scenario files: TOML documents describing topology, workload, latency,
//! faults, pipeline rules and analytics. A scenario doubles as the
//! desired-state document for drift detection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use chrono::Duration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{AssessmentRule, DesiredState, LegCatalog, LegDef};
use crate::cna_sim::{CnaConfig, IngestionPath};
use crate::databus::{
    BusConfig, HeartbeatConfig, STANDARD_TOPICS, TOPIC_ALERTS, TOPIC_ARCHIVER, TOPIC_CONVERTER, TOPIC_INCIDENTS,
    TOPIC_INGRESS,
};
use crate::envelope::{Csp, StageName};
use crate::ids::mix_seed;
use crate::latency::LatencyDist;
use crate::pipeline::{AggregationWindow, FieldPath, FilterRule};
use crate::storage::RetentionPolicy;
use crate::time::{parse_instant, Instant};

pub const DEFAULT_START: &str = "2024-09-06T15:00:00.000000+00:00";

pub const IMS_GATEWAY: &str = "ims-gateway";
pub const IMS_PRIMARY_BUS: &str = "ims-primary-bus";
pub const IMS_AUXILIARY_BUS: &str = "ims-auxiliary-bus";
pub const CONVERTER: &str = "converter";
pub const ARCHIVER: &str = "archiver";
pub const MUTABLE_STORE: &str = "mutable-store";
pub const IMMUTABLE_STORE: &str = "immutable-store";

pub fn rg_gateway(k: u32) -> String {
    format!("rg{k}-gateway")
}

pub fn rg_primary_bus(k: u32) -> String {
    format!("rg{k}-primary-bus")
}

pub fn rg_auxiliary_bus(k: u32) -> String {
    format!("rg{k}-auxiliary-bus")
}

pub fn rg_forwarder(k: u32) -> String {
    format!("rg{k}-forwarder")
}

pub fn da_analytics(j: u32) -> String {
    format!("da{j}-analytics")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid scenario:\n{}", .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Issue>),
}

impl ConfigError {
    pub fn issues(&self) -> &[Issue] {
        match self {
            Self::Invalid(v) => v,
            _ => &[],
        }
    }
}

fn default_start() -> String {
    DEFAULT_START.to_string()
}

fn default_one() -> u32 {
    1
}

fn default_cadence() -> f64 {
    1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnaSpec {
    pub csp: String,
    pub path: IngestionPath,
    /// Resource group hosting the CNA; required for the queued path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rg: Option<u32>,
    #[serde(default)]
    pub metrics: u64,
    #[serde(default)]
    pub logs: u64,
    #[serde(default = "default_cadence")]
    pub cadence_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyConfig {
    /// CNA to the gateway of its own resource group.
    pub intra_region: LatencyDist,
    /// Time a message spends queued before the forwarder picks it up.
    pub queue_dwell: LatencyDist,
    /// Forwarder to the governance gateway.
    pub cross_rg: LatencyDist,
    /// Direct CNA to the governance gateway in another region.
    pub inter_region: LatencyDist,
    pub converter: LatencyDist,
    pub archiver: LatencyDist,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            intra_region: LatencyDist::lognormal_median(21.7, 0.25),
            queue_dwell: LatencyDist::lognormal_median(48.0, 0.3),
            cross_rg: LatencyDist::lognormal_median(697.0, 0.04),
            inter_region: LatencyDist::lognormal_median(72.4, 0.12),
            converter: LatencyDist::lognormal_median(87.0, 0.3),
            archiver: LatencyDist::lognormal_median(87.0, 0.3),
        }
    }
}

impl LatencyConfig {
    pub fn fixed(ms: f64) -> Self {
        let d = LatencyDist::fixed(ms);
        Self {
            intra_region: d,
            queue_dwell: d,
            cross_rg: d,
            inter_region: d,
            converter: d,
            archiver: d,
        }
    }

    fn hops(&self) -> [(&'static str, &LatencyDist); 6] {
        [
            ("intra_region", &self.intra_region),
            ("queue_dwell", &self.queue_dwell),
            ("cross_rg", &self.cross_rg),
            ("inter_region", &self.inter_region),
            ("converter", &self.converter),
            ("archiver", &self.archiver),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BusSpec {
    pub beat_interval_ms: u64,
    pub miss_threshold: u32,
    pub inline_threshold: usize,
}

impl Default for BusSpec {
    fn default() -> Self {
        Self {
            beat_interval_ms: 500,
            miss_threshold: 3,
            inline_threshold: crate::databus::DEFAULT_INLINE_THRESHOLD,
        }
    }
}

impl BusSpec {
    pub fn to_config(self) -> BusConfig {
        BusConfig {
            inline_threshold: self.inline_threshold,
            heartbeat: HeartbeatConfig::new(
                Duration::milliseconds(self.beat_interval_ms as i64),
                self.miss_threshold,
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetentionSpec {
    pub days: i64,
}

impl Default for RetentionSpec {
    fn default() -> Self {
        Self { days: 365 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationSpec {
    pub window: usize,
}

impl Default for AggregationSpec {
    fn default() -> Self {
        Self { window: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub component: String,
    /// Offset from the scenario start.
    pub down_at_ms: u64,
    /// `None` keeps the component down for the rest of the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub up_at_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticsSpec {
    pub alerts_topic: String,
    pub incidents_topic: String,
    pub correlation_window_ms: u64,
}

impl Default for AnalyticsSpec {
    fn default() -> Self {
        Self {
            alerts_topic: TOPIC_ALERTS.to_string(),
            incidents_topic: TOPIC_INCIDENTS.to_string(),
            correlation_window_ms: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunnerSpec {
    /// Simulated time allowed after the last emission before giving up.
    pub quiesce_budget_ms: u64,
    /// Back-off before a consumer retries after a negative acknowledgment.
    pub retry_interval_ms: u64,
}

impl Default for RunnerSpec {
    fn default() -> Self {
        Self {
            quiesce_budget_ms: 3_600_000,
            retry_interval_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_start")]
    pub start: String,
    #[serde(default = "default_one")]
    pub rg_count: u32,
    #[serde(default = "default_one")]
    pub da_count: u32,
    #[serde(default, rename = "cna")]
    pub cnas: Vec<CnaSpec>,
    #[serde(default)]
    pub latency: LatencyConfig,
    #[serde(default)]
    pub bus: BusSpec,
    #[serde(default)]
    pub retention: RetentionSpec,
    #[serde(default, rename = "filter")]
    pub filters: Vec<FilterRule>,
    #[serde(default)]
    pub aggregation: AggregationSpec,
    #[serde(default, rename = "fault")]
    pub faults: Vec<FaultSpec>,
    /// Explicit leg definitions; empty means the standard legs for the wiring.
    #[serde(default, rename = "leg")]
    pub legs: Vec<LegDef>,
    #[serde(default, rename = "assessment")]
    pub assessments: Vec<AssessmentRule>,
    #[serde(default)]
    pub analytics: AnalyticsSpec,
    /// Upper bound in milliseconds per leg label.
    #[serde(default)]
    pub slo: BTreeMap<String, f64>,
    #[serde(default)]
    pub runner: RunnerSpec,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty scenario parses")
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn start_instant(&self) -> Instant {
        parse_instant(&self.start).expect("validated start")
    }

    pub fn retention_policy(&self) -> RetentionPolicy {
        RetentionPolicy::days(self.retention.days)
    }

    pub fn aggregation_window(&self) -> AggregationWindow {
        AggregationWindow::new(self.aggregation.window).expect("validated window")
    }

    /// Emitter settings for CNA `i`. Without an explicit seed each CNA gets
    /// one derived from the scenario seed.
    pub fn cna_config(&self, i: usize) -> CnaConfig {
        let spec = &self.cnas[i];
        CnaConfig {
            csp: Csp::new(spec.csp.clone()),
            cadence: crate::time::millis_f64(spec.cadence_ms),
            metrics_count: spec.metrics,
            logs_count: spec.logs,
            seed: spec.seed.unwrap_or_else(|| mix_seed(self.seed, i as u64)),
            path: spec.path,
        }
    }

    /// Every component instantiated by the wiring, in a fixed order.
    pub fn components(&self) -> Vec<String> {
        let mut out = Vec::new();
        for k in 1..=self.rg_count {
            out.extend([rg_gateway(k), rg_primary_bus(k), rg_auxiliary_bus(k), rg_forwarder(k)]);
        }
        out.extend(
            [
                IMS_GATEWAY,
                IMS_PRIMARY_BUS,
                IMS_AUXILIARY_BUS,
                CONVERTER,
                ARCHIVER,
                MUTABLE_STORE,
                IMMUTABLE_STORE,
            ]
            .map(String::from),
        );
        out.extend((1..=self.da_count).map(da_analytics));
        out
    }

    /// Topics the wiring subscribes to.
    pub fn topics(&self) -> BTreeSet<String> {
        [TOPIC_INGRESS, TOPIC_CONVERTER, TOPIC_ARCHIVER]
            .iter()
            .map(|t| t.to_string())
            .chain([
                self.analytics.alerts_topic.clone(),
                self.analytics.incidents_topic.clone(),
            ])
            .collect()
    }

    /// Stage stamps any envelope in this wiring can carry.
    pub fn stages(&self) -> BTreeSet<StageName> {
        let mut s: BTreeSet<StageName> = [
            StageName::cna(),
            StageName::ims_gateway(),
            StageName::ims_converter(),
            StageName::ims_archiver(),
        ]
        .into();
        for k in 1..=self.rg_count {
            s.insert(StageName::rg_gateway(k));
            s.insert(StageName::rg_forwarder(k));
        }
        s
    }

    /// Explicit legs, or the standard legs for each CNA's path.
    pub fn leg_catalog(&self) -> LegCatalog {
        if !self.legs.is_empty() {
            return LegCatalog {
                legs: self.legs.clone(),
            };
        }
        let mut queued: Vec<(&str, u32)> = Vec::new();
        let mut direct: Vec<&str> = Vec::new();
        for c in &self.cnas {
            match c.path {
                IngestionPath::Queued => {
                    let entry = (c.csp.as_str(), c.rg.unwrap_or(1));
                    if !queued.contains(&entry) {
                        queued.push(entry);
                    }
                }
                IngestionPath::Direct => {
                    if !direct.contains(&c.csp.as_str()) {
                        direct.push(&c.csp);
                    }
                }
            }
        }
        LegCatalog::standard(&queued, &direct)
    }

    pub fn desired_state(&self) -> DesiredState {
        DesiredState {
            components: self.components().into_iter().collect(),
            retention_days: self.retention.days,
            topics: self.topics(),
            filter_rules: self.filters.clone(),
            leg_slos: self.slo.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let mut bad = |field: String, message: String| issues.push(Issue { field, message });

        if parse_instant(&self.start).is_none() {
            bad(
                "start".into(),
                format!("{:?} is not a UTC RFC 3339 instant", self.start),
            );
        }
        if self.rg_count < 1 {
            bad("rg_count".into(), "at least one resource group is required".into());
        }
        if self.da_count < 1 {
            bad("da_count".into(), "at least one analytics group is required".into());
        }
        for (i, c) in self.cnas.iter().enumerate() {
            let f = |name: &str| format!("cna[{i}].{name}");
            if c.csp.trim().is_empty() {
                bad(f("csp"), "must be non-empty".into());
            }
            match (c.path, c.rg) {
                (IngestionPath::Queued, None) => bad(f("rg"), "queued path needs a resource group".into()),
                (_, Some(rg)) if rg < 1 || rg > self.rg_count => {
                    bad(f("rg"), format!("resource group {rg} is not in 1..={}", self.rg_count))
                }
                _ => {}
            }
            if !(c.cadence_ms.is_finite() && c.cadence_ms > 0.0) {
                bad(f("cadence_ms"), "must be positive".into());
            }
        }
        for (hop, dist) in self.latency.hops() {
            if let Err(e) = dist.validate() {
                bad(format!("latency.{hop}"), e);
            }
        }
        if self.bus.beat_interval_ms == 0 {
            bad("bus.beat_interval_ms".into(), "must be positive".into());
        }
        if self.bus.miss_threshold == 0 {
            bad("bus.miss_threshold".into(), "must be at least 1".into());
        }
        if self.bus.inline_threshold == 0 {
            bad("bus.inline_threshold".into(), "must be positive".into());
        }
        if self.retention.days < 1 {
            bad("retention.days".into(), "must be at least 1".into());
        }
        for (i, r) in self.filters.iter().enumerate() {
            if let Err(e) = r.validate() {
                bad(format!("filter[{i}]"), e.to_string());
            }
        }
        if self.aggregation.window == 0 {
            bad("aggregation.window".into(), "must be at least 1".into());
        }
        let components: BTreeSet<String> = self.components().into_iter().collect();
        for (i, fault) in self.faults.iter().enumerate() {
            if !components.contains(&fault.component) {
                bad(
                    format!("fault[{i}].component"),
                    format!("no component named {:?}", fault.component),
                );
            }
            if fault.up_at_ms.is_some_and(|up| up <= fault.down_at_ms) {
                bad(format!("fault[{i}].up_at_ms"), "must be after down_at_ms".into());
            }
        }
        let stages = self.stages();
        for (i, leg) in self.legs.iter().enumerate() {
            if let Err(e) = leg.validate() {
                bad(format!("leg[{i}]"), e.to_string());
            }
            for (end, stage) in [("start", &leg.start), ("end", &leg.end)] {
                if !stages.contains(stage) {
                    bad(
                        format!("leg[{i}].{end}"),
                        format!("stage {stage} is not stamped in this wiring"),
                    );
                }
            }
        }
        let labels: BTreeSet<String> = self.leg_catalog().legs.iter().map(LegDef::label).collect();
        for (i, rule) in self.assessments.iter().enumerate() {
            if let Err(e) = rule.validate() {
                bad(format!("assessment[{i}]"), e.to_string());
            }
            let metric = rule
                .target
                .parse::<FieldPath>()
                .is_ok_and(|p| matches!(p, FieldPath::GovernanceData(_)));
            if !metric && !labels.contains(&rule.target) {
                bad(
                    format!("assessment[{i}].target"),
                    format!("{:?} is neither a leg label nor governance_data.<key>", rule.target),
                );
            }
        }
        for (field, topic) in [
            ("analytics.alerts_topic", &self.analytics.alerts_topic),
            ("analytics.incidents_topic", &self.analytics.incidents_topic),
        ] {
            if !STANDARD_TOPICS.contains(&topic.as_str()) {
                bad(field.into(), format!("topic {topic:?} is not defined on the bus"));
            }
        }
        if self.analytics.alerts_topic == self.analytics.incidents_topic {
            bad(
                "analytics.incidents_topic".into(),
                "must differ from alerts_topic".into(),
            );
        }
        for (leg, bound) in &self.slo {
            if !labels.contains(leg) {
                bad(format!("slo.{leg}"), "no such leg".into());
            }
            if !(bound.is_finite() && *bound > 0.0) {
                bad(format!("slo.{leg}"), "bound must be positive".into());
            }
        }
        if self.runner.quiesce_budget_ms == 0 {
            bad("runner.quiesce_budget_ms".into(), "must be positive".into());
        }
        if self.runner.retry_interval_ms == 0 {
            bad("runner.retry_interval_ms".into(), "must be positive".into());
        }

        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ScenarioConfig::parse(&text)
}
