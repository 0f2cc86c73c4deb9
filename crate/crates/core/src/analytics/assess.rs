//! Explicit, range and baseline assessments producing alerts.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::stats::summarize_stats;
use crate::envelope::{Csp, DataType, StageTimestamps, TelemetryEnvelope};
use crate::ids::IdGenerator;
use crate::time::{format_instant, Instant};

/// Provider name used on envelopes produced by the analytics group itself.
pub const GOVERNANCE_CSP: &str = "GOV";
pub const ANALYTICS_SERVICE: &str = "rg-gov-da";

#[derive(Debug, Error, PartialEq)]
pub enum AssessError {
    #[error("baseline needs {needed} observations, got {got}")]
    InsufficientBaseline { needed: usize, got: usize },
    #[error("rule {id}: {reason}")]
    InvalidRule { id: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AssessmentKind {
    Explicit {
        expected: f64,
    },
    Range {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lo: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hi: Option<f64>,
    },
    Baseline {
        window: usize,
        k: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentRule {
    pub id: String,
    /// Metric path or leg label the observations come from.
    pub target: String,
    #[serde(flatten)]
    pub kind: AssessmentKind,
}

impl AssessmentRule {
    pub fn validate(&self) -> Result<(), AssessError> {
        let bad = |reason: &str| {
            Err(AssessError::InvalidRule {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        match self.kind {
            AssessmentKind::Explicit { expected } if !expected.is_finite() => bad("expected must be finite"),
            AssessmentKind::Range { lo: None, hi: None } => bad("range needs lo, hi or both"),
            AssessmentKind::Range {
                lo: Some(lo),
                hi: Some(hi),
            } if lo > hi => bad("lo exceeds hi"),
            AssessmentKind::Baseline { window: 0, .. } => bad("baseline window must be positive"),
            AssessmentKind::Baseline { k, .. } if !(k > 0.0 && k.is_finite()) => bad("k must be positive"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub source: String,
    pub value: f64,
    pub at: Instant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub rule_id: String,
    pub source: String,
    pub observed: f64,
    pub expected: String,
    pub at: Instant,
}

impl Alert {
    /// Logs envelope for the alerts topic.
    pub fn to_envelope(&self, ids: &mut IdGenerator) -> TelemetryEnvelope {
        let mut data = Map::new();
        data.insert("kind".into(), Value::from("alert"));
        data.insert("rule_id".into(), Value::from(self.rule_id.clone()));
        data.insert("source".into(), Value::from(self.source.clone()));
        data.insert("observed".into(), Value::from(self.observed));
        data.insert("expected".into(), Value::from(self.expected.clone()));
        data.insert("at".into(), Value::from(format_instant(&self.at)));
        analytics_envelope(data, self.at, ids)
    }

    /// Inverse of [`Alert::to_envelope`].
    pub fn from_envelope(env: &TelemetryEnvelope) -> Option<Self> {
        let g = &env.governance_data;
        let text = |k: &str| g.get(k)?.as_str().map(str::to_string);
        if g.get("kind")?.as_str()? != "alert" {
            return None;
        }
        Some(Self {
            rule_id: text("rule_id")?,
            source: text("source")?,
            observed: g.get("observed")?.as_f64()?,
            expected: text("expected")?,
            at: crate::time::parse_instant(g.get("at")?.as_str()?)?,
        })
    }
}

pub(crate) fn analytics_envelope(data: Map<String, Value>, at: Instant, ids: &mut IdGenerator) -> TelemetryEnvelope {
    TelemetryEnvelope {
        csp: Csp::new(GOVERNANCE_CSP),
        data_type: DataType::Logs,
        error: None,
        governance_data: data,
        log_id: ids.next_uuid(),
        service_name: ANALYTICS_SERVICE.to_string(),
        timestamps: StageTimestamps::origin(at),
    }
}

/// Judges `observations` in order. Baseline rules learn mean and sample
/// standard deviation from the first `window` observations and judge the rest.
pub fn assess(rule: &AssessmentRule, observations: &[Observation]) -> Result<Vec<Alert>, AssessError> {
    rule.validate()?;
    let alert = |o: &Observation, expected: String| Alert {
        rule_id: rule.id.clone(),
        source: o.source.clone(),
        observed: o.value,
        expected,
        at: o.at,
    };
    Ok(match rule.kind {
        AssessmentKind::Explicit { expected } => observations
            .iter()
            .filter(|o| o.value != expected)
            .map(|o| alert(o, format!("== {expected}")))
            .collect(),
        AssessmentKind::Range { lo, hi } => {
            let lo_ok = |x: f64| lo.is_none_or(|l| x >= l);
            let hi_ok = |x: f64| hi.is_none_or(|h| x <= h);
            let desc = match (lo, hi) {
                (Some(l), Some(h)) => format!("in [{l}, {h}]"),
                (Some(l), None) => format!(">= {l}"),
                (None, Some(h)) => format!("<= {h}"),
                (None, None) => unreachable!("validated"),
            };
            observations
                .iter()
                .filter(|o| !(lo_ok(o.value) && hi_ok(o.value)))
                .map(|o| alert(o, desc.clone()))
                .collect()
        }
        AssessmentKind::Baseline { window, k } => {
            if observations.len() < window {
                return Err(AssessError::InsufficientBaseline {
                    needed: window,
                    got: observations.len(),
                });
            }
            let training: Vec<f64> = observations[..window].iter().map(|o| o.value).collect();
            let fit = summarize_stats(&training).expect("window is non-empty");
            let band = k * fit.std;
            let desc = format!("within {k} sd of {} (sd {})", fit.mean, fit.std);
            observations[window..]
                .iter()
                .filter(|o| (o.value - fit.mean).abs() > band)
                .map(|o| alert(o, desc.clone()))
                .collect()
        }
    })
}
