//! Collapses bursts of alerts from one source into incidents.

use std::collections::BTreeMap;

use chrono::Duration;
use serde::Serialize;
use serde_json::{Map, Value};

use super::assess::{analytics_envelope, Alert};
use crate::envelope::TelemetryEnvelope;
use crate::ids::IdGenerator;
use crate::time::{duration_ms, format_instant, Instant};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Incident {
    pub count: usize,
    pub sources: Vec<String>,
    pub window_start: Instant,
    pub window_end: Instant,
    /// First alert of the burst.
    pub representative: Alert,
}

impl Incident {
    /// Logs envelope for the incidents topic.
    pub fn to_envelope(&self, ids: &mut IdGenerator) -> TelemetryEnvelope {
        let mut data = Map::new();
        data.insert("kind".into(), Value::from("incident"));
        data.insert("count".into(), Value::from(self.count as u64));
        data.insert("sources".into(), Value::from(self.sources.join(",")));
        data.insert("window_start".into(), Value::from(format_instant(&self.window_start)));
        data.insert("window_end".into(), Value::from(format_instant(&self.window_end)));
        data.insert("rule_id".into(), Value::from(self.representative.rule_id.clone()));
        data.insert("observed".into(), Value::from(self.representative.observed));
        analytics_envelope(data, self.window_end, ids)
    }

    pub fn span_ms(&self) -> f64 {
        duration_ms(self.window_end - self.window_start)
    }
}

/// An alert joins its source's open incident when it arrives no later than
/// `window` after that incident's previous alert; otherwise it opens a new
/// one. Incidents come back ordered by first alert time, then source.
pub fn correlate_alerts(alerts: &[Alert], window: Duration) -> Vec<Incident> {
    let mut ordered: Vec<&Alert> = alerts.iter().collect();
    ordered.sort_by_key(|a| a.at);
    let mut open: BTreeMap<&str, Incident> = BTreeMap::new();
    let mut done = Vec::new();
    for a in ordered {
        match open.get_mut(a.source.as_str()) {
            Some(inc) if a.at - inc.window_end <= window => {
                inc.count += 1;
                inc.window_end = a.at;
            }
            _ => {
                let fresh = Incident {
                    count: 1,
                    sources: vec![a.source.clone()],
                    window_start: a.at,
                    window_end: a.at,
                    representative: a.clone(),
                };
                if let Some(prev) = open.insert(a.source.as_str(), fresh) {
                    done.push(prev);
                }
            }
        }
    }
    done.extend(open.into_values());
    done.sort_by(|a, b| (a.window_start, &a.sources).cmp(&(b.window_start, &b.sources)));
    done
}
