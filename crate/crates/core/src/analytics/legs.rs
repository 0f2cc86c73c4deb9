//! Leg definitions and per-envelope leg delays.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::envelope::{Csp, StageName, TelemetryEnvelope};
use crate::time::micros_since_epoch;

#[derive(Debug, Error, PartialEq)]
pub enum LegError {
    #[error("{leg}: end precedes start by {delay_ms} ms")]
    NegativeDelay { leg: String, delay_ms: f64 },
    #[error("{0}: start and end stage are the same")]
    SameStage(String),
    #[error("leg definitions: {0}")]
    Parse(String),
}

/// `end - start` between two stage stamps. A definition with a `csp` only
/// applies to envelopes from that provider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegDef {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csp: Option<Csp>,
    pub start: StageName,
    pub end: StageName,
}

impl LegDef {
    pub fn new(name: &str, csp: Option<&str>, start: StageName, end: StageName) -> Result<Self, LegError> {
        let def = Self {
            name: name.to_string(),
            csp: csp.map(Csp::new),
            start,
            end,
        };
        def.validate()?;
        Ok(def)
    }

    pub fn validate(&self) -> Result<(), LegError> {
        if self.start == self.end {
            return Err(LegError::SameStage(self.name.clone()));
        }
        Ok(())
    }

    pub fn applies_to(&self, env: &TelemetryEnvelope) -> bool {
        self.csp.as_ref().is_none_or(|c| *c == env.csp)
    }

    /// "AWS Leg 3" style label.
    pub fn label(&self) -> String {
        match &self.csp {
            Some(c) => format!("{c} {}", self.name),
            None => self.name.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LegCatalog {
    #[serde(rename = "leg", default)]
    pub legs: Vec<LegDef>,
}

impl LegCatalog {
    /// Legs of a queued CNA in resource group `rg` (five legs) and of a
    /// directly ingesting CNA (legs 1, 4 and 5).
    pub fn standard(queued: &[(&str, u32)], direct: &[&str]) -> Self {
        let mut legs = Vec::new();
        let leg = |n: u32, csp: &str, start: StageName, end: StageName| LegDef {
            name: format!("Leg {n}"),
            csp: Some(Csp::new(csp)),
            start,
            end,
        };
        let tail = |legs: &mut Vec<LegDef>, csp: &str| {
            legs.push(leg(4, csp, StageName::ims_gateway(), StageName::ims_converter()));
            legs.push(leg(5, csp, StageName::ims_converter(), StageName::ims_archiver()));
        };
        for &(csp, rg) in queued {
            legs.push(leg(1, csp, StageName::cna(), StageName::rg_gateway(rg)));
            legs.push(leg(2, csp, StageName::rg_gateway(rg), StageName::rg_forwarder(rg)));
            legs.push(leg(3, csp, StageName::rg_forwarder(rg), StageName::ims_gateway()));
            tail(&mut legs, csp);
        }
        for &csp in direct {
            legs.push(leg(1, csp, StageName::cna(), StageName::ims_gateway()));
            tail(&mut legs, csp);
        }
        Self { legs }
    }

    /// AWS queued through resource group 1, IBM direct.
    pub fn reference() -> Self {
        Self::standard(&[("AWS", 1)], &["IBM"])
    }

    pub fn from_toml(text: &str) -> Result<Self, LegError> {
        let cat: Self = toml::from_str(text).map_err(|e| LegError::Parse(e.to_string()))?;
        cat.legs.iter().try_for_each(LegDef::validate)?;
        Ok(cat)
    }

    pub fn load(path: &Path) -> Result<Self, LegError> {
        let text = std::fs::read_to_string(path).map_err(|e| LegError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("leg catalog serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegDelayRecord {
    pub log_id: Uuid,
    pub csp: Csp,
    /// Leg name to delay in milliseconds, in definition order.
    pub delays: IndexMap<String, f64>,
}

/// Delay of every applicable leg whose two stamps are present.
pub fn compute_legs(defs: &[LegDef], env: &TelemetryEnvelope) -> Result<LegDelayRecord, LegError> {
    let mut delays = IndexMap::new();
    for def in defs.iter().filter(|d| d.applies_to(env)) {
        let (Some(start), Some(end)) = (
            env.timestamps.get(def.start.as_str()),
            env.timestamps.get(def.end.as_str()),
        ) else {
            continue;
        };
        let us = micros_since_epoch(&end) - micros_since_epoch(&start);
        let delay_ms = us as f64 / 1000.0;
        if us < 0 {
            return Err(LegError::NegativeDelay {
                leg: def.label(),
                delay_ms,
            });
        }
        delays.insert(def.name.clone(), delay_ms);
    }
    Ok(LegDelayRecord {
        log_id: env.log_id,
        csp: env.csp.clone(),
        delays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::StageTimestamps;
    use crate::time::parse_instant;

    fn load(raw: &str) -> TelemetryEnvelope {
        TelemetryEnvelope::parse_and_validate(raw.as_bytes()).unwrap()
    }

    fn delays(rec: &LegDelayRecord) -> Vec<(&str, f64)> {
        rec.delays.iter().map(|(k, v)| (k.as_str(), *v)).collect()
    }

    #[test]
    fn aws_metrics_sample() {
        let env = load(include_str!("../../tests/fixtures/aws_metrics.json"));
        let rec = compute_legs(&LegCatalog::reference().legs, &env).unwrap();
        assert_eq!(
            delays(&rec),
            vec![
                ("Leg 1", 18.474),
                ("Leg 2", 45.501),
                ("Leg 3", 708.053),
                ("Leg 4", 101.697),
                ("Leg 5", 110.796)
            ]
        );
    }

    #[test]
    fn ibm_metrics_sample() {
        let env = load(include_str!("../../tests/fixtures/ibm_metrics.json"));
        let rec = compute_legs(&LegCatalog::reference().legs, &env).unwrap();
        assert_eq!(
            delays(&rec),
            vec![("Leg 1", 67.236), ("Leg 4", 94.911), ("Leg 5", 134.273)]
        );
    }

    #[test]
    fn origin_only_has_no_legs() {
        let mut env = load(include_str!("../../tests/fixtures/ibm_metrics.json"));
        env.timestamps = StageTimestamps::origin(parse_instant("2024-01-01T00:00:00+00:00").unwrap());
        assert!(compute_legs(&LegCatalog::reference().legs, &env)
            .unwrap()
            .delays
            .is_empty());
    }

    #[test]
    fn backwards_leg_is_an_error() {
        let env = load(include_str!("../../tests/fixtures/aws_metrics.json"));
        let backwards = LegDef::new("Back", None, StageName::ims_archiver(), StageName::cna()).unwrap();
        let err = compute_legs(&[backwards], &env).unwrap_err();
        assert!(matches!(err, LegError::NegativeDelay { .. }));
        assert!(LegDef::new("x", None, StageName::cna(), StageName::cna()).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cat = LegCatalog::reference();
        assert_eq!(cat.legs.len(), 8);
        assert_eq!(LegCatalog::from_toml(&cat.to_toml()).unwrap(), cat);
        let text = "[[leg]]\nname = \"L\"\nstart = \"cna_timestamp\"\nend = \"cna_timestamp\"\n";
        assert!(matches!(LegCatalog::from_toml(text), Err(LegError::SameStage(_))));
    }
}
