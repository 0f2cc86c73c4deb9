//! Compares an observed runtime snapshot against the desired state.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;

use serde::{Deserialize, Serialize};

use crate::pipeline::FilterRule;

pub const PRESENT: &str = "present";
pub const MISSING: &str = "missing";
pub const ABSENT: &str = "absent";

/// The declared governance configuration. An observed snapshot has the same
/// shape.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesiredState {
    #[serde(default)]
    pub components: BTreeSet<String>,
    pub retention_days: i64,
    #[serde(default)]
    pub topics: BTreeSet<String>,
    #[serde(default)]
    pub filter_rules: Vec<FilterRule>,
    /// Upper bound in milliseconds per leg label, e.g. "AWS Leg 3".
    #[serde(default)]
    pub leg_slos: BTreeMap<String, f64>,
}

pub type ObservedState = DesiredState;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftItem {
    pub field: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<String>,
    pub desired: String,
    pub observed: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftReport {
    pub items: Vec<DriftItem>,
}

impl DriftReport {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }
}

fn item(field: &str, item: Option<&str>, desired: impl Display, observed: impl Display) -> DriftItem {
    DriftItem {
        field: field.to_string(),
        item: item.map(str::to_string),
        desired: desired.to_string(),
        observed: observed.to_string(),
    }
}

fn set_drift(field: &str, desired: &BTreeSet<String>, observed: &BTreeSet<String>, out: &mut Vec<DriftItem>) {
    for name in desired.difference(observed) {
        out.push(item(field, Some(name), PRESENT, MISSING));
    }
    for name in observed.difference(desired) {
        out.push(item(field, Some(name), ABSENT, PRESENT));
    }
}

fn rules_text(rules: &[FilterRule]) -> String {
    serde_json::to_string(rules).expect("rules serialize")
}

/// Every declared field or set member that differs, once each.
pub fn detect_drift(desired: &DesiredState, observed: &ObservedState) -> DriftReport {
    let mut items = Vec::new();
    set_drift("components", &desired.components, &observed.components, &mut items);
    if desired.retention_days != observed.retention_days {
        items.push(item(
            "retention_days",
            None,
            desired.retention_days,
            observed.retention_days,
        ));
    }
    set_drift("topics", &desired.topics, &observed.topics, &mut items);
    if desired.filter_rules != observed.filter_rules {
        items.push(item(
            "filter_rules",
            None,
            rules_text(&desired.filter_rules),
            rules_text(&observed.filter_rules),
        ));
    }
    let legs: BTreeSet<&String> = desired.leg_slos.keys().chain(observed.leg_slos.keys()).collect();
    for leg in legs {
        let show = |v: Option<&f64>| v.map_or(ABSENT.to_string(), f64::to_string);
        let (d, o) = (desired.leg_slos.get(leg), observed.leg_slos.get(leg));
        if d != o {
            items.push(item("leg_slos", Some(leg), show(d), show(o)));
        }
    }
    DriftReport { items }
}
