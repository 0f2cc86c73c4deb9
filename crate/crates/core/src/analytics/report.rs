//! Per-(csp, leg) statistics and box-plot exports.

use std::collections::BTreeMap;

use serde::Serialize;

use super::legs::LegDelayRecord;
use super::stats::{box_plot, summarize_stats, EmptySample, SummaryStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    StatsJson,
    BoxplotCsv,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Group {
    pub csp: String,
    pub leg: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStats {
    pub group: Group,
    #[serde(flatten)]
    pub stats: SummaryStats,
}

/// Delay samples per group, in record order.
pub fn group_samples(records: &[LegDelayRecord]) -> BTreeMap<Group, Vec<f64>> {
    let mut groups: BTreeMap<Group, Vec<f64>> = BTreeMap::new();
    for r in records {
        for (leg, &ms) in &r.delays {
            groups
                .entry(Group {
                    csp: r.csp.as_str().to_string(),
                    leg: leg.clone(),
                })
                .or_default()
                .push(ms);
        }
    }
    groups
}

pub fn group_stats(records: &[LegDelayRecord]) -> Result<Vec<GroupStats>, EmptySample> {
    let groups = group_samples(records);
    if groups.is_empty() {
        return Err(EmptySample);
    }
    groups
        .into_iter()
        .map(|(group, xs)| {
            Ok(GroupStats {
                group,
                stats: summarize_stats(&xs)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct BoxRow<'a> {
    csp: &'a str,
    leg: &'a str,
    q1: f64,
    median: f64,
    q3: f64,
    lo_whisker: f64,
    hi_whisker: f64,
    outliers: String,
}

pub fn export_report(records: &[LegDelayRecord], format: ReportFormat) -> Result<Vec<u8>, EmptySample> {
    match format {
        ReportFormat::StatsJson => {
            let stats = group_stats(records)?;
            let mut out = serde_json::to_vec_pretty(&stats).expect("stats serialize");
            out.push(b'\n');
            Ok(out)
        }
        ReportFormat::BoxplotCsv => {
            let groups = group_samples(records);
            if groups.is_empty() {
                return Err(EmptySample);
            }
            let mut w = csv::Writer::from_writer(Vec::new());
            for (g, xs) in &groups {
                let b = box_plot(xs)?;
                let outliers: Vec<String> = b.outliers.iter().map(f64::to_string).collect();
                w.serialize(BoxRow {
                    csp: &g.csp,
                    leg: &g.leg,
                    q1: b.q1,
                    median: b.median,
                    q3: b.q3,
                    lo_whisker: b.lo_whisker,
                    hi_whisker: b.hi_whisker,
                    outliers: outliers.join(";"),
                })
                .expect("in-memory csv write");
            }
            Ok(w.into_inner().expect("in-memory csv flush"))
        }
    }
}
