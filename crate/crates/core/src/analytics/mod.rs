//! Analytics over archived envelopes: leg delays, summary statistics and
//! exports, assessments and alert correlation, and desired-state drift.
//!
//! Everything here is a pure function of its inputs.

pub mod assess;
pub mod correlate;
pub mod drift;
pub mod legs;
pub mod report;
pub mod stats;

pub use assess::{assess, Alert, AssessError, AssessmentKind, AssessmentRule, Observation};
pub use correlate::{correlate_alerts, Incident};
pub use drift::{detect_drift, DesiredState, DriftItem, DriftReport, ObservedState};
pub use legs::{compute_legs, LegCatalog, LegDef, LegDelayRecord, LegError};
pub use report::{export_report, group_samples, group_stats, Group, GroupStats, ReportFormat};
pub use stats::{box_plot, quantile_sorted, summarize_stats, BoxPlot, EmptySample, SummaryStats};
