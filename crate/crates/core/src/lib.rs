//! Desk-scale simulator of a governance platform for cloud-native
//! applications: telemetry ingestion, a two-channel data bus, a
//! converter/filter/aggregator/archiver pipeline, mutable and WORM storage,
//! and pluggable analytics over stage timestamps.

pub mod analytics;
pub mod cna_sim;
pub mod databus;
pub mod dead_letter;
pub mod envelope;
pub mod gateway;
pub mod ids;
pub mod latency;
pub mod pipeline;
pub mod runner;
pub mod scenario;
pub mod storage;
pub mod time;
