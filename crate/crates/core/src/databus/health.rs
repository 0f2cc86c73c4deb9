//! Heartbeat-driven health of the primary channel.
//!
//! ```text
//!            missed >= threshold            beat arrives
//!  PRIMARY ───────────────────▶ FAILED_OVER ───────────▶ RECOVERING
//!     ▲                              ▲                        │
//!     │    one clean interval        │   missed >= threshold  │
//!     └──────────────────────────────┼────────────────────────┘
//!                                    └────────────────────────┘
//! ```
//!
//! `missed_beats` counts whole beat intervals elapsed since the last beat.

use std::fmt;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BusState {
    Primary,
    FailedOver,
    Recovering,
}

impl fmt::Display for BusState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BusState::Primary => "PRIMARY",
            BusState::FailedOver => "FAILED_OVER",
            BusState::Recovering => "RECOVERING",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeartbeatConfig {
    pub beat_interval: Duration,
    pub miss_threshold: u32,
}

impl HeartbeatConfig {
    pub fn new(beat_interval: Duration, miss_threshold: u32) -> Self {
        assert!(beat_interval > Duration::zero(), "beat interval must be positive");
        assert!(miss_threshold >= 1, "miss threshold must be at least 1");
        Self {
            beat_interval,
            miss_threshold,
        }
    }

    /// Worst-case time from the last beat to detection, plus one tick of slack.
    pub fn failover_bound(&self) -> Duration {
        self.beat_interval * (self.miss_threshold as i32 + 1)
    }
}

impl Default for HeartbeatConfig {
    fn default() -> Self {
        Self::new(Duration::milliseconds(500), 3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BusHealth {
    pub state: BusState,
    pub missed_beats: u32,
    pub last_beat: Instant,
    /// When the current state was entered.
    pub since: Instant,
}

impl BusHealth {
    pub fn healthy(now: Instant) -> Self {
        Self {
            state: BusState::Primary,
            missed_beats: 0,
            last_beat: now,
            since: now,
        }
    }

    pub fn record_beat(self, now: Instant) -> Self {
        let mut next = self;
        next.last_beat = next.last_beat.max(now);
        next.missed_beats = 0;
        if next.state == BusState::FailedOver {
            next.state = BusState::Recovering;
            next.since = now;
        }
        next
    }

    pub fn monitor(self, cfg: &HeartbeatConfig, now: Instant) -> Self {
        monitor_heartbeat(self, cfg.beat_interval, cfg.miss_threshold, now)
    }
}

/// Advances the health state machine to `now`.
pub fn monitor_heartbeat(health: BusHealth, beat_interval: Duration, miss_threshold: u32, now: Instant) -> BusHealth {
    let mut next = health;
    let silent = now - health.last_beat;
    let interval_us = beat_interval.num_microseconds().unwrap_or(i64::MAX).max(1);
    let missed = (silent.num_microseconds().unwrap_or(0).max(0) / interval_us) as u32;
    next.missed_beats = missed;
    match health.state {
        BusState::Primary if missed >= miss_threshold => {
            next.state = BusState::FailedOver;
            next.since = now;
        }
        BusState::Recovering if missed >= miss_threshold => {
            next.state = BusState::FailedOver;
            next.since = now;
        }
        BusState::Recovering if missed == 0 && now - health.since >= beat_interval => {
            next.state = BusState::Primary;
            next.since = now;
        }
        _ => {}
    }
    next
}
