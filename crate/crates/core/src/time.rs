//! Instants, wire formatting and the clock sources that drive a run.
//!
//! Every instant in the system is a UTC [`DateTime`] truncated to whole
//! microseconds. The simulated clock only moves forward, which lets retention
//! checks and stage stamps share one source of truth.

use std::sync::atomic::{AtomicI64, Ordering};
use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, SecondsFormat, TimeZone, Utc};

pub type Instant = DateTime<Utc>;

/// Renders `t` the way the canonical document does: RFC 3339, six fractional
/// digits, explicit `+00:00` offset.
pub fn format_instant(t: &Instant) -> String {
    t.to_rfc3339_opts(SecondsFormat::Micros, false)
}

/// Parses an RFC 3339 instant. Only a zero UTC offset and at most microsecond
/// precision are accepted.
pub fn parse_instant(s: &str) -> Option<Instant> {
    let parsed = DateTime::parse_from_rfc3339(s).ok()?;
    if parsed.offset().local_minus_utc() != 0 {
        return None;
    }
    let utc = parsed.with_timezone(&Utc);
    if utc.timestamp_subsec_nanos() % 1_000 != 0 {
        return None;
    }
    Some(utc)
}

pub fn micros_since_epoch(t: &Instant) -> i64 {
    t.timestamp_micros()
}

pub fn from_micros(us: i64) -> Instant {
    Utc.timestamp_micros(us).single().expect("instant in range")
}

/// Drops any sub-microsecond component.
pub fn truncate_micros(t: Instant) -> Instant {
    from_micros(t.timestamp_micros())
}

/// Converts a millisecond value to a duration rounded to the nearest microsecond.
pub fn millis_f64(ms: f64) -> Duration {
    Duration::microseconds((ms * 1_000.0).round() as i64)
}

/// Milliseconds with microsecond resolution.
pub fn duration_ms(d: Duration) -> f64 {
    d.num_microseconds().unwrap_or(i64::MAX) as f64 / 1_000.0
}

/// A source of "now".
///
/// `advance_to` is how the scenario runner moves time: the simulated clock
/// jumps, the wall clock sleeps until the requested offset has elapsed.
pub trait Clock: Send + Sync {
    fn now(&self) -> Instant;

    fn advance_to(&self, target: Instant);

    fn sleep(&self, d: Duration) {
        let target = self.now() + d;
        self.advance_to(target);
    }
}

/// Deterministic logical clock. Never moves backwards.
#[derive(Debug)]
pub struct SimClock {
    now_us: AtomicI64,
}

impl SimClock {
    pub fn starting_at(start: Instant) -> Self {
        Self {
            now_us: AtomicI64::new(start.timestamp_micros()),
        }
    }

    pub fn advance_by(&self, d: Duration) {
        let delta = d.num_microseconds().unwrap_or(0).max(0);
        self.now_us.fetch_add(delta, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now(&self) -> Instant {
        from_micros(self.now_us.load(Ordering::SeqCst))
    }

    fn advance_to(&self, target: Instant) {
        self.now_us.fetch_max(target.timestamp_micros(), Ordering::SeqCst);
    }
}

/// Real time. `advance_to` maps the simulated schedule onto the wall clock,
/// anchored at the instant the clock was created.
#[derive(Debug)]
pub struct WallClock {
    sim_origin: Instant,
    wall_origin: std::time::Instant,
}

impl WallClock {
    pub fn anchored_at(sim_origin: Instant) -> Self {
        Self {
            sim_origin,
            wall_origin: std::time::Instant::now(),
        }
    }
}

impl Clock for WallClock {
    fn now(&self) -> Instant {
        truncate_micros(Utc::now())
    }

    fn advance_to(&self, target: Instant) {
        let offset = (target - self.sim_origin).to_std().unwrap_or_default();
        let elapsed = self.wall_origin.elapsed();
        if offset > elapsed {
            std::thread::sleep(offset - elapsed);
        }
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d.to_std().unwrap_or(StdDuration::ZERO));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_like_golden_samples() {
        let t = parse_instant("2024-09-06T15:13:45.460268+00:00").unwrap();
        assert_eq!(format_instant(&t), "2024-09-06T15:13:45.460268+00:00");
        let whole = parse_instant("2024-09-06T15:13:45+00:00").unwrap();
        assert_eq!(format_instant(&whole), "2024-09-06T15:13:45.000000+00:00");
    }

    #[test]
    fn rejects_offsets_and_nanos() {
        assert!(parse_instant("2024-09-06T15:13:45.460268+02:00").is_none());
        assert!(parse_instant("2024-09-06T15:13:45.460268123+00:00").is_none());
        assert!(parse_instant("yesterday").is_none());
        assert!(parse_instant("2024-09-06T15:13:45.460268Z").is_some());
    }

    #[test]
    fn sim_clock_is_monotone() {
        let start = parse_instant("2024-01-01T00:00:00+00:00").unwrap();
        let clock = SimClock::starting_at(start);
        clock.advance_to(start + Duration::milliseconds(1500));
        clock.advance_to(start);
        assert_eq!(clock.now(), start + Duration::milliseconds(1500));
        clock.sleep(Duration::milliseconds(100));
        assert_eq!(clock.now(), start + Duration::milliseconds(1600));
    }

    #[test]
    fn millis_round_to_micros() {
        assert_eq!(millis_f64(18.4744), Duration::microseconds(18_474));
        assert_eq!(duration_ms(Duration::microseconds(708_053)), 708.053);
    }
}
