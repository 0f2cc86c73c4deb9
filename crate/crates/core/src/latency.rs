//! Seeded per-hop latency distributions, in milliseconds.

use chrono::Duration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::time::millis_f64;

/// `lognormal` takes either `mu` (mean of the log, ln-ms) or `median`
/// (milliseconds, `mu = ln(median)`), plus `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase", deny_unknown_fields)]
pub enum LatencyDist {
    Fixed {
        ms: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    Lognormal {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mu: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        median: Option<f64>,
        sigma: f64,
    },
}

impl LatencyDist {
    pub fn fixed(ms: f64) -> Self {
        Self::Fixed { ms }
    }

    pub fn lognormal_median(median: f64, sigma: f64) -> Self {
        Self::Lognormal {
            mu: None,
            median: Some(median),
            sigma,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        match *self {
            Self::Fixed { ms } if !finite_nonneg(ms) => Err("ms must be a non-negative number".into()),
            Self::Uniform { lo, hi } if !(finite_nonneg(lo) && finite_nonneg(hi)) => {
                Err("lo and hi must be non-negative numbers".into())
            }
            Self::Uniform { lo, hi } if lo > hi => Err("lo exceeds hi".into()),
            Self::Lognormal { sigma, .. } if !finite_nonneg(sigma) => Err("sigma must be a non-negative number".into()),
            Self::Lognormal {
                mu: Some(_),
                median: Some(_),
                ..
            } => Err("give mu or median, not both".into()),
            Self::Lognormal {
                mu: None, median: None, ..
            } => Err("lognormal needs mu or median".into()),
            Self::Lognormal { mu: Some(mu), .. } if !mu.is_finite() => Err("mu must be finite".into()),
            Self::Lognormal { median: Some(m), .. } if !(m.is_finite() && m > 0.0) => {
                Err("median must be positive".into())
            }
            _ => Ok(()),
        }
    }

    fn mu(&self) -> f64 {
        match *self {
            Self::Lognormal { mu: Some(mu), .. } => mu,
            Self::Lognormal { median: Some(m), .. } => m.ln(),
            _ => unreachable!("only lognormal has mu"),
        }
    }

    /// Expected value in milliseconds.
    pub fn mean_ms(&self) -> f64 {
        match *self {
            Self::Fixed { ms } => ms,
            Self::Uniform { lo, hi } => (lo + hi) / 2.0,
            Self::Lognormal { sigma, .. } => (self.mu() + sigma * sigma / 2.0).exp(),
        }
    }

    pub fn sample_ms<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Fixed { ms } => ms,
            Self::Uniform { lo, hi } if lo == hi => lo,
            Self::Uniform { lo, hi } => rng.random_range(lo..=hi),
            Self::Lognormal { sigma, .. } => LogNormal::new(self.mu(), sigma)
                .expect("validated parameters")
                .sample(rng),
        }
    }
}

/// One distribution plus its own seeded stream, so adding draws on one hop
/// never shifts another hop's samples.
#[derive(Debug, Clone)]
pub struct HopSampler {
    dist: LatencyDist,
    rng: ChaCha8Rng,
}

impl HopSampler {
    pub fn new(dist: LatencyDist, seed: u64) -> Self {
        Self {
            dist,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dist(&self) -> LatencyDist {
        self.dist
    }

    /// Next latency, rounded to the microsecond.
    pub fn sample(&mut self) -> Duration {
        millis_f64(self.dist.sample_ms(&mut self.rng).max(0.0))
    }
}
