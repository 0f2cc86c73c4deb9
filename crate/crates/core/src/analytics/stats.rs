//! Summary statistics and quartiles over millisecond samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("empty sample")]
pub struct EmptySample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (divisor n - 1); zero for a single value.
    pub std: f64,
}

/// Compensated (Neumaier) sum.
fn sum(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for &x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Median of an already sorted, non-empty slice.
fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn summarize_stats(samples: &[f64]) -> Result<SummaryStats, EmptySample> {
    if samples.is_empty() {
        return Err(EmptySample);
    }
    let v = sorted(samples);
    let n = v.len();
    let mean = sum(&v) / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        let dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
        (sum(&dev) / (n - 1) as f64).sqrt()
    };
    Ok(SummaryStats {
        count: n,
        min: v[0],
        max: v[n - 1],
        mean,
        median: median_sorted(&v),
        std,
    })
}

/// Linear-interpolation quantile (Hyndman–Fan type 7) of a sorted slice.
pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    assert!(!v.is_empty() && (0.0..=1.0).contains(&p));
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxPlot {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub lo_whisker: f64,
    pub hi_whisker: f64,
    pub outliers: Vec<f64>,
}

/// Quartiles with Tukey whiskers: each whisker reaches the most extreme
/// sample within 1.5 IQR of its quartile; the rest are outliers.
pub fn box_plot(samples: &[f64]) -> Result<BoxPlot, EmptySample> {
    if samples.is_empty() {
        return Err(EmptySample);
    }
    let v = sorted(samples);
    let q1 = quantile_sorted(&v, 0.25);
    let q3 = quantile_sorted(&v, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = |x: &&f64| **x >= lo_fence && **x <= hi_fence;
    let lo_whisker = *v.iter().find(inside).expect("quartiles lie inside the fences");
    let hi_whisker = *v.iter().rev().find(inside).expect("quartiles lie inside the fences");
    Ok(BoxPlot {
        q1,
        median: median_sorted(&v),
        q3,
        lo_whisker,
        hi_whisker,
        outliers: v.iter().copied().filter(|x| !inside(&x)).collect(),
    })
}
