use crate::error::{Error, Result};

/// Nearest-rank percentile summary of a latency sample, in ns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySummary {
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
    pub p100: u64,
    pub mean: f64,
    pub n: usize,
}

/// Value at rank `ceil(p/100 * n)` of an ascending sample.
pub fn nearest_rank(sorted: &[u64], p: u32) -> u64 {
    let n = sorted.len() as u64;
    let rank = (u64::from(p) * n).div_ceil(100).clamp(1, n);
    sorted[(rank - 1) as usize]
}

pub fn percentiles(samples: &[u64]) -> Result<LatencySummary> {
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let sum: u128 = sorted.iter().map(|&v| u128::from(v)).sum();
    Ok(LatencySummary {
        p50: nearest_rank(&sorted, 50),
        p95: nearest_rank(&sorted, 95),
        p99: nearest_rank(&sorted, 99),
        p100: *sorted.last().expect("non-empty"),
        mean: sum as f64 / sorted.len() as f64,
        n: sorted.len(),
    })
}
