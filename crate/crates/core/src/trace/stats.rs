//! Miss-pair clustering statistics.
//!
//! The trace is replayed through a cold 512-line (32 KB, 8-way) LRU L1.
//! Consecutive misses form (source, destination) pairs; duplicates are
//! collapsed so each distinct pair counts once.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TraceRecord;
use crate::cache::{CacheConfig, SetAssocCache};
use crate::compressed::representable;
use crate::LineAddr;

pub const DEFAULT_WINDOW_SIZES: [u64; 4] = [4, 8, 12, 16];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("trace contains no fetches")]
    EmptyTrace,
    #[error("window sizes must be positive")]
    ZeroWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub pairs: u64,
    pub sources: u64,
    /// Pairs whose destination shares every line-address bit above the low
    /// 20 with its source.
    pub delta20_fraction: f64,
    /// Destinations covered by the best 8-line window of their source.
    pub window8_fraction: f64,
    /// (window size, covered destinations) for each requested size.
    pub per_window_histogram: Vec<(u64, u64)>,
}

impl ClusterStats {
    pub fn coverage(&self, window: u64) -> Option<f64> {
        let (_, covered) = self.per_window_histogram.iter().find(|(w, _)| *w == window)?;
        Some(if self.pairs == 0 {
            0.0
        } else {
            *covered as f64 / self.pairs as f64
        })
    }
}

/// Distinct consecutive-miss pairs under a cold default-geometry L1.
pub fn miss_pairs(trace: &[TraceRecord]) -> BTreeSet<(LineAddr, LineAddr)> {
    let mut l1 = SetAssocCache::from_level(&CacheConfig::default().l1i);
    let mut prev: Option<LineAddr> = None;
    let mut pairs = BTreeSet::new();
    for line in trace.iter().filter_map(TraceRecord::line) {
        if l1.touch(line) {
            continue;
        }
        l1.insert(line, None);
        if let Some(src) = prev {
            pairs.insert((src, line));
        }
        prev = Some(line);
    }
    pairs
}

/// Largest number of sorted, distinct points inside any window of `width`
/// consecutive lines.
fn best_window(sorted: &[LineAddr], width: u64) -> u64 {
    let mut best = 0;
    let mut lo = 0;
    for hi in 0..sorted.len() {
        while sorted[hi] - sorted[lo] >= width {
            lo += 1;
        }
        best = best.max(hi - lo + 1);
    }
    best as u64
}

pub fn cluster_stats(trace: &[TraceRecord], window_sizes: &[u64]) -> Result<ClusterStats, StatsError> {
    if !trace.iter().any(TraceRecord::is_fetch) {
        return Err(StatsError::EmptyTrace);
    }
    if window_sizes.contains(&0) {
        return Err(StatsError::ZeroWindow);
    }
    let pairs = miss_pairs(trace);
    let mut by_source: BTreeMap<LineAddr, Vec<LineAddr>> = BTreeMap::new();
    let mut representable_pairs = 0u64;
    for &(src, dst) in &pairs {
        by_source.entry(src).or_default().push(dst);
        if representable(src, dst) {
            representable_pairs += 1;
        }
    }

    let covered = |width: u64| -> u64 { by_source.values().map(|d| best_window(d, width)).sum() };
    let total = pairs.len() as u64;
    let frac = |n: u64| if total == 0 { 0.0 } else { n as f64 / total as f64 };

    Ok(ClusterStats {
        pairs: total,
        sources: by_source.len() as u64,
        delta20_fraction: frac(representable_pairs),
        window8_fraction: frac(covered(8)),
        per_window_histogram: window_sizes.iter().map(|&w| (w, covered(w))).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fetches(lines: impl IntoIterator<Item = u64>) -> Vec<TraceRecord> {
        lines
            .into_iter()
            .map(|l| TraceRecord::Fetch {
                address: l << 6,
                thread_tag: 0,
            })
            .collect()
    }

    #[test]
    fn empty_trace() {
        assert_eq!(cluster_stats(&[], &DEFAULT_WINDOW_SIZES), Err(StatsError::EmptyTrace));
        let only_rpc = [TraceRecord::RpcBegin {
            rpc_id: 1,
            thread_tag: 0,
        }];
        assert_eq!(
            cluster_stats(&only_rpc, &DEFAULT_WINDOW_SIZES),
            Err(StatsError::EmptyTrace)
        );
    }

    #[test]
    fn sequential_is_fully_covered() {
        let s = cluster_stats(&fetches(1000..3000), &DEFAULT_WINDOW_SIZES).unwrap();
        assert_eq!(s.pairs, 1999);
        assert_eq!(s.window8_fraction, 1.0);
        assert_eq!(s.delta20_fraction, 1.0);
    }

    #[test]
    fn far_alternation_is_not_representable() {
        // after the two cold misses both lines stay resident: one pair
        let a = 0u64;
        let b = 1u64 << 21;
        let mut lines = Vec::new();
        for _ in 0..10 {
            lines.push(a);
            lines.push(b);
        }
        let s = cluster_stats(&fetches(lines), &DEFAULT_WINDOW_SIZES).unwrap();
        assert_eq!(s.pairs, 1);
        assert_eq!(s.delta20_fraction, 0.0);
    }

    #[test]
    fn best_window_basic() {
        assert_eq!(best_window(&[0, 7, 8, 15], 8), 2);
        assert_eq!(best_window(&[0, 1, 2, 3, 100], 4), 4);
        assert_eq!(best_window(&[5], 1), 1);
    }
}
