//! Reported quantities: MPKI, accuracy/coverage, timeliness classes,
//! pollution, bandwidth, per-RPC latency percentiles, speedup and the
//! weighted utility score.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{AccessResult, FillCause, PrefetchId};
use crate::{Cycle, LineAddr};

/// Guards relative deltas against zero baselines.
pub const EPSILON: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("percentile of an empty sample")]
    EmptySample,
    #[error("reports cover different traces ({baseline} vs {variant} instructions)")]
    MismatchedTraces { baseline: u64, variant: u64 },
    #[error("utility weights must be finite and non-negative")]
    BadWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtilityWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for UtilityWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
        }
    }
}

impl UtilityWeights {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let ok = [self.alpha, self.beta, self.gamma, self.delta]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(MetricsError::BadWeights)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpcLatencies {
    pub p50: Cycle,
    pub p95: Cycle,
    pub p99: Cycle,
}

impl RpcLatencies {
    /// All zero for an empty sample.
    pub fn from_samples(samples: &[Cycle]) -> Self {
        let p = |q| percentile(samples, q).unwrap_or(0);
        Self {
            p50: p(0.5),
            p95: p(0.95),
            p99: p(0.99),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub variant: String,
    pub instructions: u64,
    pub cycles: Cycle,
    pub l1i_misses: u64,
    pub mpki: f64,
    pub mpki_reduction_vs_baseline: f64,
    pub issued: u64,
    pub useful: u64,
    pub useless: u64,
    pub late: u64,
    pub polluting: u64,
    /// Issued prefetches still unresolved when the trace ended.
    pub in_flight_at_end: u64,
    pub prefetch_fills: u64,
    pub accuracy: f64,
    pub coverage: f64,
    pub bandwidth_fills_per_kilo_instr: f64,
    pub rpc_count: u64,
    pub rpc_latencies: RpcLatencies,
    pub utility: f64,
    pub uncovered_destination_fraction: f64,
    pub metadata_bytes: u64,
}

/// Raw counts a report is derived from.
#[derive(Debug, Clone, Default)]
pub struct RawCounts {
    pub instructions: u64,
    pub cycles: Cycle,
    pub l1i_misses: u64,
    pub classes: ClassCounts,
    pub prefetch_fills: u64,
    pub rpc_latencies: Vec<Cycle>,
    pub entangled: u64,
    pub uncovered: u64,
}

impl SimulationReport {
    /// Builds a report with no baseline applied (reduction and utility 0).
    pub fn from_counts(variant: &str, raw: &RawCounts, metadata_bytes: u64) -> Self {
        let instr = raw.instructions;
        let kilo = instr as f64 / 1000.0;
        let per_kilo = |n: u64| if instr == 0 { 0.0 } else { n as f64 / kilo };
        let c = raw.classes;
        let issued = c.issued();
        Self {
            variant: variant.to_string(),
            instructions: instr,
            cycles: raw.cycles,
            l1i_misses: raw.l1i_misses,
            mpki: per_kilo(raw.l1i_misses),
            mpki_reduction_vs_baseline: 0.0,
            issued,
            useful: c.useful,
            useless: c.useless,
            late: c.late,
            polluting: c.polluting,
            in_flight_at_end: c.unresolved,
            prefetch_fills: raw.prefetch_fills,
            accuracy: accuracy(&c),
            coverage: ratio(c.useful, c.useful + raw.l1i_misses),
            bandwidth_fills_per_kilo_instr: per_kilo(raw.prefetch_fills),
            rpc_count: raw.rpc_latencies.len() as u64,
            rpc_latencies: RpcLatencies::from_samples(&raw.rpc_latencies),
            utility: 0.0,
            uncovered_destination_fraction: ratio(raw.uncovered, raw.entangled),
            metadata_bytes,
        }
    }

    /// Fills the baseline-relative fields.
    pub fn apply_baseline(
        &mut self,
        baseline: &SimulationReport,
        weights: &UtilityWeights,
    ) -> Result<(), MetricsError> {
        self.utility = utility(baseline, self, weights)?;
        self.mpki_reduction_vs_baseline = relative_drop(baseline.mpki, self.mpki);
        Ok(())
    }
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

/// Demanded prefetches (timely or late) over issued prefetches.
pub fn accuracy(c: &ClassCounts) -> f64 {
    ratio(c.useful + c.late, c.issued())
}

/// `(base - var) / base`, signed, guarded against a zero base.
pub fn relative_drop(base: f64, var: f64) -> f64 {
    (base - var) / base.max(EPSILON)
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(q * N)` of the
/// sorted sample. `q` is clamped to `[0, 1]`; rank is at least 1.
pub fn percentile(samples: &[Cycle], q: f64) -> Result<Cycle, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let k = nearest_rank(samples.len(), q) - 1;
    let mut v = samples.to_vec();
    let (_, x, _) = v.select_nth_unstable(k);
    Ok(*x)
}

/// 1-based nearest rank. A 1e-9 slack absorbs products such as
/// `0.07 * 100 = 7.000000000000001`.
pub fn nearest_rank(n: usize, q: f64) -> usize {
    let r = (q.clamp(0.0, 1.0) * n as f64 - 1e-9).ceil();
    (r.max(1.0) as usize).min(n)
}

/// Weighted utility of `variant` relative to `baseline`: rewarded P95 and
/// MPKI improvements, penalized extra bandwidth and extra polluting
/// evictions. Every term is a dimensionless one-sided relative delta.
pub fn utility(
    baseline: &SimulationReport,
    variant: &SimulationReport,
    w: &UtilityWeights,
) -> Result<f64, MetricsError> {
    w.validate()?;
    if baseline.instructions != variant.instructions {
        return Err(MetricsError::MismatchedTraces {
            baseline: baseline.instructions,
            variant: variant.instructions,
        });
    }
    let p95b = baseline.rpc_latencies.p95 as f64;
    let p95v = variant.rpc_latencies.p95 as f64;
    let latency = (p95b - p95v).max(0.0) / p95b.max(EPSILON);
    let mpki = (baseline.mpki - variant.mpki).max(0.0) / baseline.mpki.max(EPSILON);
    let bw = (variant.bandwidth_fills_per_kilo_instr - baseline.bandwidth_fills_per_kilo_instr).max(0.0)
        / baseline.bandwidth_fills_per_kilo_instr.max(EPSILON);
    let extra_evictions = variant.polluting.saturating_sub(baseline.polluting) as f64;
    let evict = extra_evictions / (variant.instructions as f64 / 1000.0).max(1.0);
    Ok(w.alpha * latency + w.beta * mpki - w.gamma * bw - w.delta * evict)
}

pub fn speedup(baseline_cycles: Cycle, variant_cycles: Cycle) -> f64 {
    baseline_cycles as f64 / (variant_cycles as f64).max(EPSILON)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: String,
    pub speedup: f64,
    pub mpki_reduction: f64,
    pub accuracy: f64,
    pub coverage: f64,
    pub bandwidth: f64,
    pub p95: Cycle,
    pub utility: f64,
    pub uncovered_fraction: f64,
    pub budget_bytes: u64,
}

pub const COMPARISON_COLUMNS: [&str; 10] = [
    "variant",
    "speedup",
    "mpki_reduction",
    "accuracy",
    "coverage",
    "bandwidth",
    "p95",
    "utility",
    "uncovered_fraction",
    "budget_bytes",
];

impl ComparisonRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.speedup,
            self.mpki_reduction,
            self.accuracy,
            self.coverage,
            self.bandwidth,
            self.p95,
            self.utility,
            self.uncovered_fraction,
            self.budget_bytes
        )
    }
}

/// One row per report, ordered by variant name.
pub fn compare(
    baseline: &SimulationReport,
    reports: &[SimulationReport],
    weights: &UtilityWeights,
) -> Result<Vec<ComparisonRow>, MetricsError> {
    let mut rows = reports
        .iter()
        .map(|r| {
            Ok(ComparisonRow {
                variant: r.variant.clone(),
                speedup: speedup(baseline.cycles, r.cycles),
                mpki_reduction: relative_drop(baseline.mpki, r.mpki),
                accuracy: r.accuracy,
                coverage: r.coverage,
                bandwidth: r.bandwidth_fills_per_kilo_instr,
                p95: r.rpc_latencies.p95,
                utility: utility(baseline, r, weights)?,
                uncovered_fraction: r.uncovered_destination_fraction,
                budget_bytes: r.metadata_bytes,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by(|a, b| a.variant.cmp(&b.variant));
    Ok(rows)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Spearman rank correlation. `None` for fewer than two points, unequal
/// lengths, or a constant series.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    pearson(&ranks(xs), &ranks(ys))
}

// ---------------------------------------------------------------------------
// Prefetch classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrefetchClass {
    Useful,
    Late,
    Useless,
    Polluting,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub useful: u64,
    pub late: u64,
    pub useless: u64,
    pub polluting: u64,
    pub unresolved: u64,
}

impl ClassCounts {
    pub fn issued(&self) -> u64 {
        self.useful + self.late + self.useless + self.polluting + self.unresolved
    }

    pub fn add(&mut self, class: PrefetchClass) {
        match class {
            PrefetchClass::Useful => self.useful += 1,
            PrefetchClass::Late => self.late += 1,
            PrefetchClass::Useless => self.useless += 1,
            PrefetchClass::Polluting => self.polluting += 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Tracked<T> {
    line: LineAddr,
    issue: Cycle,
    measured: bool,
    /// `Some(late)` once demanded inside the horizon.
    demanded: Option<bool>,
    polluting: bool,
    evicted_unused: bool,
    tag: T,
}

impl<T> Tracked<T> {
    fn class(&self) -> Option<PrefetchClass> {
        if self.polluting {
            Some(PrefetchClass::Polluting)
        } else {
            match self.demanded {
                Some(true) => Some(PrefetchClass::Late),
                Some(false) => Some(PrefetchClass::Useful),
                None => None,
            }
        }
    }
}

/// Final classification of one prefetch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution<T> {
    pub id: PrefetchId,
    pub line: LineAddr,
    pub class: PrefetchClass,
    pub tag: T,
}

/// Classifies every issued prefetch once its horizon has passed.
///
/// A prefetch demanded while in flight is late, demanded after its fill is
/// useful, and never demanded is useless. It is polluting if its fill
/// displaced a line that was demand-missed again before the prefetch's
/// horizon ran out; pollution overrides the other classes. Displaced lines
/// are remembered in a ghost list keyed by line.
#[derive(Debug, Clone)]
pub struct PrefetchTracker<T> {
    horizon: Cycle,
    live: BTreeMap<PrefetchId, Tracked<T>>,
    maturity: BinaryHeap<Reverse<(Cycle, PrefetchId)>>,
    ghosts: HashMap<LineAddr, PrefetchId>,
    counts: ClassCounts,
}

impl<T: Copy> PrefetchTracker<T> {
    pub fn new(horizon: Cycle) -> Self {
        Self {
            horizon,
            live: BTreeMap::new(),
            maturity: BinaryHeap::new(),
            ghosts: HashMap::new(),
            counts: ClassCounts::default(),
        }
    }

    pub fn horizon(&self) -> Cycle {
        self.horizon
    }

    /// Counts over measured prefetches resolved so far.
    pub fn counts(&self) -> ClassCounts {
        self.counts
    }

    pub fn pending(&self) -> usize {
        self.live.len()
    }

    pub fn on_issue(&mut self, id: PrefetchId, line: LineAddr, at: Cycle, measured: bool, tag: T) {
        self.live.insert(
            id,
            Tracked {
                line,
                issue: at,
                measured,
                demanded: None,
                polluting: false,
                evicted_unused: false,
                tag,
            },
        );
        self.maturity.push(Reverse((at + self.horizon, id)));
    }

    /// A demand access at `now`.
    pub fn on_demand(&mut self, line: LineAddr, now: Cycle, access: &AccessResult) {
        if let Some(t) = access.prefetch.and_then(|id| self.live.get_mut(&id)) {
            if now <= t.issue + self.horizon {
                t.demanded = Some(access.late);
            }
        }
        if access.is_l1_miss() {
            if let Some(id) = self.ghosts.remove(&line) {
                if let Some(t) = self.live.get_mut(&id) {
                    if now <= t.issue + self.horizon {
                        t.polluting = true;
                    }
                }
            }
        }
    }

    /// An L1 eviction reported by the cache. `unused` is the prefetch whose
    /// fill left without ever being demanded.
    pub fn on_evict(&mut self, line: LineAddr, cause: FillCause, unused: Option<PrefetchId>) {
        if let Some(t) = unused.and_then(|id| self.live.get_mut(&id)) {
            t.evicted_unused = true;
        }
        if let FillCause::Prefetch(id) = cause {
            if self.live.contains_key(&id) {
                self.ghosts.insert(line, id);
            }
        }
    }

    /// An L1 fill: the line is back, so it can no longer re-miss.
    pub fn on_fill(&mut self, line: LineAddr) {
        self.ghosts.remove(&line);
    }

    fn resolve(&mut self, id: PrefetchId, out: &mut Vec<Resolution<T>>) {
        let Some(t) = self.live.remove(&id) else { return };
        let class = t.class().unwrap_or(PrefetchClass::Useless);
        if t.measured {
            self.counts.add(class);
        }
        out.push(Resolution {
            id,
            line: t.line,
            class,
            tag: t.tag,
        });
    }

    /// Resolves every prefetch whose horizon ended strictly before `now`.
    pub fn advance(&mut self, now: Cycle) -> Vec<Resolution<T>> {
        let mut out = Vec::new();
        while let Some(&Reverse((m, id))) = self.maturity.peek() {
            if m >= now {
                break;
            }
            self.maturity.pop();
            self.resolve(id, &mut out);
        }
        if self.ghosts.len() > 4 * self.live.len() + 1024 {
            let live = &self.live;
            self.ghosts.retain(|_, id| live.contains_key(id));
        }
        out
    }

    /// End of trace: prefetches that were demanded or polluted keep their
    /// class, prefetches whose fill was evicted unused are useless, and the
    /// rest are counted as unresolved.
    pub fn finish(&mut self) -> Vec<Resolution<T>> {
        let mut out = Vec::new();
        for (id, t) in std::mem::take(&mut self.live) {
            let class = match t.class() {
                Some(c) => Some(c),
                None if t.evicted_unused => Some(PrefetchClass::Useless),
                None => None,
            };
            match class {
                Some(class) => {
                    if t.measured {
                        self.counts.add(class);
                    }
                    out.push(Resolution {
                        id,
                        line: t.line,
                        class,
                        tag: t.tag,
                    });
                }
                None if t.measured => self.counts.unresolved += 1,
                None => {}
            }
        }
        self.maturity.clear();
        self.ghosts.clear();
        out
    }
}
