//! Deterministic trace replay.
//!
//! Each fetch costs one issue cycle plus its access latency, serialized.
//! Per fetch, in order: pending prefetch fills up to `now` are installed,
//! matured prefetches are classified and fed back to their metadata, the
//! demand access is serviced, a miss is entangled with the history source
//! that would have hidden it, and the line (if it starts a new line run)
//! triggers correlation prefetches alongside the next-line prefetcher.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{
    AccessResult, CacheConfig, CacheHierarchy, ConfigError, FillCause, L1Event, NextLinePrefetcher, PrefetchId,
    PrefetchIssue,
};
use crate::compressed::CompressedEntry;
use crate::controller::{
    CalibrationRecord, ControllerConfig, ControllerState, Decision, FeatureInputs, FeatureVector, LedgerCounts,
};
use crate::eip::{EntangleTable, HistoryBuffer};
use crate::hierarchy::{self, BudgetConfig, EntangleOutcome, MetadataHierarchy, VirtualTable, TABLE_ENTRY_BITS};
use crate::metrics::{PrefetchClass, PrefetchTracker, RawCounts, Resolution, SimulationReport};
use crate::trace::TraceRecord;
use crate::{Cycle, LineAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Next-line prefetching only; the comparison baseline.
    NextLineOnly,
    /// Full-address entangling table.
    Eip,
    /// Compressed entries in a flat table read at L1 speed.
    Ceip,
    /// Compressed entries held only in the virtualized table (L2 delay on
    /// every trigger).
    CeipVirtual,
    /// L1-attached entries backed by the virtualized table.
    Cheip,
    /// CHEIP gated by the online controller.
    CheipMl,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::NextLineOnly,
        Variant::Eip,
        Variant::Ceip,
        Variant::CeipVirtual,
        Variant::Cheip,
        Variant::CheipMl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NextLineOnly => "next-line",
            Variant::Eip => "eip",
            Variant::Ceip => "ceip",
            Variant::CeipVirtual => "ceip-virtual",
            Variant::Cheip => "cheip",
            Variant::CheipMl => "cheip-ml",
        }
    }

    fn compressed(self) -> bool {
        matches!(
            self,
            Variant::Ceip | Variant::CeipVirtual | Variant::Cheip | Variant::CheipMl
        )
    }

    fn attached(self) -> bool {
        matches!(self, Variant::Cheip | Variant::CheipMl)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown variant `{0}` (expected one of next-line, eip, ceip, ceip-virtual, cheip, cheip-ml)")]
pub struct UnknownVariant(pub String);

impl FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub variant: Variant,
    pub cache: CacheConfig,
    /// Geometry of the full-address table, also used by the flat compressed
    /// table so the two compare at equal entry counts.
    pub eip_sets: usize,
    pub eip_ways: usize,
    /// Geometry of the virtualized table behind the L1-attached entries.
    pub table_sets: usize,
    pub table_ways: usize,
    /// Minimum destination confidence that triggers a prefetch.
    pub trigger_confidence: u8,
    /// Window size for the uncontrolled compressed variants.
    pub window_limit: u8,
    pub next_line: bool,
    pub controller: ControllerConfig,
    pub warmup_instructions: u64,
    pub seed: u64,
    pub record_events: bool,
    pub check_invariants: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Cheip,
            cache: CacheConfig::default(),
            eip_sets: 256,
            eip_ways: 16,
            table_sets: 128,
            table_ways: 16,
            trigger_confidence: 1,
            window_limit: 8,
            next_line: true,
            controller: ControllerConfig::default(),
            warmup_instructions: 0,
            seed: 1,
            record_events: false,
            check_invariants: false,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error(transparent)]
    Cache(#[from] ConfigError),
    #[error("{name} table needs a power-of-two set count and at least one way (got {sets} x {ways})")]
    Table {
        name: &'static str,
        sets: usize,
        ways: usize,
    },
    #[error("window limit must be 4, 8 or 12 (got {0})")]
    WindowLimit(u8),
    #[error("trigger confidence must be in 1..=3 (got {0})")]
    TriggerConfidence(u8),
    #[error("warmup of {warmup} instructions leaves nothing of a {fetches}-instruction trace")]
    Warmup { warmup: u64, fetches: u64 },
    #[error("invariant violated at fetch {fetch}: {what}")]
    Invariant { fetch: u64, what: String },
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.cache.validate()?;
        for (name, sets, ways) in [
            ("eip", self.eip_sets, self.eip_ways),
            ("virtual", self.table_sets, self.table_ways),
        ] {
            if !sets.is_power_of_two() || ways == 0 {
                return Err(SimError::Table { name, sets, ways });
            }
        }
        if ![4, 8, 12].contains(&self.window_limit) {
            return Err(SimError::WindowLimit(self.window_limit));
        }
        if !(1..=3).contains(&self.trigger_confidence) {
            return Err(SimError::TriggerConfidence(self.trigger_confidence));
        }
        Ok(())
    }

    /// On-chip metadata bytes of the configured variant.
    pub fn metadata_bytes(&self) -> u64 {
        let history = hierarchy::budget(&BudgetConfig {
            history_entries: 64,
            l1_lines: 0,
            table_entries: 0,
        })
        .total_bytes;
        let eip_entries = (self.eip_sets * self.eip_ways) as u64;
        match self.variant {
            Variant::NextLineOnly => 0,
            Variant::Eip => history + (eip_entries * EntangleTable::entry_bits()).div_ceil(8),
            Variant::Ceip => history + (eip_entries * u64::from(TABLE_ENTRY_BITS)).div_ceil(8),
            Variant::CeipVirtual => {
                history + ((self.table_sets * self.table_ways) as u64 * u64::from(TABLE_ENTRY_BITS)).div_ceil(8)
            }
            Variant::Cheip | Variant::CheipMl => {
                hierarchy::budget(&BudgetConfig {
                    history_entries: 64,
                    l1_lines: self.cache.l1i.lines() as u64,
                    table_entries: (self.table_sets * self.table_ways) as u64,
                })
                .total_bytes
            }
        }
    }
}

/// Raw per-fetch log for replay oracles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimEvent {
    Issue {
        id: PrefetchId,
        line: LineAddr,
        at: Cycle,
    },
    Demand {
        cycle: Cycle,
        line: LineAddr,
        l1_miss: bool,
        late: bool,
        consumed: Option<PrefetchId>,
    },
    Evict {
        line: LineAddr,
        by: Option<PrefetchId>,
        unused: Option<PrefetchId>,
    },
    Fill {
        line: LineAddr,
    },
    End {
        cycle: Cycle,
    },
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub report: SimulationReport,
    pub calibration: Vec<CalibrationRecord>,
    pub events: Vec<SimEvent>,
    pub controller: Option<LedgerCounts>,
    /// Final compressed metadata, for dumps.
    pub metadata: Option<MetadataHierarchy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    NextLine,
    Correlation { source: LineAddr, decision: Option<u64> },
}

enum Store {
    None,
    Full(EntangleTable),
    Compressed(MetadataHierarchy),
}

impl Store {
    /// `Some(covered)` unless the pair was ignored.
    fn entangle(&mut self, source: LineAddr, destination: LineAddr) -> Option<bool> {
        match self {
            Store::None => None,
            Store::Full(t) => (source != destination).then(|| {
                t.entangle(source, destination);
                true
            }),
            Store::Compressed(h) => match h.entangle(source, destination) {
                EntangleOutcome::Covered => Some(true),
                EntangleOutcome::Uncovered => Some(false),
                EntangleOutcome::Ignored => None,
            },
        }
    }

    fn adjust(&mut self, source: LineAddr, destination: LineAddr, up: bool) {
        match self {
            Store::None => {}
            Store::Full(t) => t.adjust(source, destination, up),
            Store::Compressed(h) => h.adjust(source, destination, up),
        }
    }
}

/// Last-64 outcome history of one source's prefetches.
#[derive(Debug, Clone, Copy, Default)]
struct SourceStats {
    hits: u64,
    polluted: u64,
    n: u32,
}

impl SourceStats {
    fn push(&mut self, hit: bool, polluted: bool) {
        self.hits = self.hits << 1 | u64::from(hit);
        self.polluted = self.polluted << 1 | u64::from(polluted);
        self.n = (self.n + 1).min(64);
    }

    fn rate(bits: u64, n: u32) -> f64 {
        if n == 0 {
            return 0.0;
        }
        let mask = if n == 64 { u64::MAX } else { (1 << n) - 1 };
        f64::from((bits & mask).count_ones()) / f64::from(n)
    }
}

const SHORT_LOOP_FETCHES: u64 = 32;

struct Engine<'c> {
    cfg: &'c SimConfig,
    cache: CacheHierarchy,
    tracker: PrefetchTracker<Origin>,
    history: HistoryBuffer,
    store: Store,
    controller: Option<ControllerState>,
    next_line: NextLinePrefetcher,
    source_stats: HashMap<LineAddr, SourceStats>,
    last_seen: HashMap<LineAddr, u64>,
    events: Vec<SimEvent>,
    measuring: bool,
    entangled: u64,
    uncovered: u64,
}

impl Engine<'_> {
    fn log(&mut self, e: SimEvent) {
        if self.cfg.record_events {
            self.events.push(e);
        }
    }

    fn drain_cache_events(&mut self) {
        let events: Vec<L1Event> = self.cache.drain_events().collect();
        for e in events {
            match e {
                L1Event::Evicted {
                    line,
                    slot,
                    cause,
                    unused_prefetch,
                } => {
                    if let Store::Compressed(h) = &mut self.store {
                        if self.cfg.variant.attached() {
                            h.on_l1_evict(line, slot);
                        }
                    }
                    self.tracker.on_evict(line, cause, unused_prefetch);
                    let by = match cause {
                        FillCause::Prefetch(id) => Some(id),
                        FillCause::Demand => None,
                    };
                    self.log(SimEvent::Evict {
                        line,
                        by,
                        unused: unused_prefetch,
                    });
                }
                L1Event::Filled { line, slot, .. } => {
                    if let Store::Compressed(h) = &mut self.store {
                        if self.cfg.variant.attached() {
                            h.on_l1_fill(line, slot);
                        }
                    }
                    self.tracker.on_fill(line);
                    self.log(SimEvent::Fill { line });
                }
            }
        }
    }

    fn feedback(&mut self, resolved: Vec<Resolution<Origin>>) {
        for r in resolved {
            let Origin::Correlation { source, decision } = r.tag else {
                continue;
            };
            let hit = matches!(r.class, PrefetchClass::Useful | PrefetchClass::Late);
            let polluting = r.class == PrefetchClass::Polluting;
            self.store.adjust(source, r.line, hit);
            if let Some(c) = &mut self.controller {
                if let Some(d) = decision {
                    c.report(d, hit, r.class == PrefetchClass::Useless, polluting);
                }
                self.source_stats.entry(source).or_default().push(hit, polluting);
            }
        }
    }

    fn issue(&mut self, line: LineAddr, at: Cycle, origin: Origin) {
        if let PrefetchIssue::Issued(id) = self.cache.issue_prefetch(line, at) {
            self.tracker.on_issue(id, line, at, self.measuring, origin);
            if let (Origin::Correlation { decision: Some(d), .. }, Some(c)) = (origin, &mut self.controller) {
                c.attach(d);
            }
            self.log(SimEvent::Issue { id, line, at });
        }
    }

    fn features(&self, line: LineAddr, entry: &CompressedEntry, fetch: u64, thread_tag: u8) -> FeatureVector {
        let stats = self.source_stats.get(&line).copied().unwrap_or_default();
        let short_loop = self
            .last_seen
            .get(&line)
            .is_some_and(|&f| fetch - f <= SHORT_LOOP_FETCHES);
        FeatureVector::build(&FeatureInputs {
            base_delta: entry.decode(line) as i64 - line as i64,
            marked_offsets: entry.marked(),
            recent_hit_rate: SourceStats::rate(stats.hits, stats.n),
            pollution_rate: SourceStats::rate(stats.polluted, stats.n),
            short_loop,
            thread_tag,
        })
    }

    fn trigger(&mut self, line: LineAddr, now: Cycle, fetch: u64, thread_tag: u8) {
        let threshold = self.cfg.trigger_confidence;
        let (entry, delay) = match &mut self.store {
            Store::None => return,
            Store::Full(t) => {
                for target in t.trigger(line, threshold) {
                    self.issue(
                        target,
                        now,
                        Origin::Correlation {
                            source: line,
                            decision: None,
                        },
                    );
                }
                return;
            }
            Store::Compressed(h) => match h.lookup_for_trigger(line) {
                Some((entry, delay, _)) => (entry, delay),
                None => return,
            },
        };
        let at = now + delay;
        let x = self
            .controller
            .is_some()
            .then(|| self.features(line, &entry, fetch, thread_tag));
        let (window, decision) = if let (Some(x), Some(c)) = (x, self.controller.as_mut()) {
            let cache = &self.cache;
            let hypothetical = |w: u8| {
                let targets = entry.targets(line, threshold, w);
                let bandwidth = targets
                    .iter()
                    .filter(|&&t| !cache.l1().contains(t) && !cache.in_flight(t))
                    .count();
                (targets, bandwidth as u32)
            };
            match c.decide(x, now, line, hypothetical) {
                (Decision::Issue { window }, id) => (window, id),
                (Decision::Skip, _) => return,
            }
        } else {
            (self.cfg.window_limit, None)
        };
        for target in entry.targets(line, threshold, window) {
            self.issue(target, at, Origin::Correlation { source: line, decision });
        }
    }

    fn check(&self, fetch: u64, now: Cycle) -> Result<(), SimError> {
        let fail = |what: &str| {
            Err(SimError::Invariant {
                fetch,
                what: what.to_string(),
            })
        };
        if !self.cache.inclusion_holds() {
            return fail("inclusion");
        }
        if self.cache.tokens_used_in_window(now) > self.cache.config().prefetch_tokens_per_kcycle {
            return fail("bandwidth tokens");
        }
        if let Store::Compressed(h) = &self.store {
            let l1 = self.cache.l1();
            for slot in 0..h.attached_slots() {
                let expected = if self.cfg.variant.attached() {
                    l1.line_at(slot)
                } else {
                    None
                };
                if h.attached_line(slot) != expected {
                    return fail("attached slot does not track its L1 line");
                }
            }
            for line in h.live_sources() {
                if h.attached_entry(line).is_some() && h.table().contains(line) {
                    return fail("source has both an attached and a table entry");
                }
            }
        }
        Ok(())
    }
}

/// Replays `records` under `cfg`.
pub fn simulate(records: &[TraceRecord], cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let fetches = records.iter().filter(|r| r.is_fetch()).count() as u64;
    if cfg.warmup_instructions >= fetches {
        return Err(SimError::Warmup {
            warmup: cfg.warmup_instructions,
            fetches,
        });
    }

    let cache = CacheHierarchy::new(cfg.cache.clone())?;
    let store = match cfg.variant {
        Variant::NextLineOnly => Store::None,
        Variant::Eip => Store::Full(EntangleTable::new(cfg.eip_sets, cfg.eip_ways)),
        v => {
            let (sets, ways, delay) = match v {
                Variant::Ceip => (cfg.eip_sets, cfg.eip_ways, 0),
                _ => (cfg.table_sets, cfg.table_ways, cfg.cache.l2.latency_cycles),
            };
            let l1 = &cfg.cache.l1i;
            Store::Compressed(MetadataHierarchy::new(
                l1.sets(),
                l1.ways,
                VirtualTable::new(sets, ways),
                delay,
            ))
        }
    };
    debug_assert_eq!(matches!(store, Store::Compressed(_)), cfg.variant.compressed());
    let controller = (cfg.variant == Variant::CheipMl).then(|| ControllerState::new(cfg.controller.clone(), cfg.seed));

    let mut e = Engine {
        cfg,
        cache,
        tracker: PrefetchTracker::new(cfg.controller.horizon_cycles),
        history: HistoryBuffer::new(),
        store,
        controller,
        next_line: NextLinePrefetcher { enabled: cfg.next_line },
        source_stats: HashMap::new(),
        last_seen: HashMap::new(),
        events: Vec::new(),
        measuring: cfg.warmup_instructions == 0,
        entangled: 0,
        uncovered: 0,
    };

    let mut now: Cycle = 0;
    let mut fetch: u64 = 0;
    let mut prev_line: Option<LineAddr> = None;
    let mut start_cycle: Cycle = 0;
    let mut start_fills = 0;
    let mut misses = 0;
    let mut open_rpcs: BTreeMap<u32, (Cycle, bool)> = BTreeMap::new();
    let mut rpc_latencies = Vec::new();

    for rec in records {
        let (line, thread_tag) = match *rec {
            TraceRecord::RpcBegin { rpc_id, .. } => {
                open_rpcs.insert(rpc_id, (now, e.measuring));
                continue;
            }
            TraceRecord::RpcEnd { rpc_id, .. } => {
                if let Some((begin, true)) = open_rpcs.remove(&rpc_id) {
                    rpc_latencies.push(now - begin);
                }
                continue;
            }
            TraceRecord::Fetch { address, thread_tag } => (crate::line_of(address), thread_tag),
        };
        if fetch == cfg.warmup_instructions && !e.measuring {
            e.measuring = true;
            start_cycle = now;
            start_fills = e.cache.counters().prefetch_fills;
        }

        e.cache.advance(now);
        e.drain_cache_events();
        let resolved = e.tracker.advance(now);
        e.feedback(resolved);
        if let Some(c) = &mut e.controller {
            c.tick(now);
        }

        let access: AccessResult = e.cache.demand_fetch(line, now);
        e.tracker.on_demand(line, now, &access);
        let miss = access.is_l1_miss();
        if miss && e.measuring {
            misses += 1;
        }
        e.log(SimEvent::Demand {
            cycle: now,
            line,
            l1_miss: miss,
            late: access.late,
            consumed: access.prefetch,
        });
        e.drain_cache_events();

        if miss {
            let fill_latency = cfg.cache.latency(access.hit_level);
            if let Some(source) = e.history.find_source(now, fill_latency) {
                if let Some(covered) = e.store.entangle(source, line) {
                    if e.measuring {
                        e.entangled += 1;
                        e.uncovered += u64::from(!covered);
                    }
                }
            }
        }

        let new_line = prev_line != Some(line);
        if new_line {
            e.history.record_fetch(line, now);
        }
        if let Some(next) = e.next_line.candidate(line, &access) {
            e.issue(next, now, Origin::NextLine);
        }
        if new_line {
            e.trigger(line, now, fetch, thread_tag);
        }
        if e.controller.is_some() {
            e.last_seen.insert(line, fetch);
        }

        now += 1 + access.latency_cycles;
        fetch += 1;
        prev_line = Some(line);
        if cfg.check_invariants {
            e.check(fetch, now)?;
        }
    }

    let resolved = e.tracker.advance(now);
    e.feedback(resolved);
    let resolved = e.tracker.finish();
    e.feedback(resolved);
    e.log(SimEvent::End { cycle: now });

    let raw = RawCounts {
        instructions: fetches - cfg.warmup_instructions,
        cycles: now - start_cycle,
        l1i_misses: misses,
        classes: e.tracker.counts(),
        prefetch_fills: e.cache.counters().prefetch_fills - start_fills,
        rpc_latencies,
        entangled: e.entangled,
        uncovered: e.uncovered,
    };
    let report = SimulationReport::from_counts(cfg.variant.name(), &raw, cfg.metadata_bytes());
    let (calibration, controller) = match e.controller.as_mut() {
        Some(c) => (c.take_calibration_log(), Some(c.counts())),
        None => (Vec::new(), None),
    };
    let metadata = match e.store {
        Store::Compressed(h) => Some(h),
        _ => None,
    };
    Ok(SimOutput {
        report,
        calibration,
        events: e.events,
        controller,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{generate_synthetic, SyntheticWorkloadSpec};

    fn sequential(lines: std::ops::Range<u64>, fetches_per_line: u64) -> Vec<TraceRecord> {
        lines
            .flat_map(|l| {
                (0..fetches_per_line).map(move |k| TraceRecord::Fetch {
                    address: (l << 6) + 16 * k,
                    thread_tag: 0,
                })
            })
            .collect()
    }

    fn small_workload(seed: u64) -> Vec<TraceRecord> {
        generate_synthetic(&SyntheticWorkloadSpec {
            seed,
            record_count: 40_000,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>(), Ok(v));
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        let bad = SimConfig {
            table_sets: 100,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(SimError::Table { .. })));
        let bad = SimConfig {
            window_limit: 6,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(SimError::WindowLimit(6)));
        let bad = SimConfig {
            trigger_confidence: 0,
            ..Default::default()
        };
        assert_eq!(bad.validate(), Err(SimError::TriggerConfidence(0)));
        let t = sequential(0..4, 1);
        let warm = SimConfig {
            warmup_instructions: 4,
            ..Default::default()
        };
        assert!(matches!(simulate(&t, &warm), Err(SimError::Warmup { .. })));
    }

    #[test]
    fn budgets_per_variant() {
        let mut c = SimConfig {
            variant: Variant::Cheip,
            ..Default::default()
        };
        assert_eq!(c.metadata_bytes(), 25_200);
        c.table_sets = 256;
        assert_eq!(c.metadata_bytes(), 47_472);
        c.variant = Variant::NextLineOnly;
        assert_eq!(c.metadata_bytes(), 0);
        c.variant = Variant::Eip;
        assert_eq!(c.metadata_bytes(), 624 + 4096 * 531 / 8);
    }

    #[test]
    fn cycle_accounting_identity() {
        let t = sequential(0..50, 4);
        let cfg = SimConfig {
            variant: Variant::NextLineOnly,
            next_line: false,
            ..Default::default()
        };
        let r = simulate(&t, &cfg).unwrap().report;
        // every line misses to DRAM once, the other three fetches hit L1
        assert_eq!(r.cycles, 50 * (1 + 200) + 150 * (1 + 4));
        assert_eq!(r.l1i_misses, 50);
        assert_eq!(r.issued, 0);
    }

    #[test]
    fn sequential_next_line_is_accurate() {
        let t = sequential(1000..3000, 4);
        let cfg = SimConfig {
            variant: Variant::NextLineOnly,
            ..Default::default()
        };
        let r = simulate(&t, &cfg).unwrap().report;
        assert!(r.accuracy >= 0.95, "accuracy {}", r.accuracy);
        assert_eq!(
            r.issued,
            r.useful + r.late + r.useless + r.polluting + r.in_flight_at_end
        );
    }

    #[test]
    fn warmup_excluded() {
        let t = sequential(0..100, 4);
        let cfg = SimConfig {
            variant: Variant::NextLineOnly,
            next_line: false,
            warmup_instructions: 200,
            ..Default::default()
        };
        let r = simulate(&t, &cfg).unwrap().report;
        assert_eq!(r.instructions, 200);
        assert_eq!(r.l1i_misses, 50);
        assert_eq!(r.cycles, 50 * 201 + 150 * 5);
    }

    #[test]
    fn rpc_latency_measured() {
        let mut t = vec![TraceRecord::RpcBegin {
            rpc_id: 1,
            thread_tag: 0,
        }];
        t.extend(sequential(0..2, 1));
        t.push(TraceRecord::RpcEnd {
            rpc_id: 1,
            thread_tag: 0,
        });
        let cfg = SimConfig {
            variant: Variant::NextLineOnly,
            next_line: false,
            ..Default::default()
        };
        let r = simulate(&t, &cfg).unwrap().report;
        assert_eq!(r.rpc_count, 1);
        assert_eq!(r.rpc_latencies.p50, 402);
    }

    #[test]
    fn invariants_hold_for_every_variant() {
        let t = small_workload(3);
        for v in Variant::ALL {
            let cfg = SimConfig {
                variant: v,
                check_invariants: true,
                ..Default::default()
            };
            let r = simulate(&t[..8000], &cfg).unwrap().report;
            assert_eq!(
                r.issued,
                r.useful + r.late + r.useless + r.polluting + r.in_flight_at_end,
                "{v}"
            );
            assert!((0.0..=1.0).contains(&r.accuracy) && (0.0..=1.0).contains(&r.coverage));
        }
    }

    #[test]
    fn deterministic() {
        let t = small_workload(5);
        for v in [Variant::Eip, Variant::CheipMl] {
            let cfg = SimConfig {
                variant: v,
                ..Default::default()
            };
            let a = simulate(&t, &cfg).unwrap().report;
            let b = simulate(&t, &cfg).unwrap().report;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shadow_matches_baseline_fills() {
        let t = small_workload(7);
        let base = simulate(
            &t,
            &SimConfig {
                variant: Variant::NextLineOnly,
                ..Default::default()
            },
        )
        .unwrap();
        let mut cfg = SimConfig {
            variant: Variant::CheipMl,
            ..Default::default()
        };
        cfg.controller.shadow = true;
        let shadow = simulate(&t, &cfg).unwrap();
        assert_eq!(shadow.report.prefetch_fills, base.report.prefetch_fills);
        assert_eq!(shadow.report.issued, base.report.issued);
        assert_eq!(shadow.report.cycles, base.report.cycles);
        assert!(!shadow.calibration.is_empty());
    }
}
