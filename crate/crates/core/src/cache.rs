//! Instruction-side memory hierarchy: inclusive L1I/L2/L3 with LRU
//! replacement, DRAM behind them, a token-bucket prefetch issue path with
//! one in-flight fill per line, and the next-line prefetcher.
//!
//! Timing is a serialized in-order fetch engine: the caller charges one
//! issue cycle per fetch plus the access latency returned here.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Cycle, LineAddr, LINE_BYTES};

/// Width of one prefetch token window, in cycles.
pub const TOKEN_WINDOW_CYCLES: Cycle = 1000;

pub type PrefetchId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub size_bytes: u64,
    pub ways: usize,
    pub latency_cycles: Cycle,
}

impl LevelConfig {
    pub fn sets(&self) -> usize {
        (self.size_bytes / (self.ways as u64 * LINE_BYTES)) as usize
    }

    pub fn lines(&self) -> usize {
        (self.size_bytes / LINE_BYTES) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub l1i: LevelConfig,
    pub l2: LevelConfig,
    pub l3: LevelConfig,
    pub dram_latency_cycles: Cycle,
    pub prefetch_tokens_per_kcycle: u32,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            l1i: LevelConfig {
                size_bytes: 32 << 10,
                ways: 8,
                latency_cycles: 4,
            },
            l2: LevelConfig {
                size_bytes: 512 << 10,
                ways: 8,
                latency_cycles: 15,
            },
            l3: LevelConfig {
                size_bytes: 2 << 20,
                ways: 16,
                latency_cycles: 35,
            },
            dram_latency_cycles: 200,
            prefetch_tokens_per_kcycle: 64,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{level}: size {size_bytes} B is not a positive multiple of ways x 64 B ({ways} ways)")]
    Geometry {
        level: &'static str,
        size_bytes: u64,
        ways: usize,
    },
    #[error("latencies must strictly increase down the hierarchy")]
    Latency,
    #[error("prefetch token budget must be positive")]
    Tokens,
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (level, c) in [("l1i", &self.l1i), ("l2", &self.l2), ("l3", &self.l3)] {
            let way_bytes = c.ways as u64 * LINE_BYTES;
            if c.ways == 0 || c.size_bytes == 0 || c.size_bytes % way_bytes != 0 {
                return Err(ConfigError::Geometry {
                    level,
                    size_bytes: c.size_bytes,
                    ways: c.ways,
                });
            }
        }
        let lat = [
            self.l1i.latency_cycles,
            self.l2.latency_cycles,
            self.l3.latency_cycles,
            self.dram_latency_cycles,
        ];
        if lat.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::Latency);
        }
        if self.prefetch_tokens_per_kcycle == 0 {
            return Err(ConfigError::Tokens);
        }
        Ok(())
    }

    pub fn latency(&self, level: HitLevel) -> Cycle {
        match level {
            HitLevel::L1 => self.l1i.latency_cycles,
            HitLevel::L2 => self.l2.latency_cycles,
            HitLevel::L3 => self.l3.latency_cycles,
            HitLevel::Dram => self.dram_latency_cycles,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HitLevel {
    L1,
    L2,
    L3,
    Dram,
}

// ---------------------------------------------------------------------------
// Set-associative LRU array
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
struct Way {
    line: LineAddr,
    valid: bool,
    last_used: u64,
    /// Prefetch that filled this line and has not been demanded yet.
    pending_prefetch: Option<PrefetchId>,
}

/// Result of inserting a line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Insertion {
    /// Flat slot index (`set * ways + way`).
    pub slot: usize,
    pub evicted: Option<Evicted>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Evicted {
    pub line: LineAddr,
    pub unused_prefetch: Option<PrefetchId>,
}

/// A set-associative tag array with true LRU replacement. Set index is the
/// line address modulo the set count.
#[derive(Debug, Clone)]
pub struct SetAssocCache {
    sets: usize,
    ways: usize,
    slots: Vec<Way>,
    clock: u64,
}

impl SetAssocCache {
    pub fn new(sets: usize, ways: usize) -> Self {
        assert!(sets > 0 && ways > 0, "cache needs at least one set and one way");
        Self {
            sets,
            ways,
            slots: vec![Way::default(); sets * ways],
            clock: 0,
        }
    }

    pub fn from_level(level: &LevelConfig) -> Self {
        Self::new(level.sets(), level.ways)
    }

    pub fn sets(&self) -> usize {
        self.sets
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    pub fn set_of(&self, line: LineAddr) -> usize {
        (line % self.sets as u64) as usize
    }

    fn set_range(&self, line: LineAddr) -> std::ops::Range<usize> {
        let s = self.set_of(line) * self.ways;
        s..s + self.ways
    }

    /// Slot holding `line`, without touching LRU state.
    pub fn probe(&self, line: LineAddr) -> Option<usize> {
        self.set_range(line)
            .find(|&i| self.slots[i].valid && self.slots[i].line == line)
    }

    pub fn contains(&self, line: LineAddr) -> bool {
        self.probe(line).is_some()
    }

    /// Marks `line` most recently used. Returns false on a miss.
    pub fn touch(&mut self, line: LineAddr) -> bool {
        match self.probe(line) {
            Some(i) => {
                self.clock += 1;
                self.slots[i].last_used = self.clock;
                true
            }
            None => false,
        }
    }

    /// Inserts `line` as most recently used, evicting the LRU way of a full
    /// set. The line must not already be present.
    pub fn insert(&mut self, line: LineAddr, prefetch: Option<PrefetchId>) -> Insertion {
        debug_assert!(!self.contains(line));
        let range = self.set_range(line);
        let slot = range
            .clone()
            .find(|&i| !self.slots[i].valid)
            .unwrap_or_else(|| range.min_by_key(|&i| self.slots[i].last_used).expect("non-empty set"));
        let old = self.slots[slot];
        let evicted = old.valid.then_some(Evicted {
            line: old.line,
            unused_prefetch: old.pending_prefetch,
        });
        self.clock += 1;
        self.slots[slot] = Way {
            line,
            valid: true,
            last_used: self.clock,
            pending_prefetch: prefetch,
        };
        Insertion { slot, evicted }
    }

    pub fn invalidate(&mut self, line: LineAddr) -> Option<(usize, Evicted)> {
        let slot = self.probe(line)?;
        let old = std::mem::take(&mut self.slots[slot]);
        Some((
            slot,
            Evicted {
                line: old.line,
                unused_prefetch: old.pending_prefetch,
            },
        ))
    }

    /// Clears and returns the first-use prefetch tag of a resident line.
    pub fn take_prefetch_tag(&mut self, line: LineAddr) -> Option<PrefetchId> {
        let slot = self.probe(line)?;
        self.slots[slot].pending_prefetch.take()
    }

    /// Resident lines, in slot order.
    pub fn resident(&self) -> impl Iterator<Item = (usize, LineAddr)> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, w)| w.valid)
            .map(|(i, w)| (i, w.line))
    }

    pub fn line_at(&self, slot: usize) -> Option<LineAddr> {
        let w = &self.slots[slot];
        w.valid.then_some(w.line)
    }
}

// ---------------------------------------------------------------------------
// Hierarchy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessResult {
    pub hit_level: HitLevel,
    pub latency_cycles: Cycle,
    /// L1 line displaced by this access's fill, if any.
    pub evicted_line: Option<LineAddr>,
    /// The demand consumed a prefetched line (first use, timely or late).
    pub fill_was_prefetch: bool,
    /// Prefetch consumed by this demand.
    pub prefetch: Option<PrefetchId>,
    /// The line was still in flight; latency is the remaining fill time.
    pub late: bool,
}

impl AccessResult {
    /// True when the line was not usable in L1 at demand time.
    pub fn is_l1_miss(&self) -> bool {
        self.hit_level != HitLevel::L1 || self.late
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefetchIssue {
    Issued(PrefetchId),
    Duplicate,
    NoBandwidth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillCause {
    Demand,
    Prefetch(PrefetchId),
}

/// L1 state changes, emitted in the order they happen. An eviction is
/// always reported before the fill that caused it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L1Event {
    Evicted {
        line: LineAddr,
        slot: usize,
        cause: FillCause,
        unused_prefetch: Option<PrefetchId>,
    },
    Filled {
        line: LineAddr,
        slot: usize,
        cause: FillCause,
    },
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    id: PrefetchId,
    complete_at: Cycle,
    from: HitLevel,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CacheCounters {
    pub demand_accesses: u64,
    pub l1_misses: u64,
    pub late_hits: u64,
    pub prefetches_issued: u64,
    pub prefetch_fills: u64,
    pub duplicates: u64,
    pub no_bandwidth: u64,
}

pub struct CacheHierarchy {
    config: CacheConfig,
    l1: SetAssocCache,
    l2: SetAssocCache,
    l3: SetAssocCache,
    in_flight: HashMap<LineAddr, InFlight>,
    completions: BinaryHeap<Reverse<(Cycle, PrefetchId, LineAddr)>>,
    tokens_used: BTreeMap<u64, u32>,
    next_id: PrefetchId,
    events: Vec<L1Event>,
    counters: CacheCounters,
}

impl CacheHierarchy {
    pub fn new(config: CacheConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            l1: SetAssocCache::from_level(&config.l1i),
            l2: SetAssocCache::from_level(&config.l2),
            l3: SetAssocCache::from_level(&config.l3),
            config,
            in_flight: HashMap::new(),
            completions: BinaryHeap::new(),
            tokens_used: BTreeMap::new(),
            next_id: 0,
            events: Vec::new(),
            counters: CacheCounters::default(),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn l1(&self) -> &SetAssocCache {
        &self.l1
    }

    pub fn l2(&self) -> &SetAssocCache {
        &self.l2
    }

    pub fn l3(&self) -> &SetAssocCache {
        &self.l3
    }

    pub fn counters(&self) -> CacheCounters {
        self.counters
    }

    pub fn in_flight(&self, line: LineAddr) -> bool {
        self.in_flight.contains_key(&line)
    }

    pub fn in_flight_count(&self) -> usize {
        self.in_flight.len()
    }

    /// Drains L1 events produced since the last call.
    pub fn drain_events(&mut self) -> std::vec::Drain<'_, L1Event> {
        self.events.drain(..)
    }

    /// Installs every prefetch whose fill completes at or before `now`.
    pub fn advance(&mut self, now: Cycle) {
        while let Some(&Reverse((t, id, line))) = self.completions.peek() {
            if t > now {
                break;
            }
            self.completions.pop();
            // A demand may already have consumed this fill as a late hit.
            if self.in_flight.get(&line).is_some_and(|f| f.id == id) {
                self.in_flight.remove(&line);
                self.fill(line, FillCause::Prefetch(id));
                self.counters.prefetch_fills += 1;
            }
        }
    }

    /// Services a demand fetch of `line` issued at cycle `now`.
    pub fn demand_fetch(&mut self, line: LineAddr, now: Cycle) -> AccessResult {
        self.advance(now);
        self.counters.demand_accesses += 1;

        if self.l1.touch(line) {
            let prefetch = self.l1.take_prefetch_tag(line);
            return AccessResult {
                hit_level: HitLevel::L1,
                latency_cycles: self.config.l1i.latency_cycles,
                evicted_line: None,
                fill_was_prefetch: prefetch.is_some(),
                prefetch,
                late: false,
            };
        }

        self.counters.l1_misses += 1;
        if let Some(f) = self.in_flight.remove(&line) {
            self.counters.late_hits += 1;
            self.counters.prefetch_fills += 1;
            let evicted_line = self.fill(line, FillCause::Prefetch(f.id));
            // the fill is consumed right here, so it carries no first-use tag
            self.l1.take_prefetch_tag(line);
            return AccessResult {
                hit_level: f.from,
                latency_cycles: f.complete_at - now,
                evicted_line,
                fill_was_prefetch: true,
                prefetch: Some(f.id),
                late: true,
            };
        }

        let hit_level = self.lookup_below_l1(line);
        let evicted_line = self.fill(line, FillCause::Demand);
        AccessResult {
            hit_level,
            latency_cycles: self.config.latency(hit_level),
            evicted_line,
            fill_was_prefetch: false,
            prefetch: None,
            late: false,
        }
    }

    /// Requests a prefetch of `line` issued at cycle `at`.
    pub fn issue_prefetch(&mut self, line: LineAddr, at: Cycle) -> PrefetchIssue {
        if self.l1.contains(line) || self.in_flight.contains_key(&line) {
            self.counters.duplicates += 1;
            return PrefetchIssue::Duplicate;
        }
        let window = at / TOKEN_WINDOW_CYCLES;
        // windows more than one behind the issue point can no longer be charged
        while let Some((&w, _)) = self.tokens_used.first_key_value() {
            if w + 1 >= window {
                break;
            }
            self.tokens_used.pop_first();
        }
        let used = self.tokens_used.entry(window).or_insert(0);
        if *used >= self.config.prefetch_tokens_per_kcycle {
            self.counters.no_bandwidth += 1;
            return PrefetchIssue::NoBandwidth;
        }
        *used += 1;

        let from = self.lookup_below_l1(line);
        let id = self.next_id;
        self.next_id += 1;
        let complete_at = at + self.config.latency(from);
        self.in_flight.insert(line, InFlight { id, complete_at, from });
        self.completions.push(Reverse((complete_at, id, line)));
        self.counters.prefetches_issued += 1;
        PrefetchIssue::Issued(id)
    }

    /// Tokens already charged to the window containing `at`.
    pub fn tokens_used_in_window(&self, at: Cycle) -> u32 {
        self.tokens_used.get(&(at / TOKEN_WINDOW_CYCLES)).copied().unwrap_or(0)
    }

    fn lookup_below_l1(&mut self, line: LineAddr) -> HitLevel {
        if self.l2.touch(line) {
            HitLevel::L2
        } else if self.l3.touch(line) {
            HitLevel::L3
        } else {
            HitLevel::Dram
        }
    }

    /// Fills `line` into every level (inclusive). Lower-level victims are
    /// back-invalidated from the levels above them. Returns the L1 line
    /// displaced by the L1 insertion itself.
    fn fill(&mut self, line: LineAddr, cause: FillCause) -> Option<LineAddr> {
        if !self.l3.contains(line) {
            if let Some(victim) = self.l3.insert(line, None).evicted {
                self.l2.invalidate(victim.line);
                self.back_invalidate_l1(victim.line, cause);
            }
        }
        if !self.l2.contains(line) {
            if let Some(victim) = self.l2.insert(line, None).evicted {
                self.back_invalidate_l1(victim.line, cause);
            }
        }
        let prefetch = match cause {
            FillCause::Prefetch(id) => Some(id),
            FillCause::Demand => None,
        };
        let ins = self.l1.insert(line, prefetch);
        if let Some(ev) = ins.evicted {
            self.events.push(L1Event::Evicted {
                line: ev.line,
                slot: ins.slot,
                cause,
                unused_prefetch: ev.unused_prefetch,
            });
        }
        self.events.push(L1Event::Filled {
            line,
            slot: ins.slot,
            cause,
        });
        ins.evicted.map(|e| e.line)
    }

    fn back_invalidate_l1(&mut self, line: LineAddr, cause: FillCause) {
        if let Some((slot, ev)) = self.l1.invalidate(line) {
            self.events.push(L1Event::Evicted {
                line,
                slot,
                cause,
                unused_prefetch: ev.unused_prefetch,
            });
        }
    }

    /// Inclusion check: every L1 line is also in L2 and L3.
    pub fn inclusion_holds(&self) -> bool {
        self.l1
            .resident()
            .all(|(_, l)| self.l2.contains(l) && self.l3.contains(l))
            && self.l2.resident().all(|(_, l)| self.l3.contains(l))
    }
}

/// Next-line prefetcher. Fires on every L1 demand miss and on the first
/// demand use of a prefetched line, which keeps a sequential stream one
/// line ahead.
#[derive(Debug, Clone, Copy)]
pub struct NextLinePrefetcher {
    pub enabled: bool,
}

impl Default for NextLinePrefetcher {
    fn default() -> Self {
        Self { enabled: true }
    }
}

impl NextLinePrefetcher {
    pub fn candidate(&self, line: LineAddr, access: &AccessResult) -> Option<LineAddr> {
        (self.enabled && (access.is_l1_miss() || access.fill_was_prefetch)).then(|| line.wrapping_add(1))
    }
}
