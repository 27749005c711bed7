//! Entangling baseline.
//!
//! A 64-entry history buffer of (58-bit line tag, 20-bit timestamp) pairs
//! estimates how far back a prefetch must have been triggered to hide a
//! miss. The destination is then entangled with that source in a
//! set-associative table whose entries carry up to eight full-address
//! destinations, each with a 2-bit confidence.

use std::collections::VecDeque;

use crate::{Cycle, LineAddr};

pub const HISTORY_ENTRIES: usize = 64;
pub const TAG_BITS: u32 = 58;
pub const TIMESTAMP_BITS: u32 = 20;
pub const MAX_DESTINATIONS: usize = 8;
pub const MAX_CONFIDENCE: u8 = 3;

const TAG_MASK: u64 = (1 << TAG_BITS) - 1;
const TIMESTAMP_MASK: u64 = (1 << TIMESTAMP_BITS) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistoryEntry {
    pub tag: u64,
    pub timestamp: u32,
}

/// Modular age of `timestamp` at `now`, both taken mod 2^20.
#[inline]
pub fn modular_age(now: Cycle, timestamp: u32) -> u64 {
    (now.wrapping_sub(u64::from(timestamp))) & TIMESTAMP_MASK
}

#[derive(Debug, Clone, Default)]
pub struct HistoryBuffer {
    entries: VecDeque<HistoryEntry>,
}

impl HistoryBuffer {
    pub fn new() -> Self {
        Self {
            entries: VecDeque::with_capacity(HISTORY_ENTRIES + 1),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &HistoryEntry> {
        self.entries.iter()
    }

    pub fn record_fetch(&mut self, line: LineAddr, now: Cycle) {
        self.entries.push_back(HistoryEntry {
            tag: line & TAG_MASK,
            timestamp: (now & TIMESTAMP_MASK) as u32,
        });
        if self.entries.len() > HISTORY_ENTRIES {
            self.entries.pop_front();
        }
    }

    /// Youngest entry fetched at least `fill_latency` cycles before
    /// `miss_time`, measured in modular timestamp order.
    pub fn find_source(&self, miss_time: Cycle, fill_latency: Cycle) -> Option<LineAddr> {
        debug_assert!(fill_latency > 0);
        self.entries
            .iter()
            .rev()
            .find(|e| modular_age(miss_time, e.timestamp) >= fill_latency)
            .map(|e| e.tag)
    }

    /// Storage in bits: 64 x (58 + 20).
    pub const fn storage_bits() -> u64 {
        HISTORY_ENTRIES as u64 * (TAG_BITS + TIMESTAMP_BITS) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Destination {
    pub line: LineAddr,
    pub confidence: u8,
    inserted: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineEntangleEntry {
    pub source: LineAddr,
    pub destinations: Vec<Destination>,
}

impl BaselineEntangleEntry {
    fn new(source: LineAddr) -> Self {
        Self {
            source,
            destinations: Vec::with_capacity(MAX_DESTINATIONS),
        }
    }

    /// Adds or reinforces `destination`. A full entry replaces its lowest
    /// confidence destination, oldest first on ties.
    pub fn entangle(&mut self, destination: LineAddr, seq: u64) {
        if let Some(d) = self.destinations.iter_mut().find(|d| d.line == destination) {
            d.confidence = (d.confidence + 1).min(MAX_CONFIDENCE);
            return;
        }
        let fresh = Destination {
            line: destination,
            confidence: 1,
            inserted: seq,
        };
        if self.destinations.len() < MAX_DESTINATIONS {
            self.destinations.push(fresh);
            return;
        }
        let victim = self
            .destinations
            .iter()
            .enumerate()
            .min_by_key(|(_, d)| (d.confidence, d.inserted))
            .map(|(i, _)| i)
            .expect("full entry");
        self.destinations[victim] = fresh;
    }

    pub fn candidates(&self, threshold: u8) -> impl Iterator<Item = LineAddr> + '_ {
        self.destinations
            .iter()
            .filter(move |d| d.confidence >= threshold)
            .map(|d| d.line)
    }

    pub fn adjust(&mut self, destination: LineAddr, up: bool) {
        if let Some(d) = self.destinations.iter_mut().find(|d| d.line == destination) {
            d.confidence = if up {
                (d.confidence + 1).min(MAX_CONFIDENCE)
            } else {
                d.confidence.saturating_sub(1)
            };
        }
    }
}

#[derive(Debug, Clone)]
struct TableWay {
    entry: BaselineEntangleEntry,
    last_used: u64,
}

/// Set-associative table of baseline entries, LRU within a set.
#[derive(Debug, Clone)]
pub struct EntangleTable {
    sets: usize,
    ways: usize,
    slots: Vec<Option<TableWay>>,
    clock: u64,
    seq: u64,
}

impl EntangleTable {
    pub fn new(sets: usize, ways: usize) -> Self {
        assert!(sets > 0 && ways > 0);
        Self {
            sets,
            ways,
            slots: vec![None; sets * ways],
            clock: 0,
            seq: 0,
        }
    }

    pub fn entries(&self) -> usize {
        self.sets * self.ways
    }

    fn set_range(&self, source: LineAddr) -> std::ops::Range<usize> {
        let s = (source % self.sets as u64) as usize * self.ways;
        s..s + self.ways
    }

    fn find(&self, source: LineAddr) -> Option<usize> {
        self.set_range(source)
            .find(|&i| self.slots[i].as_ref().is_some_and(|w| w.entry.source == source))
    }

    pub fn get(&self, source: LineAddr) -> Option<&BaselineEntangleEntry> {
        self.find(source).and_then(|i| self.slots[i].as_ref()).map(|w| &w.entry)
    }

    /// Records `source -> destination`. Self-entangles are ignored.
    pub fn entangle(&mut self, source: LineAddr, destination: LineAddr) {
        if source == destination {
            return;
        }
        self.clock += 1;
        self.seq += 1;
        let idx = match self.find(source) {
            Some(i) => i,
            None => {
                let range = self.set_range(source);
                let victim = range.clone().find(|&i| self.slots[i].is_none()).unwrap_or_else(|| {
                    range
                        .min_by_key(|&i| self.slots[i].as_ref().map_or(0, |w| w.last_used))
                        .expect("non-empty set")
                });
                self.slots[victim] = Some(TableWay {
                    entry: BaselineEntangleEntry::new(source),
                    last_used: 0,
                });
                victim
            }
        };
        let way = self.slots[idx].as_mut().expect("slot populated above");
        way.last_used = self.clock;
        way.entry.entangle(destination, self.seq);
    }

    /// Destinations of `line` with confidence at or above `threshold`.
    pub fn trigger(&mut self, line: LineAddr, threshold: u8) -> Vec<LineAddr> {
        let Some(i) = self.find(line) else { return Vec::new() };
        self.clock += 1;
        let way = self.slots[i].as_mut().expect("found");
        way.last_used = self.clock;
        way.entry.candidates(threshold).collect()
    }

    pub fn adjust(&mut self, source: LineAddr, destination: LineAddr, up: bool) {
        if let Some(i) = self.find(source) {
            self.slots[i].as_mut().expect("found").entry.adjust(destination, up);
        }
    }

    /// Storage in bits per entry: source tag plus eight (58-bit line, 2-bit
    /// confidence) destinations.
    pub const fn entry_bits() -> u64 {
        51 + MAX_DESTINATIONS as u64 * (TAG_BITS as u64 + 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_capacity() {
        let mut h = HistoryBuffer::new();
        for i in 0..65 {
            h.record_fetch(1000 + i, i);
        }
        assert_eq!(h.len(), 64);
        assert!(h.entries().all(|e| e.tag != 1000));
        assert_eq!(h.entries().next().unwrap().tag, 1001);
    }

    #[test]
    fn timestamp_wraps() {
        let mut h = HistoryBuffer::new();
        h.record_fetch(1, (1 << 20) + 5);
        assert_eq!(h.entries().next().unwrap().timestamp, 5);
    }

    #[test]
    fn duplicates_kept() {
        let mut h = HistoryBuffer::new();
        h.record_fetch(9, 1);
        h.record_fetch(9, 2);
        assert_eq!(h.len(), 2);
    }

    #[test]
    fn find_source_examples() {
        let mut h = HistoryBuffer::new();
        assert_eq!(h.find_source(100, 30), None);
        h.record_fetch(0xA, 10);
        h.record_fetch(0xB, 40);
        h.record_fetch(0xC, 80);
        assert_eq!(h.find_source(100, 30), Some(0xB));
        assert_eq!(h.find_source(100, 95), None);
        assert_eq!(h.find_source(100, 90), Some(0xA));
    }

    #[test]
    fn find_source_across_wrap() {
        let mut h = HistoryBuffer::new();
        let base = (1u64 << 20) - 20;
        h.record_fetch(1, base);
        h.record_fetch(2, base + 15);
        h.record_fetch(3, base + 30);
        // miss at base+40 (wrapped timestamp 20) with latency 20 -> need age >= 20
        assert_eq!(h.find_source(base + 40, 20), Some(2));
    }

    #[test]
    fn storage() {
        assert_eq!(HistoryBuffer::storage_bits() / 8, 624);
    }

    #[test]
    fn entangle_fresh_and_saturate() {
        let mut t = EntangleTable::new(4, 2);
        t.entangle(10, 20);
        assert_eq!(t.get(10).unwrap().destinations.len(), 1);
        assert_eq!(t.get(10).unwrap().destinations[0].confidence, 1);
        for _ in 0..3 {
            t.entangle(10, 20);
        }
        assert_eq!(t.get(10).unwrap().destinations[0].confidence, 3);
        t.entangle(11, 11);
        assert!(t.get(11).is_none());
    }

    #[test]
    fn trigger_threshold() {
        let mut t = EntangleTable::new(4, 2);
        assert!(t.trigger(10, 1).is_empty());
        t.entangle(10, 20);
        t.entangle(10, 20);
        t.entangle(10, 30);
        t.adjust(10, 30, false);
        assert_eq!(t.trigger(10, 1), vec![20]);
    }

    /// Exhaustive replacement check: for every confidence assignment on a
    /// full entry, the replaced slot is the min-confidence, oldest one.
    #[test]
    fn replacement_policy_exhaustive() {
        for code in 0..4u32.pow(4) {
            let confs: Vec<u8> = (0..4).map(|k| ((code >> (2 * k)) & 3) as u8).collect();
            let mut e = BaselineEntangleEntry::new(0);
            for (i, d) in (1..=8u64).enumerate() {
                e.entangle(d, i as u64);
            }
            // first four destinations get the enumerated confidences, the rest stay at 1
            for (i, &c) in confs.iter().enumerate() {
                e.destinations[i].confidence = c;
            }
            // insertion order equals slot order here: first slot holding the minimum
            let all: Vec<u8> = e.destinations.iter().map(|d| d.confidence).collect();
            let min = *all.iter().min().unwrap();
            let expected_victim = all.iter().position(|&c| c == min).unwrap();
            let before = e.destinations.clone();
            e.entangle(99, 100);
            for (i, (now, was)) in e.destinations.iter().zip(&before).enumerate() {
                if i == expected_victim {
                    assert_eq!(now.line, 99);
                } else {
                    assert_eq!(now, was);
                }
            }
        }
        // all equal confidences -> first inserted goes
        let mut e = BaselineEntangleEntry::new(0);
        for d in 1..=9u64 {
            e.entangle(d, d);
        }
        assert!(e.destinations.iter().all(|d| d.line != 1));
        assert_eq!(e.destinations[0].line, 9);
    }

    #[test]
    fn table_lru_replacement() {
        let mut t = EntangleTable::new(1, 2);
        t.entangle(1, 100);
        t.entangle(2, 200);
        t.trigger(1, 1);
        t.entangle(3, 300);
        assert!(t.get(1).is_some());
        assert!(t.get(2).is_none());
    }
}
