//! Hierarchical metadata placement.
//!
//! Every L1I line slot carries at most one [`CompressedEntry`] for the line
//! it holds. When the line leaves L1 its live entry moves into a 16-way
//! virtualized entangle table; when the line is filled again the entry
//! moves back. Triggers served from the table pay the L2 latency before
//! their prefetches issue.
//!
//! Table indexing: set = low `log2(sets)` bits of the source line, tag =
//! the next 51 bits.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::compressed::{self, CompressedEntry, ENTRY_BITS};
use crate::eip;
use crate::{Cycle, LineAddr};

pub const TABLE_TAG_BITS: u32 = 51;
pub const TABLE_ENTRY_BITS: u32 = TABLE_TAG_BITS + ENTRY_BITS;
const TABLE_TAG_MASK: u64 = (1 << TABLE_TAG_BITS) - 1;

#[derive(Debug, Clone, Copy)]
struct TableWay {
    tag: u64,
    entry: CompressedEntry,
    last_used: u64,
}

/// Set-associative store of compressed entries keyed by source line.
#[derive(Debug, Clone)]
pub struct VirtualTable {
    sets: usize,
    ways: usize,
    index_bits: u32,
    slots: Vec<Option<TableWay>>,
    clock: u64,
}

impl VirtualTable {
    /// `sets` must be a power of two.
    pub fn new(sets: usize, ways: usize) -> Self {
        assert!(
            sets.is_power_of_two() && ways > 0,
            "table needs power-of-two sets and at least one way"
        );
        Self {
            sets,
            ways,
            index_bits: sets.trailing_zeros(),
            slots: vec![None; sets * ways],
            clock: 0,
        }
    }

    pub fn sets(&self) -> usize {
        self.sets
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    pub fn capacity(&self) -> usize {
        self.sets * self.ways
    }

    pub fn occupancy(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    fn split(&self, line: LineAddr) -> (usize, u64) {
        let set = (line & (self.sets as u64 - 1)) as usize;
        (set, (line >> self.index_bits) & TABLE_TAG_MASK)
    }

    fn join(&self, set: usize, tag: u64) -> LineAddr {
        tag << self.index_bits | set as u64
    }

    fn find(&self, line: LineAddr) -> Option<usize> {
        let (set, tag) = self.split(line);
        let start = set * self.ways;
        (start..start + self.ways).find(|&i| self.slots[i].is_some_and(|w| w.tag == tag))
    }

    pub fn contains(&self, line: LineAddr) -> bool {
        self.find(line).is_some()
    }

    /// Reads an entry without touching LRU state.
    pub fn peek(&self, line: LineAddr) -> Option<CompressedEntry> {
        self.find(line).and_then(|i| self.slots[i]).map(|w| w.entry)
    }

    /// Reads an entry and marks it most recently used.
    pub fn lookup(&mut self, line: LineAddr) -> Option<CompressedEntry> {
        let i = self.find(line)?;
        self.clock += 1;
        let way = self.slots[i].as_mut().expect("found");
        way.last_used = self.clock;
        Some(way.entry)
    }

    pub fn get_mut(&mut self, line: LineAddr) -> Option<&mut CompressedEntry> {
        let i = self.find(line)?;
        self.slots[i].as_mut().map(|w| &mut w.entry)
    }

    /// Removes and returns the entry for `line`.
    pub fn take(&mut self, line: LineAddr) -> Option<CompressedEntry> {
        let i = self.find(line)?;
        self.slots[i].take().map(|w| w.entry)
    }

    /// Installs or overwrites the entry for `line` as most recently used.
    /// Returns the entry displaced from a full set.
    pub fn install(&mut self, line: LineAddr, entry: CompressedEntry) -> Option<(LineAddr, CompressedEntry)> {
        self.clock += 1;
        let (set, tag) = self.split(line);
        let start = set * self.ways;
        let range = start..start + self.ways;
        let new_way = TableWay {
            tag,
            entry,
            last_used: self.clock,
        };
        if let Some(i) = self.find(line) {
            self.slots[i] = Some(new_way);
            return None;
        }
        if let Some(i) = range.clone().find(|&i| self.slots[i].is_none()) {
            self.slots[i] = Some(new_way);
            return None;
        }
        let victim = range
            .min_by_key(|&i| self.slots[i].map_or(0, |w| w.last_used))
            .expect("non-empty set");
        let old = self.slots[victim].replace(new_way).expect("full set");
        Some((self.join(set, old.tag), old.entry))
    }

    /// Live entries as (source line, entry), in slot order.
    pub fn iter(&self) -> impl Iterator<Item = (LineAddr, CompressedEntry)> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(move |(i, s)| s.map(|w| (self.join(i / self.ways, w.tag), w.entry)))
    }

    /// 87-bit packed (51-bit tag, 36-bit payload) form of the entry for
    /// `line`: tag in bits 0..50, payload in bits 51..86.
    pub fn packed(&self, line: LineAddr) -> Option<u128> {
        let i = self.find(line)?;
        self.slots[i].map(|w| u128::from(w.tag) | u128::from(w.entry.to_bits()) << TABLE_TAG_BITS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct AttachedSlot {
    line: LineAddr,
    entry: Option<CompressedEntry>,
}

/// Where a trigger's entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntrySource {
    Attached,
    Table,
}

/// Outcome of recording a destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntangleOutcome {
    /// The destination is inside the source's window.
    Covered,
    /// Outside the 20-bit region, or slid out of the chosen window.
    Uncovered,
    /// Self-entangle, ignored.
    Ignored,
}

#[derive(Debug, Clone)]
pub struct MetadataHierarchy {
    l1_sets: usize,
    l1_ways: usize,
    attached: Vec<Option<AttachedSlot>>,
    table: VirtualTable,
    table_delay: Cycle,
}

impl MetadataHierarchy {
    /// `table_delay` is the latency charged to table-served triggers.
    pub fn new(l1_sets: usize, l1_ways: usize, table: VirtualTable, table_delay: Cycle) -> Self {
        Self {
            l1_sets,
            l1_ways,
            attached: vec![None; l1_sets * l1_ways],
            table,
            table_delay,
        }
    }

    pub fn table(&self) -> &VirtualTable {
        &self.table
    }

    pub fn attached_slots(&self) -> usize {
        self.attached.len()
    }

    pub fn attached_live(&self) -> usize {
        self.attached.iter().flatten().filter(|s| s.entry.is_some()).count()
    }

    fn slot_of(&self, line: LineAddr) -> Option<usize> {
        let start = (line % self.l1_sets as u64) as usize * self.l1_ways;
        (start..start + self.l1_ways).find(|&i| self.attached[i].is_some_and(|s| s.line == line))
    }

    /// Attached entry of an L1-resident line.
    pub fn attached_entry(&self, line: LineAddr) -> Option<CompressedEntry> {
        self.slot_of(line).and_then(|i| self.attached[i]).and_then(|s| s.entry)
    }

    /// Line currently bound to attached slot `slot`.
    pub fn attached_line(&self, slot: usize) -> Option<LineAddr> {
        self.attached.get(slot).copied().flatten().map(|s| s.line)
    }

    pub fn is_attached(&self, line: LineAddr) -> bool {
        self.slot_of(line).is_some()
    }

    /// `line` was filled into L1 slot `slot`.
    pub fn on_l1_fill(&mut self, line: LineAddr, slot: usize) {
        let entry = self.table.lookup(line).and_then(|_| self.table.take(line));
        self.attached[slot] = Some(AttachedSlot { line, entry });
    }

    /// `line` left L1 slot `slot`.
    pub fn on_l1_evict(&mut self, line: LineAddr, slot: usize) {
        let Some(s) = self.attached[slot].take() else { return };
        debug_assert_eq!(s.line, line, "eviction of a line the slot does not hold");
        if let Some(entry) = s.entry.filter(CompressedEntry::is_live) {
            self.table.install(line, entry);
        }
    }

    /// Entry for a trigger of `line` and the delay before its prefetches
    /// may issue.
    pub fn lookup_for_trigger(&mut self, line: LineAddr) -> Option<(CompressedEntry, Cycle, EntrySource)> {
        if let Some(i) = self.slot_of(line) {
            return self.attached[i]
                .and_then(|s| s.entry)
                .map(|e| (e, 0, EntrySource::Attached));
        }
        self.table
            .lookup(line)
            .map(|e| (e, self.table_delay, EntrySource::Table))
    }

    pub fn entangle(&mut self, source: LineAddr, destination: LineAddr) -> EntangleOutcome {
        if source == destination {
            return EntangleOutcome::Ignored;
        }
        if let Some(i) = self.slot_of(source) {
            let slot = self.attached[i].as_mut().expect("found");
            return match compressed::update(slot.entry.as_ref(), source, destination) {
                Ok(u) => {
                    slot.entry = Some(u.entry);
                    outcome(u.covered)
                }
                Err(_) => EntangleOutcome::Uncovered,
            };
        }
        let current = self.table.peek(source);
        match compressed::update(current.as_ref(), source, destination) {
            Ok(u) => {
                self.table.install(source, u.entry);
                outcome(u.covered)
            }
            Err(_) => EntangleOutcome::Uncovered,
        }
    }

    /// Confidence feedback for `destination` in `source`'s entry. Entries
    /// left with no marked offset are dropped.
    pub fn adjust(&mut self, source: LineAddr, destination: LineAddr, up: bool) {
        if let Some(i) = self.slot_of(source) {
            let slot = self.attached[i].as_mut().expect("found");
            if let Some(e) = slot.entry.as_mut() {
                e.adjust(source, destination, up);
                if !e.is_live() {
                    slot.entry = None;
                }
            }
            return;
        }
        if let Some(e) = self.table.get_mut(source) {
            e.adjust(source, destination, up);
            if !e.is_live() {
                self.table.take(source);
            }
        }
    }

    /// Source lines holding a live entry, attached first then table.
    pub fn live_sources(&self) -> Vec<LineAddr> {
        let mut v: Vec<LineAddr> = self
            .attached
            .iter()
            .flatten()
            .filter(|s| s.entry.is_some())
            .map(|s| s.line)
            .collect();
        v.extend(self.table.iter().map(|(l, _)| l));
        v
    }

    /// Writes every live entry as (source line u64 LE, 87-bit packed entry in
    /// 11 bytes LE). Attached entries are packed with the table's tag
    /// function.
    pub fn dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        let attached = self
            .attached
            .iter()
            .flatten()
            .filter_map(|s| s.entry.map(|e| (s.line, e)));
        for (line, entry) in attached.chain(self.table.iter()) {
            let (_, tag) = self.table.split(line);
            let packed = u128::from(tag) | u128::from(entry.to_bits()) << TABLE_TAG_BITS;
            w.write_all(&line.to_le_bytes())?;
            w.write_all(&packed.to_le_bytes()[..11])?;
        }
        w.flush()
    }
}

fn outcome(covered: bool) -> EntangleOutcome {
    if covered {
        EntangleOutcome::Covered
    } else {
        EntangleOutcome::Uncovered
    }
}

/// Parses a metadata dump back into (source line, tag, entry) records.
pub fn read_dump(bytes: &[u8]) -> Vec<(LineAddr, u64, CompressedEntry)> {
    bytes
        .chunks_exact(19)
        .map(|rec| {
            let line = u64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
            let mut raw = [0u8; 16];
            raw[..11].copy_from_slice(&rec[8..]);
            let packed = u128::from_le_bytes(raw);
            let tag = (packed & u128::from(TABLE_TAG_MASK)) as u64;
            let entry = CompressedEntry::from_bits((packed >> TABLE_TAG_BITS) as u64);
            (line, tag, entry)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetConfig {
    pub history_entries: u64,
    pub l1_lines: u64,
    pub table_entries: u64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            history_entries: 64,
            l1_lines: 512,
            table_entries: 2048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub history_bytes: u64,
    pub attached_bytes: u64,
    pub table_bytes: u64,
    pub total_bytes: u64,
}

fn bytes(bits: u64) -> u64 {
    bits.div_ceil(8)
}

/// On-chip metadata bytes for the hierarchical layout.
pub fn budget(config: &BudgetConfig) -> BudgetReport {
    let history_bytes = bytes(config.history_entries * u64::from(eip::TAG_BITS + eip::TIMESTAMP_BITS));
    let attached_bytes = bytes(config.l1_lines * u64::from(ENTRY_BITS));
    let table_bytes = bytes(config.table_entries * u64::from(TABLE_ENTRY_BITS));
    BudgetReport {
        history_bytes,
        attached_bytes,
        table_bytes,
        total_bytes: history_bytes + attached_bytes + table_bytes,
    }
}
