//! The 36-bit compressed entangling entry.
//!
//! An entry describes an 8-line destination window: the low 20 bits of the
//! window base (the high bits are taken from the source line when decoding)
//! and one 2-bit saturating confidence per offset. An offset is marked when
//! its confidence is non-zero.
//!
//! ```text
//! bit  0..19   base_low20
//! bit 20..35   conf[0..8], conf[i] at bits 20 + 2i .. 21 + 2i
//! ```
//!
//! New destinations slide the window: among all 8-line windows inside the
//! source's 2^20-line region, the one covering the most marked lines (the
//! new line counts as marked) wins. Ties prefer a window that contains the
//! new line, then the current base, then the smallest base.

use thiserror::Error;

use crate::LineAddr;

pub const BASE_BITS: u32 = 20;
pub const WINDOW: usize = 8;
pub const ENTRY_BITS: u32 = 36;
pub const MAX_CONFIDENCE: u8 = 3;

const LOW_MASK: u64 = (1 << BASE_BITS) - 1;
const REGION_LINES: u64 = 1 << BASE_BITS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CompressedEntry {
    base_low20: u32,
    conf: [u8; WINDOW],
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("destination {destination:#x} does not share the high bits of source {source_line:#x}")]
pub struct NotRepresentable {
    pub source_line: LineAddr,
    pub destination: LineAddr,
}

/// Result of sliding the window for a new destination.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Update {
    pub entry: CompressedEntry,
    /// The new destination landed inside the chosen window.
    pub covered: bool,
    /// Previously marked lines that slid out of the window.
    pub dropped: Vec<LineAddr>,
}

/// True when `destination` shares every line-address bit above the low 20
/// with `source`.
#[inline]
pub fn representable(source: LineAddr, destination: LineAddr) -> bool {
    source >> BASE_BITS == destination >> BASE_BITS
}

fn region_of(source: LineAddr) -> LineAddr {
    source & !LOW_MASK
}

impl CompressedEntry {
    /// Builds an entry from raw fields. Confidences are clamped to 2 bits.
    pub fn new(base_low20: u32, conf: [u8; WINDOW]) -> Self {
        Self {
            base_low20: base_low20 & LOW_MASK as u32,
            conf: conf.map(|c| c.min(MAX_CONFIDENCE)),
        }
    }

    pub fn base_low20(&self) -> u32 {
        self.base_low20
    }

    pub fn confidences(&self) -> [u8; WINDOW] {
        self.conf
    }

    pub fn confidence(&self, offset: usize) -> u8 {
        self.conf[offset]
    }

    /// Number of marked offsets.
    pub fn marked(&self) -> usize {
        self.conf.iter().filter(|&&c| c > 0).count()
    }

    /// A live entry has at least one marked offset.
    pub fn is_live(&self) -> bool {
        self.conf.iter().any(|&c| c > 0)
    }

    pub fn confidence_sum(&self) -> u32 {
        self.conf.iter().map(|&c| u32::from(c)).sum()
    }

    /// Window base line for an entry owned by `source`.
    pub fn decode(&self, source: LineAddr) -> LineAddr {
        region_of(source) | u64::from(self.base_low20)
    }

    /// Absolute marked lines, in offset order.
    pub fn marked_lines(&self, source: LineAddr) -> impl Iterator<Item = LineAddr> + '_ {
        let base = self.decode(source);
        self.conf
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(move |(i, _)| base + i as u64)
    }

    /// Offset of `line` inside this entry's window.
    pub fn offset_of(&self, source: LineAddr, line: LineAddr) -> Option<usize> {
        let base = self.decode(source);
        let off = line.checked_sub(base)?;
        (off < WINDOW as u64).then_some(off as usize)
    }

    /// Saturating confidence adjustment for the offset holding `line`.
    /// Returns false if `line` is outside the window.
    pub fn adjust(&mut self, source: LineAddr, line: LineAddr, up: bool) -> bool {
        let Some(off) = self.offset_of(source, line) else {
            return false;
        };
        let c = &mut self.conf[off];
        *c = if up {
            (*c + 1).min(MAX_CONFIDENCE)
        } else {
            c.saturating_sub(1)
        };
        true
    }

    pub fn to_bits(&self) -> u64 {
        self.conf
            .iter()
            .enumerate()
            .fold(u64::from(self.base_low20), |acc, (i, &c)| {
                acc | u64::from(c) << (BASE_BITS + 2 * i as u32)
            })
    }

    pub fn from_bits(bits: u64) -> Self {
        let mut conf = [0u8; WINDOW];
        for (i, c) in conf.iter_mut().enumerate() {
            *c = ((bits >> (BASE_BITS + 2 * i as u32)) & 0b11) as u8;
        }
        Self {
            base_low20: (bits & LOW_MASK) as u32,
            conf,
        }
    }

    /// Prefetch targets for a trigger of `source`.
    ///
    /// `window_limit` 4 keeps offsets 0..3, 8 keeps all offsets, and 12 adds
    /// `base+8..base+11` unconditionally after the marked offsets. Returns
    /// an empty list when no offset passes `threshold`.
    pub fn targets(&self, source: LineAddr, threshold: u8, window_limit: u8) -> Vec<LineAddr> {
        debug_assert!(matches!(window_limit, 4 | 8 | 12), "window limit {window_limit}");
        let base = self.decode(source);
        let span = if window_limit == 4 { 4 } else { WINDOW };
        let threshold = threshold.max(1);
        let mut out: Vec<LineAddr> = (0..span)
            .filter(|&i| self.conf[i] >= threshold)
            .map(|i| base + i as u64)
            .collect();
        if window_limit == 12 && !out.is_empty() {
            out.extend((WINDOW as u64..12).map(|i| base + i));
        }
        out
    }
}

/// Window-slide update.
///
/// `entry` is the source's current entry (if any). Fails when the
/// destination lies outside the source's 2^20-line region; the caller
/// treats such destinations as uncovered.
pub fn update(
    entry: Option<&CompressedEntry>,
    source: LineAddr,
    new_destination: LineAddr,
) -> Result<Update, NotRepresentable> {
    if !representable(source, new_destination) {
        return Err(NotRepresentable {
            source_line: source,
            destination: new_destination,
        });
    }
    let live = entry.filter(|e| e.is_live());
    let current_base = live.map(|e| e.decode(source));

    // marked lines with their confidences, plus the new destination
    let mut marks: Vec<(LineAddr, u8)> = Vec::with_capacity(WINDOW + 1);
    if let Some(e) = live {
        let base = e.decode(source);
        marks.extend(
            e.conf
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(i, &c)| (base + i as u64, c)),
        );
    }
    let previously_marked = marks.iter().any(|&(l, _)| l == new_destination);
    if !previously_marked {
        marks.push((new_destination, 0));
    }

    let (lo, hi) = candidate_range(source, marks.iter().map(|&(l, _)| l));
    let chosen = choose_base(&marks, new_destination, current_base, lo, hi);

    let mut conf = [0u8; WINDOW];
    let mut dropped = Vec::new();
    for &(line, c) in &marks {
        match line.checked_sub(chosen).filter(|&o| o < WINDOW as u64) {
            Some(off) => conf[off as usize] = if line == new_destination && c == 0 { 1 } else { c },
            None if c > 0 => dropped.push(line),
            None => {}
        }
    }
    let covered = new_destination >= chosen && new_destination - chosen < WINDOW as u64;
    Ok(Update {
        entry: CompressedEntry {
            base_low20: (chosen & LOW_MASK) as u32,
            conf,
        },
        covered,
        dropped,
    })
}

/// Candidate bases: `[min(M), max(M)]`, clamped so the window stays inside
/// the source's region.
pub fn candidate_range(source: LineAddr, marks: impl Iterator<Item = LineAddr>) -> (LineAddr, LineAddr) {
    let (mut lo, mut hi) = (LineAddr::MAX, 0);
    for l in marks {
        lo = lo.min(l);
        hi = hi.max(l);
    }
    let cap = region_of(source) + (REGION_LINES - WINDOW as u64);
    (lo.min(cap), hi.min(cap))
}

fn coverage(marks: &[(LineAddr, u8)], base: LineAddr) -> usize {
    marks
        .iter()
        .filter(|&&(l, _)| l >= base && l - base < WINDOW as u64)
        .count()
}

fn choose_base(
    marks: &[(LineAddr, u8)],
    new_destination: LineAddr,
    current_base: Option<LineAddr>,
    lo: LineAddr,
    hi: LineAddr,
) -> LineAddr {
    // Coverage and "contains the new line" are piecewise constant in the
    // base, changing only where some line enters or leaves the window. The
    // smallest base of any optimal run therefore sits on one of these
    // breakpoints (or `lo`), so checking them suffices.
    let w = WINDOW as u64;
    let mut points: Vec<LineAddr> = vec![lo, hi];
    for &(l, _) in marks {
        points.push(l.saturating_sub(w - 1));
        points.push(l + 1);
        points.push(l);
    }
    if let Some(b) = current_base {
        points.push(b);
    }
    points.retain(|&b| b >= lo && b <= hi);
    points.sort_unstable();
    points.dedup();

    let contains_new = |b: LineAddr| new_destination >= b && new_destination - b < w;
    let key = |b: LineAddr| {
        (
            coverage(marks, b),
            contains_new(b),
            current_base == Some(b),
            std::cmp::Reverse(b),
        )
    };
    points
        .into_iter()
        .max_by_key(|&b| key(b))
        .expect("lo is always a candidate")
}

/// Packs entries back to back as a little-endian 36-bit stream.
pub fn pack_entries(entries: &[CompressedEntry]) -> Vec<u8> {
    let total_bits = entries.len() as u64 * u64::from(ENTRY_BITS);
    let mut out = vec![0u8; total_bits.div_ceil(8) as usize];
    for (k, e) in entries.iter().enumerate() {
        let bits = e.to_bits();
        let start = k as u64 * u64::from(ENTRY_BITS);
        for b in 0..u64::from(ENTRY_BITS) {
            if bits >> b & 1 == 1 {
                let pos = start + b;
                out[(pos / 8) as usize] |= 1 << (pos % 8);
            }
        }
    }
    out
}

pub fn unpack_entries(bytes: &[u8], count: usize) -> Vec<CompressedEntry> {
    (0..count)
        .map(|k| {
            let start = k as u64 * u64::from(ENTRY_BITS);
            let bits = (0..u64::from(ENTRY_BITS)).fold(0u64, |acc, b| {
                let pos = start + b;
                acc | u64::from(bytes[(pos / 8) as usize] >> (pos % 8) & 1) << b
            });
            CompressedEntry::from_bits(bits)
        })
        .collect()
}
