//! Trace-driven instruction prefetch simulator.
//!
//! The crate models an instruction-side cache hierarchy with a next-line
//! prefetcher and layers a family of correlation prefetchers on top:
//!
//! * [`eip`]: the entangling baseline with full-address destinations.
//! * [`compressed`]: the 36-bit window entry (20-bit base, eight 2-bit
//!   confidences) and its window-slide update.
//! * [`hierarchy`]: per-L1-line attached entries backed by a 16-way
//!   virtualized entangle table, plus exact metadata budgets.
//! * [`controller`]: logistic profitability scoring with an epsilon-greedy
//!   bandit over decision thresholds and window sizes.
//!
//! [`sim`] wires everything into a deterministic cycle-accounting replay and
//! [`metrics`] turns the resulting event stream into reports.

pub mod cache;
pub mod compressed;
pub mod controller;
pub mod eip;
pub mod hierarchy;
pub mod metrics;
pub mod sim;
pub mod trace;

/// Line address (byte address >> 6).
pub type LineAddr = u64;

/// Simulated cycle count.
pub type Cycle = u64;

/// log2 of the cache line size. Lines are fixed at 64 bytes.
pub const LINE_SHIFT: u32 = 6;

/// Cache line size in bytes.
pub const LINE_BYTES: u64 = 1 << LINE_SHIFT;

/// Converts a byte address into its line address.
#[inline]
pub fn line_of(address: u64) -> LineAddr {
    address >> LINE_SHIFT
}

pub use cache::{AccessResult, CacheConfig, CacheHierarchy, HitLevel, LevelConfig, PrefetchIssue};
pub use compressed::CompressedEntry;
pub use controller::{ControllerConfig, ControllerState, FeatureVector};
pub use hierarchy::{BudgetReport, MetadataHierarchy, VirtualTable};
pub use metrics::{SimulationReport, UtilityWeights};
pub use sim::{simulate, SimConfig, SimOutput, Variant};
pub use trace::{ClusterStats, SyntheticWorkloadSpec, TraceRecord};
