//! Instruction-fetch traces: record type, binary file format, a synthetic
//! microservice-like workload generator, and miss-pair clustering statistics.

mod format;
mod stats;
mod synthetic;

pub use format::{
    load_trace, read_trace, save_trace, write_trace, TraceError, TraceReader, FORMAT_VERSION, MAGIC, RECORD_BYTES,
};
pub use stats::{cluster_stats, miss_pairs, ClusterStats, StatsError, DEFAULT_WINDOW_SIZES};
pub use synthetic::{generate_synthetic, SpecError, SyntheticWorkloadSpec, FETCH_BYTES};

use crate::{line_of, LineAddr};

/// One event of a replayed instruction stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceRecord {
    /// An instruction fetch at an arbitrary 64-bit byte address.
    Fetch { address: u64, thread_tag: u8 },
    /// Start of a request.
    RpcBegin { rpc_id: u32, thread_tag: u8 },
    /// End of a request previously opened by a matching `RpcBegin`.
    RpcEnd { rpc_id: u32, thread_tag: u8 },
}

impl TraceRecord {
    pub fn thread_tag(&self) -> u8 {
        match *self {
            TraceRecord::Fetch { thread_tag, .. }
            | TraceRecord::RpcBegin { thread_tag, .. }
            | TraceRecord::RpcEnd { thread_tag, .. } => thread_tag,
        }
    }

    /// Line address of a fetch; `None` for RPC boundaries.
    pub fn line(&self) -> Option<LineAddr> {
        match *self {
            TraceRecord::Fetch { address, .. } => Some(line_of(address)),
            _ => None,
        }
    }

    pub fn is_fetch(&self) -> bool {
        matches!(self, TraceRecord::Fetch { .. })
    }
}
