//! Synthetic microservice-like instruction streams.
//!
//! Code is laid out as contiguous per-function line ranges. Each function
//! gets a fixed control-flow skeleton when the workload is built (call
//! sites bound to one callee, loop back-edges with trip counts, short
//! forward branches), so repeated invocations replay the same line
//! sequences the way hot request handlers do. Requests pick an entry
//! handler from the current phase's handler set; phase churn redraws that
//! set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TraceRecord;
use crate::LINE_BYTES;

/// Bytes covered by one fetch record. Four fetches walk one line.
pub const FETCH_BYTES: u64 = 16;
const FETCHES_PER_LINE: u64 = LINE_BYTES / FETCH_BYTES;

/// First line of the synthetic text segment.
const CODE_BASE_LINE: u64 = 0x5555_0000_0000 >> 6;

const MAX_BACKEDGE_SPAN: u64 = 6;

/// Distant code regions (shared-library style) for dispersed functions.
/// Each starts 2^22 lines past the previous one, so no line in one region
/// shares its high bits above the low 20 with another region.
const FAR_REGIONS: u64 = 8;
const FAR_REGION_STRIDE: u64 = 1 << 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticWorkloadSpec {
    pub seed: u64,
    pub function_count: u32,
    pub mean_function_lines: u32,
    pub call_depth_max: u32,
    pub loop_probability: f64,
    pub call_probability: f64,
    pub phase_churn_probability: f64,
    pub footprint_lines: u64,
    /// Mean number of fetches per request.
    pub rpc_length_mean: u32,
    pub record_count: u64,
    /// Fraction of functions placed in distant code regions instead of the
    /// main text; 0 keeps every function in one contiguous segment.
    pub far_function_fraction: f64,
}

impl Default for SyntheticWorkloadSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            function_count: 1024,
            mean_function_lines: 14,
            call_depth_max: 6,
            loop_probability: 0.1,
            call_probability: 0.1,
            phase_churn_probability: 0.02,
            footprint_lines: 12288,
            rpc_length_mean: 3000,
            record_count: 300_000,
            far_function_fraction: 0.0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("invalid workload spec: {0} must be positive")]
    ZeroCount(&'static str),
    #[error("invalid workload spec: {name} = {value} is outside [0, 1]")]
    BadProbability { name: &'static str, value: f64 },
}

impl SyntheticWorkloadSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        let counts = [
            ("function_count", u64::from(self.function_count)),
            ("mean_function_lines", u64::from(self.mean_function_lines)),
            ("footprint_lines", self.footprint_lines),
            ("rpc_length_mean", u64::from(self.rpc_length_mean)),
            ("record_count", self.record_count),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(SpecError::ZeroCount(name));
            }
        }
        let probs = [
            ("loop_probability", self.loop_probability),
            ("call_probability", self.call_probability),
            ("phase_churn_probability", self.phase_churn_probability),
            ("far_function_fraction", self.far_function_fraction),
        ];
        for (name, value) in probs {
            if !(0.0..=1.0).contains(&value) {
                return Err(SpecError::BadProbability { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Control {
    FallThrough,
    Call(usize),
    BackEdge { target: u64, trips: u32 },
    Forward { skip: u64, taken: f64 },
}

struct Function {
    start: u64,
    lines: Vec<Control>,
}

struct Frame {
    func: usize,
    pc: u64,
    // (line index, remaining trips) for back-edges currently iterating
    loops: Vec<(u64, u32)>,
}

fn layout(spec: &SyntheticWorkloadSpec, rng: &mut ChaCha8Rng) -> Vec<Function> {
    let mean = u64::from(spec.mean_function_lines);
    let lo = (mean / 2).max(1);
    let hi = (mean * 3 / 2).max(lo);

    let mut lengths = Vec::new();
    let mut used = 0u64;
    for _ in 0..spec.function_count {
        let remaining = spec.footprint_lines - used;
        if remaining == 0 {
            break;
        }
        let len = rng.gen_range(lo..=hi).min(remaining);
        lengths.push(len);
        used += len;
    }

    let n = lengths.len();
    // placement draws use their own stream so the skeleton is unchanged
    let mut placement = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut region_next: Vec<u64> = (1..=FAR_REGIONS)
        .map(|r| CODE_BASE_LINE + r * FAR_REGION_STRIDE)
        .collect();
    let mut start = CODE_BASE_LINE;
    let mut functions = Vec::with_capacity(n);
    for (idx, &len) in lengths.iter().enumerate() {
        let mut lines = Vec::with_capacity(len as usize);
        for i in 0..len {
            let control = if n > 1 && rng.gen_bool(spec.call_probability) {
                let mut callee = rng.gen_range(0..n - 1);
                if callee >= idx {
                    callee += 1;
                }
                Control::Call(callee)
            } else if i > 0 && rng.gen_bool(spec.loop_probability) {
                let span = rng.gen_range(1..=i.min(MAX_BACKEDGE_SPAN));
                Control::BackEdge {
                    target: i - span,
                    trips: rng.gen_range(1..=3),
                }
            } else if i + 2 < len && rng.gen_bool(spec.loop_probability) {
                let skip = rng.gen_range(1..=(len - i - 2).min(3));
                Control::Forward {
                    skip,
                    taken: rng.gen_range(0.0..1.0),
                }
            } else {
                Control::FallThrough
            };
            lines.push(control);
        }
        if spec.far_function_fraction > 0.0 && placement.gen_bool(spec.far_function_fraction) {
            let r = placement.gen_range(0..FAR_REGIONS as usize);
            functions.push(Function {
                start: region_next[r],
                lines,
            });
            region_next[r] += len;
        } else {
            functions.push(Function { start, lines });
            start += len;
        }
    }
    functions
}

struct Emitter<'a> {
    out: Vec<TraceRecord>,
    limit: u64,
    spec: &'a SyntheticWorkloadSpec,
}

impl Emitter<'_> {
    fn remaining(&self) -> u64 {
        self.limit - self.out.len() as u64
    }
}

/// Generates a trace of exactly `spec.record_count` records.
pub fn generate_synthetic(spec: &SyntheticWorkloadSpec) -> Result<Vec<TraceRecord>, SpecError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let functions = layout(spec, &mut rng);
    let n = functions.len();
    let handler_count = (n / 16).max(1);
    let draw_handlers =
        |rng: &mut ChaCha8Rng| -> Vec<usize> { (0..handler_count).map(|_| rng.gen_range(0..n)).collect() };
    let mut handlers = draw_handlers(&mut rng);

    let mut em = Emitter {
        out: Vec::with_capacity(spec.record_count as usize),
        limit: spec.record_count,
        spec,
    };
    let mean = u64::from(spec.rpc_length_mean);
    let mut rpc_id: u32 = 0;

    while em.remaining() > 0 {
        if rng.gen_bool(spec.phase_churn_probability) {
            handlers = draw_handlers(&mut rng);
        }
        let first = handlers[rng.gen_range(0..handlers.len())];
        let thread_tag = (first % 8) as u8;
        if em.remaining() < 3 {
            // Too short for a request; pad with straight-line fetches.
            let base = functions[first].start * LINE_BYTES;
            let mut k = 0;
            while em.remaining() > 0 {
                em.out.push(TraceRecord::Fetch {
                    address: base + k * FETCH_BYTES,
                    thread_tag,
                });
                k += 1;
            }
            break;
        }
        em.out.push(TraceRecord::RpcBegin { rpc_id, thread_tag });
        let target = rng.gen_range((mean / 2).max(1)..=(mean * 3 / 2).max(1));
        let budget = target.min(em.remaining() - 1);
        run_request(&functions, &handlers, first, thread_tag, budget, &mut rng, &mut em);
        em.out.push(TraceRecord::RpcEnd { rpc_id, thread_tag });
        rpc_id = rpc_id.wrapping_add(1);
    }
    Ok(em.out)
}

fn run_request(
    functions: &[Function],
    handlers: &[usize],
    first: usize,
    thread_tag: u8,
    budget: u64,
    rng: &mut ChaCha8Rng,
    em: &mut Emitter<'_>,
) {
    let depth_max = em.spec.call_depth_max as usize;
    let mut emitted = 0u64;
    let mut stack = vec![Frame {
        func: first,
        pc: 0,
        loops: Vec::new(),
    }];

    while emitted < budget {
        let depth = stack.len();
        let Some(frame) = stack.last_mut() else {
            let next = handlers[rng.gen_range(0..handlers.len())];
            stack.push(Frame {
                func: next,
                pc: 0,
                loops: Vec::new(),
            });
            continue;
        };
        let func = &functions[frame.func];
        let pc = frame.pc;
        let line = func.start + pc;
        for k in 0..FETCHES_PER_LINE {
            if emitted == budget {
                return;
            }
            em.out.push(TraceRecord::Fetch {
                address: line * LINE_BYTES + k * FETCH_BYTES,
                thread_tag,
            });
            emitted += 1;
        }

        match func.lines[pc as usize] {
            Control::Call(callee) if depth <= depth_max => {
                frame.pc = pc + 1;
                stack.push(Frame {
                    func: callee,
                    pc: 0,
                    loops: Vec::new(),
                });
            }
            Control::BackEdge { target, trips } => match frame.loops.iter().position(|&(at, _)| at == pc) {
                Some(i) if frame.loops[i].1 == 0 => {
                    frame.loops.swap_remove(i);
                    frame.pc = pc + 1;
                }
                Some(i) => {
                    frame.loops[i].1 -= 1;
                    frame.pc = target;
                }
                None => {
                    frame.loops.push((pc, trips - 1));
                    frame.pc = target;
                }
            },
            Control::Forward { skip, taken } if rng.gen_bool(taken) => frame.pc = pc + 1 + skip,
            _ => frame.pc = pc + 1,
        }

        while let Some(top) = stack.last() {
            if top.pc < functions[top.func].lines.len() as u64 {
                break;
            }
            stack.pop();
        }
    }
}
