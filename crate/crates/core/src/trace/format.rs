//! Binary trace file format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SLOF"
//! 4       4     version, u32 little-endian (= 1)
//! 8       10*N  records
//!
//! record: kind u8 (0 = Fetch, 1 = RpcBegin, 2 = RpcEnd)
//!         thread_tag u8
//!         payload u64 little-endian (address, or rpc_id zero-extended)
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::TraceRecord;

pub const MAGIC: [u8; 4] = *b"SLOF";
pub const FORMAT_VERSION: u32 = 1;
pub const RECORD_BYTES: usize = 10;
const HEADER_BYTES: u64 = 8;

const KIND_FETCH: u8 = 0;
const KIND_RPC_BEGIN: u8 = 1;
const KIND_RPC_END: u8 = 2;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic at byte offset {offset}")]
    BadMagic { offset: u64 },
    #[error("unsupported trace version {version} at byte offset {offset}")]
    UnsupportedVersion { offset: u64, version: u32 },
    #[error("truncated record at byte offset {offset}")]
    TruncatedRecord { offset: u64 },
    #[error("unknown record kind {kind} at byte offset {offset}")]
    UnknownKind { offset: u64, kind: u8 },
    #[error("rpc id payload {payload:#x} exceeds 32 bits at byte offset {offset}")]
    BadPayload { offset: u64, payload: u64 },
    #[error("rpc end {rpc_id} without matching begin at byte offset {offset}")]
    UnmatchedRpcEnd { offset: u64, rpc_id: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TraceError {
    /// Byte offset of the fault, when the error is a format error.
    pub fn offset(&self) -> Option<u64> {
        match *self {
            TraceError::BadMagic { offset }
            | TraceError::UnsupportedVersion { offset, .. }
            | TraceError::TruncatedRecord { offset }
            | TraceError::UnknownKind { offset, .. }
            | TraceError::BadPayload { offset, .. }
            | TraceError::UnmatchedRpcEnd { offset, .. } => Some(offset),
            TraceError::Io(_) => None,
        }
    }
}

/// Streaming reader over a trace. Yields records in file order and stops
/// at the first malformed record.
pub struct TraceReader<R> {
    inner: R,
    offset: u64,
    open_rpcs: HashSet<u32>,
    failed: bool,
}

impl<R: Read> TraceReader<R> {
    /// Validates the header and positions the reader at the first record.
    pub fn new(mut inner: R) -> Result<Self, TraceError> {
        let mut magic = [0u8; 4];
        let n = read_full(&mut inner, &mut magic)?;
        if n < magic.len() || magic != MAGIC {
            return Err(TraceError::BadMagic { offset: 0 });
        }
        let mut version = [0u8; 4];
        if read_full(&mut inner, &mut version)? < version.len() {
            return Err(TraceError::TruncatedRecord { offset: 4 });
        }
        let version = u32::from_le_bytes(version);
        if version != FORMAT_VERSION {
            return Err(TraceError::UnsupportedVersion { offset: 4, version });
        }
        Ok(Self {
            inner,
            offset: HEADER_BYTES,
            open_rpcs: HashSet::new(),
            failed: false,
        })
    }

    fn next_record(&mut self) -> Result<Option<TraceRecord>, TraceError> {
        let mut buf = [0u8; RECORD_BYTES];
        let n = read_full(&mut self.inner, &mut buf)?;
        let offset = self.offset;
        if n == 0 {
            return Ok(None);
        }
        if n < RECORD_BYTES {
            return Err(TraceError::TruncatedRecord { offset });
        }
        self.offset += RECORD_BYTES as u64;

        let kind = buf[0];
        let thread_tag = buf[1];
        let payload = u64::from_le_bytes(buf[2..10].try_into().expect("8-byte slice"));
        let rpc_id = || u32::try_from(payload).map_err(|_| TraceError::BadPayload { offset, payload });
        let record = match kind {
            KIND_FETCH => TraceRecord::Fetch {
                address: payload,
                thread_tag,
            },
            KIND_RPC_BEGIN => {
                let rpc_id = rpc_id()?;
                self.open_rpcs.insert(rpc_id);
                TraceRecord::RpcBegin { rpc_id, thread_tag }
            }
            KIND_RPC_END => {
                let rpc_id = rpc_id()?;
                if !self.open_rpcs.remove(&rpc_id) {
                    return Err(TraceError::UnmatchedRpcEnd { offset, rpc_id });
                }
                TraceRecord::RpcEnd { rpc_id, thread_tag }
            }
            kind => return Err(TraceError::UnknownKind { offset, kind }),
        };
        Ok(Some(record))
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<TraceRecord, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.next_record() {
            Ok(r) => r.map(Ok),
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Reads a whole trace from any reader.
pub fn read_trace<R: Read>(reader: R) -> Result<Vec<TraceRecord>, TraceError> {
    TraceReader::new(reader)?.collect()
}

/// Loads a trace file from disk.
pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, TraceError> {
    read_trace(BufReader::new(File::open(path)?))
}

pub fn write_trace<W: Write>(mut writer: W, records: &[TraceRecord]) -> io::Result<()> {
    writer.write_all(&MAGIC)?;
    writer.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for record in records {
        let (kind, tag, payload) = match *record {
            TraceRecord::Fetch { address, thread_tag } => (KIND_FETCH, thread_tag, address),
            TraceRecord::RpcBegin { rpc_id, thread_tag } => (KIND_RPC_BEGIN, thread_tag, u64::from(rpc_id)),
            TraceRecord::RpcEnd { rpc_id, thread_tag } => (KIND_RPC_END, thread_tag, u64::from(rpc_id)),
        };
        let mut buf = [0u8; RECORD_BYTES];
        buf[0] = kind;
        buf[1] = tag;
        buf[2..].copy_from_slice(&payload.to_le_bytes());
        writer.write_all(&buf)?;
    }
    writer.flush()
}

pub fn save_trace(path: impl AsRef<Path>, records: &[TraceRecord]) -> io::Result<()> {
    write_trace(BufWriter::new(File::create(path)?), records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> Vec<u8> {
        let mut v = MAGIC.to_vec();
        v.extend_from_slice(&1u32.to_le_bytes());
        v
    }

    fn record(kind: u8, tag: u8, payload: u64) -> Vec<u8> {
        let mut v = vec![kind, tag];
        v.extend_from_slice(&payload.to_le_bytes());
        v
    }

    #[test]
    fn empty_body_is_empty_stream() {
        assert!(read_trace(&header()[..]).unwrap().is_empty());
    }

    #[test]
    fn single_fetch_line_one() {
        let mut bytes = header();
        bytes.extend(record(0, 3, 0x40));
        let records = read_trace(&bytes[..]).unwrap();
        assert_eq!(
            records,
            vec![TraceRecord::Fetch {
                address: 0x40,
                thread_tag: 3
            }]
        );
        assert_eq!(records[0].line(), Some(1));
    }

    #[test]
    fn bad_magic() {
        let err = read_trace(&b"SLOG\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, TraceError::BadMagic { offset: 0 }));
        let err = read_trace(&b"SL"[..]).unwrap_err();
        assert!(matches!(err, TraceError::BadMagic { offset: 0 }));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            read_trace(&bytes[..]).unwrap_err(),
            TraceError::UnsupportedVersion { offset: 4, version: 2 }
        ));
    }

    #[test]
    fn truncated_record_reports_record_offset() {
        let mut bytes = header();
        bytes.extend(record(0, 0, 0x1000));
        bytes.extend(&record(0, 0, 0x2000)[..7]);
        let err = read_trace(&bytes[..]).unwrap_err();
        assert!(matches!(err, TraceError::TruncatedRecord { offset: 18 }), "{err:?}");
    }

    #[test]
    fn unknown_kind() {
        let mut bytes = header();
        bytes.extend(record(0, 0, 0));
        bytes.extend(record(7, 0, 0));
        let err = read_trace(&bytes[..]).unwrap_err();
        assert!(matches!(err, TraceError::UnknownKind { offset: 18, kind: 7 }));
        assert_eq!(err.offset(), Some(18));
    }

    #[test]
    fn rpc_end_needs_begin() {
        let mut bytes = header();
        bytes.extend(record(1, 0, 5));
        bytes.extend(record(2, 0, 5));
        bytes.extend(record(2, 0, 5));
        let err = read_trace(&bytes[..]).unwrap_err();
        assert!(matches!(err, TraceError::UnmatchedRpcEnd { offset: 28, rpc_id: 5 }));
    }

    #[test]
    fn oversized_rpc_payload_rejected() {
        let mut bytes = header();
        bytes.extend(record(1, 0, 1 << 40));
        assert!(matches!(
            read_trace(&bytes[..]).unwrap_err(),
            TraceError::BadPayload { offset: 8, .. }
        ));
    }

    #[test]
    fn reader_stops_after_error() {
        let mut bytes = header();
        bytes.extend(record(9, 0, 0));
        bytes.extend(record(0, 0, 0));
        let mut reader = TraceReader::new(&bytes[..]).unwrap();
        assert!(reader.next().unwrap().is_err());
        assert!(reader.next().is_none());
    }

    #[test]
    fn write_layout() {
        let mut out = Vec::new();
        let records = [
            TraceRecord::RpcBegin {
                rpc_id: 0xAABB,
                thread_tag: 2,
            },
            TraceRecord::Fetch {
                address: u64::MAX,
                thread_tag: 2,
            },
            TraceRecord::RpcEnd {
                rpc_id: 0xAABB,
                thread_tag: 2,
            },
        ];
        write_trace(&mut out, &records).unwrap();
        assert_eq!(out.len(), 8 + 3 * RECORD_BYTES);
        assert_eq!(&out[..4], b"SLOF");
        assert_eq!(&out[8..18], &record(1, 2, 0xAABB)[..]);
        assert_eq!(read_trace(&out[..]).unwrap(), records);
    }
}
