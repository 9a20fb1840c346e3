//! Capture of southbound traffic as seen by the controller.
//!
//! A trace file is a sequence of records:
//!
//! ```text
//! direction u8 (0 = controller to agent, 1 = agent to controller)
//! node_id   u32 BE
//! time_us   u64 BE   microseconds since the capture started
//! length    u32 BE
//! frame     `length` raw bytes
//! ```
//!
//! Alongside `trace.bin` the harness writes `trace.bin.txt`, the same
//! records decoded and hex-dumped.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use qkdchain_core::codec::{self, DecodeError, Message};
use qkdchain_core::model::NodeId;

const RECORD_HEADER_LEN: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToAgent,
    FromAgent,
}

impl Direction {
    fn code(self) -> u8 {
        match self {
            Direction::ToAgent => 0,
            Direction::FromAgent => 1,
        }
    }

    fn arrow(self) -> &'static str {
        match self {
            Direction::ToAgent => "controller -> node",
            Direction::FromAgent => "node -> controller",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub direction: Direction,
    pub node: NodeId,
    pub time_us: u64,
    pub frame: Vec<u8>,
}

/// Shared, append-only capture buffer.
#[derive(Debug, Clone)]
pub struct TraceSink {
    started: Instant,
    records: Arc<Mutex<Vec<TraceRecord>>>,
}

impl Default for TraceSink {
    fn default() -> Self {
        TraceSink { started: Instant::now(), records: Arc::default() }
    }
}

impl TraceSink {
    pub fn record(&self, direction: Direction, node: NodeId, frame: &[u8]) {
        let time_us = self.started.elapsed().as_micros() as u64;
        self.records
            .lock()
            .expect("trace lock")
            .push(TraceRecord { direction, node, time_us, frame: frame.to_vec() });
    }

    pub fn snapshot(&self) -> Vec<TraceRecord> {
        self.records.lock().expect("trace lock").clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("trace lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.records.lock().expect("trace lock").clear();
    }

    /// Writes the binary capture to `path` and the decoded sidecar next to it.
    pub fn write(&self, path: &Path) -> std::io::Result<PathBuf> {
        let records = self.snapshot();
        std::fs::write(path, encode_records(&records))?;
        let sidecar = sidecar_path(path);
        std::fs::write(&sidecar, render(&parse_records(&encode_records(&records))))?;
        Ok(sidecar)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

pub fn encode_records(records: &[TraceRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.push(r.direction.code());
        out.extend_from_slice(&r.node.0.to_be_bytes());
        out.extend_from_slice(&r.time_us.to_be_bytes());
        out.extend_from_slice(&(r.frame.len() as u32).to_be_bytes());
        out.extend_from_slice(&r.frame);
    }
    out
}

#[derive(Debug, Clone)]
pub struct DecodedRecord {
    pub record: TraceRecord,
    pub message: Result<Message, DecodeError>,
}

#[derive(Debug, Clone, Default)]
pub struct TraceDump {
    pub records: Vec<DecodedRecord>,
    /// Set when the capture ends in the middle of a record.
    pub corrupt_tail: Option<String>,
}

/// Splits a capture into records and decodes every frame. A record that
/// cannot be completed stops parsing and is reported in `corrupt_tail`.
pub fn parse_records(bytes: &[u8]) -> TraceDump {
    let mut dump = TraceDump::default();
    let mut pos = 0;
    while pos < bytes.len() {
        let rest = &bytes[pos..];
        if rest.len() < RECORD_HEADER_LEN {
            dump.corrupt_tail = Some(format!(
                "offset {pos}: record header needs {RECORD_HEADER_LEN} bytes, {} left",
                rest.len()
            ));
            break;
        }
        let direction = match rest[0] {
            0 => Direction::ToAgent,
            1 => Direction::FromAgent,
            other => {
                dump.corrupt_tail = Some(format!("offset {pos}: unknown direction byte {other}"));
                break;
            }
        };
        let node = NodeId(u32::from_be_bytes(rest[1..5].try_into().unwrap()));
        let time_us = u64::from_be_bytes(rest[5..13].try_into().unwrap());
        let len = u32::from_be_bytes(rest[13..17].try_into().unwrap()) as usize;
        if rest.len() < RECORD_HEADER_LEN + len {
            dump.corrupt_tail = Some(format!(
                "offset {pos}: frame of {len} bytes truncated to {}",
                rest.len() - RECORD_HEADER_LEN
            ));
            break;
        }
        let frame = rest[RECORD_HEADER_LEN..RECORD_HEADER_LEN + len].to_vec();
        let message = codec::decode(&frame);
        dump.records.push(DecodedRecord { record: TraceRecord { direction, node, time_us, frame }, message });
        pos += RECORD_HEADER_LEN + len;
    }
    dump
}

/// Human-readable listing: one block per frame with the decoded fields and
/// a hex dump; undecodable frames are flagged.
pub fn render(dump: &TraceDump) -> String {
    let mut out = String::new();
    for (i, d) in dump.records.iter().enumerate() {
        let r = &d.record;
        let _ = writeln!(
            out,
            "#{i} t={:.3}ms {} {} ({} bytes)",
            r.time_us as f64 / 1000.0,
            r.direction.arrow(),
            r.node,
            r.frame.len()
        );
        match &d.message {
            Ok(m) => {
                let _ = writeln!(out, "    {m}");
            }
            Err(e) => {
                let _ = writeln!(out, "    UNDECODABLE: {e}");
            }
        }
        for line in codec::hex_dump(&r.frame).lines() {
            let _ = writeln!(out, "    {line}");
        }
    }
    if let Some(tail) = &dump.corrupt_tail {
        let _ = writeln!(out, "CORRUPT: {tail}");
    }
    out
}
