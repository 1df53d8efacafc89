//! JSON-lines trace files: one `{ts_us, dir, app, pkt_b64}` object per line.

use crate::time::Timestamp;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AppToNet,
    NetToApp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub timestamp: Timestamp,
    pub direction: Direction,
    /// Application attribution; empty when unknown.
    pub app_label: String,
    /// Raw IPv4 packet bytes.
    pub packet: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceLine {
    ts_us: u64,
    dir: Direction,
    #[serde(default)]
    app: String,
    pkt_b64: String,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("malformed trace at line {line}: {reason}")]
    MalformedTrace { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Checks that timestamps never decrease.
pub fn validate_order(events: &[TraceEvent]) -> Result<(), TraceError> {
    for (i, w) in events.windows(2).enumerate() {
        if w[1].timestamp < w[0].timestamp {
            return Err(TraceError::MalformedTrace {
                line: i + 2,
                reason: format!(
                    "timestamp {} precedes previous {}",
                    w[1].timestamp.0, w[0].timestamp.0
                ),
            });
        }
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<TraceEvent>, TraceError> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| TraceError::MalformedTrace { line: i + 1, reason };
        let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let packet = B64
            .decode(parsed.pkt_b64.as_bytes())
            .map_err(|e| malformed(format!("pkt_b64: {e}")))?;
        let ev = TraceEvent {
            timestamp: Timestamp(parsed.ts_us),
            direction: parsed.dir,
            app_label: parsed.app,
            packet,
        };
        if let Some(prev) = events.last().map(|e: &TraceEvent| e.timestamp) {
            if ev.timestamp < prev {
                return Err(malformed(format!(
                    "timestamp {} precedes previous {}",
                    ev.timestamp.0, prev.0
                )));
            }
        }
        events.push(ev);
    }
    Ok(events)
}

pub fn write_trace<W: Write>(mut writer: W, events: &[TraceEvent]) -> Result<(), TraceError> {
    for ev in events {
        let line = TraceLine {
            ts_us: ev.timestamp.0,
            dir: ev.direction,
            app: ev.app_label.clone(),
            pkt_b64: B64.encode(&ev.packet),
        };
        serde_json::to_writer(&mut writer, &line).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace_file(path: &std::path::Path) -> Result<Vec<TraceEvent>, TraceError> {
    let f = std::fs::File::open(path)?;
    read_trace(std::io::BufReader::new(f))
}
