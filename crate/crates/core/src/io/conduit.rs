//! App-side packet conduits.
//!
//! A conduit stands where a tun device would: it hands the engine whole IP
//! packets written by applications and accepts packets travelling back to
//! them. A real tun device is an extension point behind [`PacketConduit`];
//! this module ships trace replay and an in-memory queue.

use super::trace::{validate_order, Direction, TraceError, TraceEvent};
use crate::time::Timestamp;
use std::collections::VecDeque;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConduitPacket {
    pub at: Timestamp,
    pub app_label: String,
    pub bytes: Vec<u8>,
}

pub trait PacketConduit {
    /// Next whole packet from the app side, or `None` when nothing is
    /// available (end of stream for replay).
    fn read_packet(&mut self) -> Option<ConduitPacket>;

    /// Sends a packet toward the app side.
    fn write_packet(&mut self, at: Timestamp, bytes: &[u8]);

    /// When the next packet becomes readable, if known. Drives the virtual clock.
    fn next_ready_at(&self) -> Option<Timestamp> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Speed {
    AsFastAsPossible,
    /// Wall-clock pacing; 2.0 plays twice as fast as recorded.
    Multiplier(f64),
}

/// Replays the app-to-network half of a trace and records what comes back.
#[derive(Debug)]
pub struct ReplayConduit {
    pending: VecDeque<TraceEvent>,
    speed: Speed,
    anchor: Option<(Instant, Timestamp)>,
    written: Vec<(Timestamp, Vec<u8>)>,
}

impl ReplayConduit {
    pub fn new(trace: Vec<TraceEvent>, speed: Speed) -> Result<Self, TraceError> {
        validate_order(&trace)?;
        Ok(ReplayConduit {
            pending: trace
                .into_iter()
                .filter(|e| e.direction == Direction::AppToNet)
                .collect(),
            speed,
            anchor: None,
            written: Vec::new(),
        })
    }

    /// Packets the engine wrote toward the app, with their timestamps.
    pub fn written(&self) -> &[(Timestamp, Vec<u8>)] {
        &self.written
    }

    pub fn into_written(self) -> Vec<(Timestamp, Vec<u8>)> {
        self.written
    }

    pub fn remaining(&self) -> usize {
        self.pending.len()
    }
}

impl PacketConduit for ReplayConduit {
    fn read_packet(&mut self) -> Option<ConduitPacket> {
        let ev = self.pending.pop_front()?;
        if let Speed::Multiplier(m) = self.speed {
            let (wall0, ts0) = *self.anchor.get_or_insert((Instant::now(), ev.timestamp));
            let offset = ev.timestamp.since(ts0).as_secs_f64() / m.max(f64::MIN_POSITIVE);
            let due = wall0 + Duration::from_secs_f64(offset);
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
        Some(ConduitPacket {
            at: ev.timestamp,
            app_label: ev.app_label,
            bytes: ev.packet,
        })
    }

    fn write_packet(&mut self, at: Timestamp, bytes: &[u8]) {
        self.written.push((at, bytes.to_vec()));
    }

    fn next_ready_at(&self) -> Option<Timestamp> {
        self.pending.front().map(|e| e.timestamp)
    }
}

/// Unbounded in-memory queues in both directions.
#[derive(Debug, Default)]
pub struct MemoryConduit {
    inbound: VecDeque<ConduitPacket>,
    outbound: VecDeque<(Timestamp, Vec<u8>)>,
}

impl MemoryConduit {
    pub fn new() -> Self {
        Self::default()
    }

    /// Queues a packet as if an app had written it.
    pub fn inject(&mut self, at: Timestamp, app_label: &str, bytes: Vec<u8>) {
        self.inbound.push_back(ConduitPacket {
            at,
            app_label: app_label.to_string(),
            bytes,
        });
    }

    /// Next packet the engine sent toward the app.
    pub fn take_outbound(&mut self) -> Option<(Timestamp, Vec<u8>)> {
        self.outbound.pop_front()
    }

    pub fn outbound_len(&self) -> usize {
        self.outbound.len()
    }
}

impl PacketConduit for MemoryConduit {
    fn read_packet(&mut self) -> Option<ConduitPacket> {
        self.inbound.pop_front()
    }

    fn write_packet(&mut self, at: Timestamp, bytes: &[u8]) {
        self.outbound.push_back((at, bytes.to_vec()));
    }

    fn next_ready_at(&self) -> Option<Timestamp> {
        self.inbound.front().map(|p| p.at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(ts: u64, dir: Direction, b: u8) -> TraceEvent {
        TraceEvent {
            timestamp: Timestamp(ts),
            direction: dir,
            app_label: "a".into(),
            packet: vec![b],
        }
    }

    #[test]
    fn empty_trace_ends_immediately() {
        let mut c = ReplayConduit::new(vec![], Speed::AsFastAsPossible).unwrap();
        assert!(c.read_packet().is_none());
        assert!(c.next_ready_at().is_none());
    }

    #[test]
    fn only_app_to_net_is_surfaced_in_order() {
        let mut c = ReplayConduit::new(
            vec![
                ev(0, Direction::AppToNet, 1),
                ev(5, Direction::NetToApp, 2),
                ev(5, Direction::AppToNet, 3),
            ],
            Speed::AsFastAsPossible,
        )
        .unwrap();
        assert_eq!(c.read_packet().unwrap().bytes, vec![1]);
        assert_eq!(c.next_ready_at(), Some(Timestamp(5)));
        assert_eq!(c.read_packet().unwrap().bytes, vec![3]);
        assert!(c.read_packet().is_none());
    }

    #[test]
    fn decreasing_timestamps_rejected() {
        let r = ReplayConduit::new(
            vec![ev(10, Direction::AppToNet, 1), ev(9, Direction::AppToNet, 2)],
            Speed::AsFastAsPossible,
        );
        assert!(matches!(r, Err(TraceError::MalformedTrace { .. })));
    }

    #[test]
    fn realtime_pacing_keeps_gaps() {
        let mut c = ReplayConduit::new(
            vec![ev(0, Direction::AppToNet, 1), ev(1000, Direction::AppToNet, 2)],
            Speed::Multiplier(1.0),
        )
        .unwrap();
        let t0 = Instant::now();
        c.read_packet().unwrap();
        c.read_packet().unwrap();
        assert!(t0.elapsed() >= Duration::from_millis(1));
    }

    #[test]
    fn writes_are_recorded() {
        let mut c = ReplayConduit::new(vec![], Speed::AsFastAsPossible).unwrap();
        c.write_packet(Timestamp(3), &[9, 9]);
        assert_eq!(c.written(), &[(Timestamp(3), vec![9, 9])]);
    }
}
