//! Wall-clock operation against real sockets.
//!
//! The app side is any [`PacketConduit`]. This crate ships trace playback
//! and an in-memory queue; a tun device would plug in the same way.

use crate::config::RunConfig;
use crate::engine::{Emitted, Engine};
use crate::io::{PacketConduit, SocketUpstream};
use crate::packet::serialize_packet;
use crate::replay::{build_host, ReplayError};
use crate::report::{RunReport, TraceSummary};
use crate::time::Timestamp;
use std::time::{Duration, Instant};

pub struct LiveOutcome {
    pub report: RunReport,
    pub emitted: Vec<Emitted>,
}

/// Runs until the conduit is exhausted and the engine has been idle for
/// `linger`, pacing conduit packets by their timestamps.
pub fn run_live<C: PacketConduit>(cfg: &RunConfig, conduit: &mut C, linger: Duration) -> Result<LiveOutcome, ReplayError> {
    let (host, handles) = build_host(cfg)?;
    let upstream = SocketUpstream::new().map_err(|source| ReplayError::Io { path: "<sockets>".into(), source })?;
    let mut engine = Engine::new(cfg.engine.clone(), upstream, host, cfg.seed)?;
    let started = Instant::now();
    let origin = conduit.next_ready_at().unwrap_or(Timestamp::ZERO);
    let now = || Timestamp(origin.0 + started.elapsed().as_micros() as u64);
    let mut emitted = Vec::new();
    let mut summary = TraceSummary { first_us: origin.0, ..Default::default() };
    let mut idle_since: Option<Instant> = None;

    loop {
        while conduit.next_ready_at().is_none_or(|t| t <= now()) {
            let Some(p) = conduit.read_packet() else { break };
            summary.events += 1;
            summary.app_to_net += 1;
            summary.last_us = p.at.0;
            engine.on_app_bytes(now(), &p.bytes, &p.app_label);
        }
        let t = now();
        engine.poll_upstream(t);
        engine.tick(t);
        for e in engine.drain_emitted() {
            if e.direction == crate::io::Direction::NetToApp {
                if let Ok(bytes) = serialize_packet(&e.packet, cfg.engine.mtu) {
                    conduit.write_packet(e.at, &bytes);
                }
            }
            emitted.push(e);
        }

        let input_done = conduit.next_ready_at().is_none();
        if input_done && engine.flow_count() == 0 {
            let since = *idle_since.get_or_insert_with(Instant::now);
            if since.elapsed() >= linger {
                break;
            }
        } else {
            idle_since = None;
        }
        let next = [conduit.next_ready_at(), engine.next_deadline()].into_iter().flatten().min();
        let wait = next.map_or(Duration::from_millis(50), |n| n.since(now())).min(Duration::from_millis(50));
        engine
            .upstream_mut()
            .wait(Some(wait))
            .map_err(|source| ReplayError::Io { path: "<sockets>".into(), source })?;
    }
    let end = now();
    engine.host_mut().finalize(end);
    emitted.extend(engine.drain_emitted());
    summary.end_us = end.0;
    let (_, host, counters) = engine.into_parts();
    let report = crate::replay::build_report(cfg, cfg.seed, summary, counters, &host, &handles, 0);
    Ok(LiveOutcome { report, emitted })
}
