//! Per-path TCP health and a transport recommendation.
//!
//! Handshake RTT is the time from the app's SYN to the SYN/ACK the engine
//! builds once upstream connects. Loss is estimated from the app
//! retransmitting a segment it already sent (same sequence number, same
//! length). The recommendation is advisory only and never changes traffic.

use crate::io::trace::Direction;
use crate::packet::{FlowKey, Protocol, TcpFlags};
use crate::plugin::{EventKind, Plugin, PluginContext, PluginError, Services, TrafficEvent, Verdict};
use crate::time::Timestamp;
use serde::{Deserialize, Serialize};
use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddrV4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvisorConfig {
    pub loss_rate_threshold: f64,
    pub min_samples: u64,
}

impl Default for AdvisorConfig {
    fn default() -> Self {
        AdvisorConfig {
            loss_rate_threshold: 0.02,
            min_samples: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recommendation {
    KeepTcp,
    WrapLossTolerant,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    pub syn_rtt_us: Vec<u64>,
    /// Data segments seen for the first time.
    pub segments: u64,
    pub retransmissions: u64,
    /// Flows opened toward this destination.
    pub samples: u64,
}

impl PathStats {
    pub fn loss_estimate(&self) -> f64 {
        if self.segments == 0 {
            0.0
        } else {
            self.retransmissions as f64 / self.segments as f64
        }
    }

    pub fn median_rtt_us(&self) -> Option<u64> {
        let mut v = self.syn_rtt_us.clone();
        v.sort_unstable();
        v.get(v.len().saturating_sub(1) / 2).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathAdvice {
    pub dst: SocketAddrV4,
    pub stats: PathStats,
    pub loss_estimate: f64,
    pub recommendation: Recommendation,
}

#[derive(Debug, Default)]
struct FlowSeen {
    opened: Option<Timestamp>,
    segments: BTreeSet<(u32, usize)>,
}

#[derive(Debug, Default)]
pub struct ProtocolAdvisor {
    cfg: AdvisorConfig,
    paths: BTreeMap<SocketAddrV4, PathStats>,
    flows: BTreeMap<FlowKey, FlowSeen>,
}

impl ProtocolAdvisor {
    pub fn new(cfg: AdvisorConfig) -> Self {
        ProtocolAdvisor { cfg, ..Default::default() }
    }

    pub fn stats(&self, dst: SocketAddrV4) -> Option<&PathStats> {
        self.paths.get(&dst)
    }

    pub fn recommend(&self, s: &PathStats) -> Recommendation {
        if s.samples >= self.cfg.min_samples && s.loss_estimate() > self.cfg.loss_rate_threshold {
            Recommendation::WrapLossTolerant
        } else {
            Recommendation::KeepTcp
        }
    }

    /// Every observed path, ordered by destination.
    pub fn advice(&self) -> Vec<PathAdvice> {
        self.paths
            .iter()
            .map(|(dst, s)| PathAdvice {
                dst: *dst,
                stats: s.clone(),
                loss_estimate: s.loss_estimate(),
                recommendation: self.recommend(s),
            })
            .collect()
    }
}

impl Plugin for ProtocolAdvisor {
    fn on_event(&mut self, ctx: &PluginContext, ev: &TrafficEvent<'_>, services: &mut Services) -> Result<Verdict, PluginError> {
        let key = ctx.key;
        if key.protocol != Protocol::Tcp {
            return Ok(Verdict::Pass);
        }
        let now = services.now();
        match (ctx.kind, ctx.direction) {
            (EventKind::FlowOpen, Direction::AppToNet) => {
                self.paths.entry(key.dst).or_default().samples += 1;
                self.flows.insert(key, FlowSeen { opened: Some(now), ..Default::default() });
            }
            (EventKind::PacketIn, Direction::NetToApp) => {
                let syn = ev.packet.and_then(|p| p.tcp_header()).is_some_and(|h| h.flags.contains(TcpFlags::SYN));
                if let (true, Some(f)) = (syn, self.flows.get_mut(&key)) {
                    if let Some(t) = f.opened.take() {
                        self.paths.entry(key.dst).or_default().syn_rtt_us.push(now.since(t).as_micros() as u64);
                    }
                }
            }
            (EventKind::PacketOut, Direction::AppToNet) => {
                let Some(h) = ev.packet.and_then(|p| p.tcp_header()) else { return Ok(Verdict::Pass) };
                let len = ev.packet.map_or(0, |p| p.payload.len());
                if len > 0 {
                    let fresh = self.flows.entry(key).or_default().segments.insert((h.seq, len));
                    let s = self.paths.entry(key.dst).or_default();
                    if fresh {
                        s.segments += 1;
                    } else {
                        s.retransmissions += 1;
                    }
                }
            }
            (EventKind::FlowClose, _) => {
                self.flows.remove(&key);
            }
            _ => {}
        }
        Ok(Verdict::Pass)
    }

    fn memory_estimate(&self) -> u64 {
        let segs: usize = self.flows.values().map(|f| f.segments.len()).sum();
        (self.paths.len() * 128 + self.flows.len() * 64 + segs * 16) as u64
    }

    fn reported_cpu_us(&self) -> u64 {
        2
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
