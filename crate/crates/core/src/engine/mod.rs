//! Flow engine: terminates app TCP, forwards UDP, runs the plugin chain.
//!
//! The engine is a single-threaded state machine. A driver feeds it app
//! packets, upstream completions and clock ticks, then drains the packets it
//! wants delivered. Nothing here reads a clock; every entry point takes `now`.

mod config;
mod tcp;
mod udp;

pub use config::{ConfigError, EngineConfig, IsnMode};
pub use tcp::TcpState;

use crate::io::trace::Direction;
use crate::io::upstream::{DatagramId, StreamId, UpstreamEvent, UpstreamNetwork};
use crate::packet::{parse_packet, serialize_packet, FlowKey, Packet, PacketError, Transport};
use crate::plugin::{
    EffectiveAction, EventKind, EventMeta, HostRequest, PluginHandle, PluginHost, ProbeId, ProbeOutcome,
};
use crate::time::Timestamp;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddrV4;
use tcp::TcpFlow;
use udp::{SocketUse, UdpFlow};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtoCounters {
    pub created: u64,
    pub closed: u64,
    pub evicted_idle: u64,
    pub evicted_pressure: u64,
    pub reset: u64,
    pub refused: u64,
    pub blocked: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineCounters {
    pub tcp: ProtoCounters,
    pub udp: ProtoCounters,
    pub packets_from_app: u64,
    pub packets_to_app: u64,
    pub bytes_to_net: u64,
    pub bytes_to_app: u64,
    pub bad_checksum: u64,
    pub malformed: u64,
    pub unsupported_transport: u64,
    /// Resets sent for segments that matched no flow.
    pub no_flow_resets: u64,
    /// Times a new handle was refused because the budget was spent.
    pub budget_exhausted: u64,
    pub handle_high_water: u64,
    pub stray_datagrams: u64,
    pub probes_sent: u64,
}

/// A packet the engine produced. `NetToApp` packets go to the app;
/// `AppToNet` ones record what was forwarded upstream after plugins ran.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emitted {
    pub at: Timestamp,
    pub direction: Direction,
    pub app_label: String,
    pub packet: Packet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ProbeSocket {
    id: ProbeId,
    plugin: PluginHandle,
    deadline: Timestamp,
}

pub struct Engine<U: UpstreamNetwork> {
    cfg: EngineConfig,
    upstream: U,
    host: PluginHost,
    rng: ChaCha8Rng,
    tcp: BTreeMap<FlowKey, TcpFlow>,
    udp: BTreeMap<FlowKey, UdpFlow>,
    streams: HashMap<StreamId, FlowKey>,
    sockets: BTreeMap<DatagramId, SocketUse>,
    dns_shares: BTreeMap<(std::net::Ipv4Addr, SocketAddrV4), DatagramId>,
    probes: BTreeMap<DatagramId, ProbeSocket>,
    wakeups: BTreeMap<(Timestamp, u64), PluginHandle>,
    wake_seq: u64,
    next_sweep: Timestamp,
    counters: EngineCounters,
    out: Vec<Emitted>,
    record_egress: bool,
}

impl<U: UpstreamNetwork> Engine<U> {
    pub fn new(cfg: EngineConfig, upstream: U, host: PluginHost, seed: u64) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let next_sweep = Timestamp::ZERO + EngineConfig::secs(cfg.sweep_interval);
        Ok(Engine {
            cfg,
            upstream,
            host,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tcp: BTreeMap::new(),
            udp: BTreeMap::new(),
            streams: HashMap::new(),
            sockets: BTreeMap::new(),
            dns_shares: BTreeMap::new(),
            probes: BTreeMap::new(),
            wakeups: BTreeMap::new(),
            wake_seq: 0,
            next_sweep,
            counters: EngineCounters::default(),
            out: Vec::new(),
            record_egress: true,
        })
    }

    /// Stop keeping `AppToNet` copies of forwarded packets.
    pub fn set_record_egress(&mut self, on: bool) {
        self.record_egress = on;
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn counters(&self) -> &EngineCounters {
        &self.counters
    }

    pub fn host(&self) -> &PluginHost {
        &self.host
    }

    pub fn host_mut(&mut self) -> &mut PluginHost {
        &mut self.host
    }

    pub fn upstream(&self) -> &U {
        &self.upstream
    }

    pub fn upstream_mut(&mut self) -> &mut U {
        &mut self.upstream
    }

    pub fn into_parts(self) -> (U, PluginHost, EngineCounters) {
        (self.upstream, self.host, self.counters)
    }

    pub fn tcp_state(&self, key: &FlowKey) -> Option<TcpState> {
        self.tcp.get(key).map(|f| f.state)
    }

    pub fn has_udp_flow(&self, key: &FlowKey) -> bool {
        self.udp.contains_key(key)
    }

    pub fn flow_count(&self) -> usize {
        self.tcp.len() + self.udp.len()
    }

    pub fn active_udp_flows(&self) -> usize {
        self.udp.len()
    }

    pub fn active_tcp_flows(&self) -> usize {
        self.tcp.values().filter(|f| f.state != TcpState::Closed).count()
    }

    /// Takes every packet produced since the last call, in emission order.
    pub fn drain_emitted(&mut self) -> Vec<Emitted> {
        std::mem::take(&mut self.out)
    }

    /// Takes only the packets meant for the app.
    pub fn drain_to_app(&mut self) -> Vec<Packet> {
        self.drain_emitted()
            .into_iter()
            .filter(|e| e.direction == Direction::NetToApp)
            .map(|e| e.packet)
            .collect()
    }

    /// Raw bytes from the app side. Checksum mismatches are counted and the
    /// packet is still processed; anything structurally broken is dropped.
    pub fn on_app_bytes(&mut self, now: Timestamp, bytes: &[u8], app_label: &str) {
        let packet = match parse_packet(bytes) {
            Ok(p) => p,
            Err(PacketError::BadChecksum { packet, .. }) => {
                self.counters.bad_checksum += 1;
                *packet
            }
            Err(e) => {
                log::debug!("dropping app packet: {e}");
                self.counters.packets_from_app += 1;
                self.counters.malformed += 1;
                return;
            }
        };
        self.on_app_packet(now, &packet, app_label);
    }

    pub fn on_app_packet(&mut self, now: Timestamp, packet: &Packet, app_label: &str) {
        self.counters.packets_from_app += 1;
        match packet.transport {
            Transport::Tcp(_) => self.on_tcp(now, packet, app_label),
            Transport::Udp(_) => self.on_udp(now, packet, app_label),
            Transport::Raw => self.counters.unsupported_transport += 1,
        }
        self.service_requests(now);
    }

    /// Processes every upstream completion due at or before `now`.
    pub fn poll_upstream(&mut self, now: Timestamp) {
        while let Some(ev) = self.upstream.poll_event(now) {
            self.on_upstream(now, ev);
        }
        self.service_requests(now);
    }

    /// Fires due probe timeouts, plugin wakeups and the periodic sweep.
    pub fn tick(&mut self, now: Timestamp) {
        let expired: Vec<_> = self
            .probes
            .iter()
            .filter(|(_, p)| p.deadline <= now)
            .map(|(s, p)| (*s, *p))
            .collect();
        for (sock, p) in expired {
            self.probes.remove(&sock);
            self.upstream.close_datagram(now, sock);
            self.host.deliver_probe_result(now, p.id, ProbeOutcome::Timeout);
        }
        while let Some((&(at, seq), &h)) = self.wakeups.iter().next() {
            if at > now {
                break;
            }
            self.wakeups.remove(&(at, seq));
            self.host.deliver_wakeup(now, h);
        }
        if now >= self.next_sweep {
            self.sweep(now);
            self.host.governor_tick(now);
            let step = EngineConfig::secs(self.cfg.sweep_interval);
            while self.next_sweep <= now {
                self.next_sweep = self.next_sweep + step;
            }
        }
        self.service_requests(now);
    }

    /// Earliest time at which [`tick`](Self::tick) or
    /// [`poll_upstream`](Self::poll_upstream) has work, or `None` when idle.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        let busy = !(self.tcp.is_empty() && self.udp.is_empty() && self.probes.is_empty());
        [
            self.upstream.next_event_at(),
            self.probes.values().map(|p| p.deadline).min(),
            self.wakeups.keys().next().map(|(t, _)| *t),
            busy.then_some(self.next_sweep),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    /// Runs upstream events and timers in time order up to and including `until`.
    pub fn run_until(&mut self, until: Timestamp) {
        while let Some(t) = self.next_deadline() {
            if t > until {
                break;
            }
            self.poll_upstream(t);
            self.tick(t);
        }
        self.poll_upstream(until);
    }

    /// Evicts idle UDP flows, drops closed TCP entries, times out stalled TCP
    /// flows and relieves handle pressure.
    pub fn sweep(&mut self, now: Timestamp) {
        self.sweep_tcp(now);
        self.sweep_udp(now);
    }

    fn note_handles(&mut self) {
        let n = self.upstream.active_handle_count() as u64;
        self.counters.handle_high_water = self.counters.handle_high_water.max(n);
    }

    fn budget_available(&mut self) -> bool {
        if self.upstream.active_handle_count() < self.cfg.socket_budget {
            true
        } else {
            self.counters.budget_exhausted += 1;
            false
        }
    }

    fn emit(&mut self, now: Timestamp, direction: Direction, app_label: &str, mut packet: Packet) {
        packet.captured_at = now;
        if direction == Direction::NetToApp {
            self.counters.packets_to_app += 1;
            if serialize_packet(&packet, self.cfg.mtu).is_err() {
                log::warn!("engine built an oversized packet for {}", app_label);
            }
        } else if !self.record_egress {
            return;
        }
        self.out.push(Emitted {
            at: now,
            direction,
            app_label: app_label.to_string(),
            packet,
        });
    }

    fn chain(
        &mut self,
        now: Timestamp,
        key: FlowKey,
        app_label: &str,
        direction: Direction,
        kind: EventKind,
        packet: Option<&Packet>,
        payload: &[u8],
    ) -> EffectiveAction {
        if self.host.is_empty() {
            return EffectiveAction::Pass;
        }
        let meta = EventMeta {
            key,
            app_label: app_label.to_string(),
            direction,
            kind,
            fixed_length: key.protocol == crate::packet::Protocol::Tcp,
        };
        self.host.chain_apply(now, &meta, packet, payload)
    }

    fn on_upstream(&mut self, now: Timestamp, ev: UpstreamEvent) {
        match ev {
            UpstreamEvent::Datagram { socket, from, payload } => self.on_datagram(now, socket, from, payload),
            UpstreamEvent::Connected { stream, result } => self.on_connected(now, stream, result),
            UpstreamEvent::Readable { stream } => self.on_stream_readable(now, stream),
            UpstreamEvent::Writable { stream } => self.on_stream_writable(now, stream),
            UpstreamEvent::PeerClosed { stream } => self.on_stream_closed(now, stream),
            UpstreamEvent::PeerReset { stream } => self.on_stream_reset(now, stream),
        }
    }

    /// Carries out probes and wakeups plugins asked for.
    fn service_requests(&mut self, now: Timestamp) {
        loop {
            let reqs = self.host.take_requests();
            if reqs.is_empty() {
                return;
            }
            for r in reqs {
                match r {
                    HostRequest::Wake { plugin, at } => {
                        self.wake_seq += 1;
                        self.wakeups.insert((at.max(now), self.wake_seq), plugin);
                    }
                    HostRequest::Probe { plugin, id, dst, payload, timeout } => {
                        if !self.budget_available() {
                            self.host.deliver_probe_result(now, id, ProbeOutcome::Failed);
                            continue;
                        }
                        let sock = match self.upstream.open_datagram(now) {
                            Ok(s) => s,
                            Err(e) => {
                                log::debug!("probe socket: {e}");
                                self.host.deliver_probe_result(now, id, ProbeOutcome::Failed);
                                continue;
                            }
                        };
                        self.note_handles();
                        self.counters.probes_sent += 1;
                        if self.upstream.send_to(now, sock, dst, &payload).is_err() {
                            self.upstream.close_datagram(now, sock);
                            self.host.deliver_probe_result(now, id, ProbeOutcome::Failed);
                            continue;
                        }
                        self.probes.insert(
                            sock,
                            ProbeSocket {
                                id,
                                plugin,
                                deadline: now + timeout,
                            },
                        );
                    }
                }
            }
        }
    }

    fn on_probe_reply(&mut self, now: Timestamp, socket: DatagramId, from: SocketAddrV4, payload: Vec<u8>) {
        if let Some(p) = self.probes.remove(&socket) {
            self.upstream.close_datagram(now, socket);
            let _ = p.plugin;
            self.host
                .deliver_probe_result(now, p.id, ProbeOutcome::Response { payload, from });
        }
    }
}

pub(crate) fn seq_lt(a: u32, b: u32) -> bool {
    (a.wrapping_sub(b) as i32) < 0
}

pub(crate) fn seq_le(a: u32, b: u32) -> bool {
    a == b || seq_lt(a, b)
}
