//! NAT-style UDP forwarding with inactivity timeouts.
//!
//! Each app-side UDP flow owns one datagram socket, except DNS: every query
//! from one app address to one resolver goes through a shared socket, and
//! replies are routed back by message id.

use super::{Engine, EngineConfig};
use crate::io::dns::{self, DNS_PORT};
use crate::io::trace::Direction;
use crate::io::upstream::{DatagramId, UpstreamNetwork};
use crate::packet::{flow_key_of, FlowKey, Packet};
use crate::plugin::{EffectiveAction, EventKind};
use crate::time::Timestamp;
use std::collections::{BTreeMap, BTreeSet};
use std::net::{Ipv4Addr, SocketAddrV4};

#[derive(Debug)]
pub(crate) struct UdpFlow {
    pub key: FlowKey,
    pub app_label: String,
    pub socket: Option<DatagramId>,
    pub upstream_dst: SocketAddrV4,
    pub last_activity: Timestamp,
    pub is_dns: bool,
    /// Blocked: datagrams are dropped until the flow times out.
    blocked: bool,
    /// Answered locally with this payload instead of being forwarded.
    local_reply: Option<Vec<u8>>,
}

#[derive(Debug)]
pub(crate) enum SocketUse {
    Flow(FlowKey),
    Dns {
        share: (Ipv4Addr, SocketAddrV4),
        members: BTreeSet<FlowKey>,
        /// On-the-wire id → (id the app used, flow).
        pending: BTreeMap<u16, (u16, FlowKey)>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Eviction {
    Idle,
    Pressure,
}

impl<U: UpstreamNetwork> Engine<U> {
    pub(super) fn on_udp(&mut self, now: Timestamp, p: &Packet, label: &str) {
        let key = flow_key_of(p).expect("udp");
        if let Some(mut f) = self.udp.remove(&key) {
            f.last_activity = now;
            self.udp_existing(now, &mut f, p);
            self.udp.insert(key, f);
        } else {
            self.udp_new(now, key, p, label);
        }
    }

    fn udp_existing(&mut self, now: Timestamp, f: &mut UdpFlow, p: &Packet) {
        if f.blocked {
            self.counters.udp.dropped += 1;
            return;
        }
        if let Some(reply) = f.local_reply.clone() {
            self.udp_to_app(now, f, reply);
            return;
        }
        let label = f.app_label.clone();
        let data = match self.chain(now, f.key, &label, Direction::AppToNet, EventKind::PacketOut, Some(p), &p.payload) {
            EffectiveAction::Pass | EffectiveAction::Redirect { .. } => p.payload.clone(),
            EffectiveAction::Modify(m) => m,
            EffectiveAction::Block { mode, .. } => {
                self.counters.udp.blocked += 1;
                self.detach_socket(now, f);
                match mode {
                    crate::plugin::BlockMode::InjectResponse(n) => {
                        f.local_reply = Some(n.clone());
                        self.udp_to_app(now, f, n);
                    }
                    _ => f.blocked = true,
                }
                return;
            }
        };
        self.udp_forward(now, f, p, data);
    }

    fn udp_new(&mut self, now: Timestamp, key: FlowKey, p: &Packet, label: &str) {
        let mut f = UdpFlow {
            key,
            app_label: label.to_string(),
            socket: None,
            upstream_dst: key.dst,
            last_activity: now,
            is_dns: key.dst.port() == DNS_PORT,
            blocked: false,
            local_reply: None,
        };
        let mut data = p.payload.clone();
        match self.chain(now, key, label, Direction::AppToNet, EventKind::FlowOpen, Some(p), &p.payload) {
            EffectiveAction::Pass => {}
            EffectiveAction::Modify(m) => data = m,
            EffectiveAction::Redirect { dst, .. } => f.upstream_dst = dst,
            EffectiveAction::Block { mode, .. } => {
                self.counters.udp.created += 1;
                self.counters.udp.blocked += 1;
                match mode {
                    crate::plugin::BlockMode::InjectResponse(n) => {
                        f.local_reply = Some(n.clone());
                        self.udp_to_app(now, &f, n);
                    }
                    _ => f.blocked = true,
                }
                self.udp.insert(key, f);
                return;
            }
        }
        let socket = if f.is_dns {
            let share = (*key.src.ip(), f.upstream_dst);
            match self.dns_shares.get(&share).copied() {
                Some(s) => s,
                None => {
                    let Some(s) = self.open_socket(now) else { return };
                    self.dns_shares.insert(share, s);
                    self.sockets.insert(
                        s,
                        SocketUse::Dns {
                            share,
                            members: BTreeSet::new(),
                            pending: BTreeMap::new(),
                        },
                    );
                    s
                }
            }
        } else {
            let Some(s) = self.open_socket(now) else { return };
            self.sockets.insert(s, SocketUse::Flow(key));
            s
        };
        if let Some(SocketUse::Dns { members, .. }) = self.sockets.get_mut(&socket) {
            members.insert(key);
        }
        f.socket = Some(socket);
        self.counters.udp.created += 1;
        self.udp_forward(now, &mut f, p, data);
        self.udp.insert(key, f);
    }

    fn open_socket(&mut self, now: Timestamp) -> Option<DatagramId> {
        if !self.budget_available() {
            self.counters.udp.dropped += 1;
            return None;
        }
        match self.upstream.open_datagram(now) {
            Ok(s) => {
                self.note_handles();
                Some(s)
            }
            Err(e) => {
                log::debug!("datagram socket: {e}");
                self.counters.udp.dropped += 1;
                None
            }
        }
    }

    fn udp_forward(&mut self, now: Timestamp, f: &mut UdpFlow, p: &Packet, mut data: Vec<u8>) {
        let Some(socket) = f.socket else {
            self.counters.udp.dropped += 1;
            return;
        };
        if self.record_egress {
            let egress = Packet::udp(f.key.src, f.key.dst, data.clone());
            let mut egress = egress;
            egress.ip.identification = p.ip.identification;
            self.emit(now, Direction::AppToNet, &f.app_label.clone(), egress.normalized());
        }
        if let Some(SocketUse::Dns { pending, .. }) = self.sockets.get_mut(&socket) {
            if let Some(id) = dns::message_id(&data) {
                let wire = free_id(pending, id, f.key);
                pending.insert(wire, (id, f.key));
                if wire != id {
                    dns::set_message_id(&mut data, wire);
                }
            }
        }
        self.counters.bytes_to_net += data.len() as u64;
        if let Err(e) = self.upstream.send_to(now, socket, f.upstream_dst, &data) {
            log::debug!("send_to {}: {e}", f.upstream_dst);
            self.counters.udp.dropped += 1;
        }
    }

    fn udp_to_app(&mut self, now: Timestamp, f: &UdpFlow, payload: Vec<u8>) {
        self.counters.bytes_to_app += payload.len() as u64;
        let p = Packet::udp(f.key.dst, f.key.src, payload);
        self.emit(now, Direction::NetToApp, &f.app_label.clone(), p);
    }

    pub(super) fn on_datagram(&mut self, now: Timestamp, socket: DatagramId, from: SocketAddrV4, mut payload: Vec<u8>) {
        let key = match self.sockets.get_mut(&socket) {
            Some(SocketUse::Flow(k)) => *k,
            Some(SocketUse::Dns { share, pending, .. }) => {
                let routed = (from == share.1)
                    .then(|| dns::message_id(&payload))
                    .flatten()
                    .and_then(|id| pending.remove(&id));
                let Some((orig, k)) = routed else {
                    self.counters.stray_datagrams += 1;
                    return;
                };
                dns::set_message_id(&mut payload, orig);
                k
            }
            None => {
                if self.probes.contains_key(&socket) {
                    self.on_probe_reply(now, socket, from, payload);
                } else {
                    self.counters.stray_datagrams += 1;
                }
                return;
            }
        };
        let Some(mut f) = self.udp.remove(&key) else {
            self.counters.stray_datagrams += 1;
            return;
        };
        if from != f.upstream_dst {
            self.counters.stray_datagrams += 1;
            self.udp.insert(key, f);
            return;
        }
        f.last_activity = now;
        let view = Packet::udp(f.key.dst, f.key.src, payload);
        let label = f.app_label.clone();
        let data = match self.chain(now, key, &label, Direction::NetToApp, EventKind::PacketIn, Some(&view), &view.payload) {
            EffectiveAction::Modify(m) => Some(m),
            EffectiveAction::Block { .. } => {
                self.counters.udp.blocked += 1;
                None
            }
            _ => Some(view.payload),
        };
        if let Some(d) = data {
            self.udp_to_app(now, &f, d);
        }
        self.udp.insert(key, f);
    }

    fn detach_socket(&mut self, now: Timestamp, f: &mut UdpFlow) {
        let Some(s) = f.socket.take() else { return };
        let release = match self.sockets.get_mut(&s) {
            Some(SocketUse::Flow(_)) => true,
            Some(SocketUse::Dns { share, members, pending }) => {
                members.remove(&f.key);
                pending.retain(|_, (_, k)| *k != f.key);
                if members.is_empty() {
                    self.dns_shares.remove(share);
                    true
                } else {
                    false
                }
            }
            None => false,
        };
        if release {
            self.sockets.remove(&s);
            self.upstream.close_datagram(now, s);
        }
    }

    fn evict_udp(&mut self, now: Timestamp, key: FlowKey, why: Eviction) {
        let Some(mut f) = self.udp.remove(&key) else { return };
        self.detach_socket(now, &mut f);
        match why {
            Eviction::Idle => self.counters.udp.evicted_idle += 1,
            Eviction::Pressure => self.counters.udp.evicted_pressure += 1,
        }
        self.counters.udp.closed += 1;
        let label = f.app_label.clone();
        self.chain(now, key, &label, Direction::AppToNet, EventKind::FlowClose, None, &[]);
    }

    pub(super) fn sweep_udp(&mut self, now: Timestamp) {
        let udp_t = EngineConfig::secs(self.cfg.udp_timeout);
        let dns_t = EngineConfig::secs(self.cfg.dns_timeout);
        let idle: Vec<FlowKey> = self
            .udp
            .values()
            .filter(|f| now.since(f.last_activity) > if f.is_dns { dns_t } else { udp_t })
            .map(|f| f.key)
            .collect();
        for k in idle {
            self.evict_udp(now, k, Eviction::Idle);
        }
        let threshold = self.cfg.pressure_threshold();
        if self.upstream.active_handle_count() <= threshold {
            return;
        }
        let mut lru: Vec<(Timestamp, FlowKey)> = self
            .udp
            .values()
            .filter(|f| f.socket.is_some())
            .map(|f| (f.last_activity, f.key))
            .collect();
        lru.sort();
        for (_, k) in lru {
            if self.upstream.active_handle_count() <= threshold {
                break;
            }
            self.evict_udp(now, k, Eviction::Pressure);
        }
    }
}

/// Picks the on-the-wire id for a query: the app's own id unless another
/// flow already has it outstanding on this socket.
fn free_id(pending: &BTreeMap<u16, (u16, FlowKey)>, id: u16, key: FlowKey) -> u16 {
    let mut wire = id;
    loop {
        match pending.get(&wire) {
            None => return wire,
            Some((orig, k)) if *k == key && *orig == id => return wire,
            _ => wire = wire.wrapping_add(1),
        }
        if wire == id {
            // All 65536 ids outstanding; reuse and let the oldest go unanswered.
            return id;
        }
    }
}
