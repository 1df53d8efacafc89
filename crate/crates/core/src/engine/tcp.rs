//! TCP termination toward the app.
//!
//! The engine answers the app's SYN itself once the upstream stream
//! connects, accepts only in-order bytes, and relays each direction through
//! a bounded buffer. The app side is a local, lossless link, so bytes sent
//! to the app are not kept for retransmission.

use super::{seq_le, seq_lt, Engine, EngineConfig};
use crate::io::trace::Direction;
use crate::io::upstream::{ConnectFailure, StreamId, UpstreamNetwork};
use crate::packet::{flow_key_of, FlowKey, Packet, TcpFlags, TcpHeader};
use crate::plugin::{BlockMode, EffectiveAction, EventKind};
use crate::time::Timestamp;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::net::SocketAddrV4;

/// MSS assumed when the app's SYN carries none.
const DEFAULT_MSS: u16 = 536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcpState {
    SynSeen,
    UpstreamConnecting,
    Established,
    /// The app sent FIN; waiting for the upstream side to finish.
    AppFinWait,
    /// Upstream finished and our FIN went to the app; waiting for the app's FIN.
    UpstreamFinWait,
    Closed,
}

#[derive(Debug)]
pub(crate) struct TcpFlow {
    pub key: FlowKey,
    pub app_label: String,
    pub state: TcpState,
    pub app_isn: u32,
    pub local_isn: u32,
    pub snd_una: u32,
    pub snd_nxt: u32,
    pub rcv_nxt: u32,
    pub app_window: u32,
    pub mss: usize,
    pub stream: Option<StreamId>,
    pub upstream_dst: SocketAddrV4,
    pub to_app: VecDeque<u8>,
    pub to_net: VecDeque<u8>,
    pub last_activity: Timestamp,
    upstream_readable: bool,
    upstream_eof: bool,
    shutdown_sent: bool,
    app_fin: bool,
    fin_sent: bool,
    last_adv_window: u16,
    /// Locally answered flow: the notice goes out after the first app bytes.
    local_reply: Option<Vec<u8>>,
}

impl TcpFlow {
    fn in_flight(&self) -> u32 {
        self.snd_nxt.wrapping_sub(self.snd_una)
    }

    fn is_local(&self) -> bool {
        self.local_reply.is_some() || (self.stream.is_none() && self.state != TcpState::UpstreamConnecting)
    }

    fn connecting(&self) -> bool {
        matches!(self.state, TcpState::SynSeen | TcpState::UpstreamConnecting)
    }
}

impl<U: UpstreamNetwork> Engine<U> {
    fn adv_window(&self, f: &TcpFlow) -> u16 {
        self.cfg
            .buffer_capacity
            .saturating_sub(f.to_net.len())
            .min(u16::MAX as usize) as u16
    }

    fn send_tcp(
        &mut self,
        now: Timestamp,
        f: &mut TcpFlow,
        seq: u32,
        flags: TcpFlags,
        payload: Vec<u8>,
        options: Vec<u8>,
    ) {
        let window = self.adv_window(f);
        f.last_adv_window = window;
        let mut h = TcpHeader::new(f.key.dst.port(), f.key.src.port(), seq, f.rcv_nxt, flags);
        h.window = window;
        h.data_offset = (20 + options.len()) as u8;
        h.options = options;
        self.counters.bytes_to_app += payload.len() as u64;
        let p = Packet::tcp(f.key.dst, f.key.src, h, payload);
        self.emit(now, Direction::NetToApp, &f.app_label.clone(), p);
    }

    fn send_ack(&mut self, now: Timestamp, f: &mut TcpFlow) {
        let seq = f.snd_nxt;
        self.send_tcp(now, f, seq, TcpFlags::ACK, Vec::new(), Vec::new());
    }

    /// Reset toward the app before the handshake completed: acknowledges the SYN.
    fn refuse_syn(&mut self, now: Timestamp, key: FlowKey, app_isn: u32, label: &str) {
        let h = TcpHeader::new(key.dst.port(), key.src.port(), 0, app_isn.wrapping_add(1), TcpFlags::RST | TcpFlags::ACK);
        self.emit(now, Direction::NetToApp, label, Packet::tcp(key.dst, key.src, h, Vec::new()));
    }

    /// Reset for a segment that belongs to no flow.
    fn reset_unknown(&mut self, now: Timestamp, p: &Packet, label: &str) {
        let h = p.tcp_header().expect("tcp");
        let (src, dst) = (p.src().expect("tcp"), p.dst().expect("tcp"));
        let rst = if h.flags.contains(TcpFlags::ACK) {
            TcpHeader::new(dst.port(), src.port(), h.ack, 0, TcpFlags::RST)
        } else {
            let mut len = p.payload.len() as u32;
            if h.flags.contains(TcpFlags::SYN) {
                len += 1;
            }
            if h.flags.contains(TcpFlags::FIN) {
                len += 1;
            }
            TcpHeader::new(dst.port(), src.port(), 0, h.seq.wrapping_add(len), TcpFlags::RST | TcpFlags::ACK)
        };
        self.counters.no_flow_resets += 1;
        self.emit(now, Direction::NetToApp, label, Packet::tcp(dst, src, rst, Vec::new()));
    }

    /// Moves a flow to Closed: releases the stream and tells plugins.
    fn close_tcp(&mut self, now: Timestamp, f: &mut TcpFlow, abort: bool) {
        if f.state == TcpState::Closed {
            return;
        }
        if let Some(s) = f.stream.take() {
            self.streams.remove(&s);
            if abort {
                self.upstream.abort_stream(now, s);
            } else {
                self.upstream.close_stream(now, s);
            }
        }
        f.state = TcpState::Closed;
        f.to_app.clear();
        f.to_net.clear();
        self.counters.tcp.closed += 1;
        let label = f.app_label.clone();
        self.chain(now, f.key, &label, Direction::AppToNet, EventKind::FlowClose, None, &[]);
    }

    /// Resets an established flow in both directions.
    fn reset_flow(&mut self, now: Timestamp, f: &mut TcpFlow, tell_app: bool) {
        if tell_app {
            let seq = f.snd_nxt;
            self.send_tcp(now, f, seq, TcpFlags::RST | TcpFlags::ACK, Vec::new(), Vec::new());
        }
        self.counters.tcp.reset += 1;
        self.close_tcp(now, f, true);
    }

    fn with_tcp(&mut self, key: &FlowKey, op: impl FnOnce(&mut Self, &mut TcpFlow)) {
        if let Some(mut f) = self.tcp.remove(key) {
            op(self, &mut f);
            self.tcp.insert(*key, f);
        }
    }

    fn with_stream(&mut self, stream: StreamId, op: impl FnOnce(&mut Self, &mut TcpFlow)) {
        if let Some(key) = self.streams.get(&stream).copied() {
            self.with_tcp(&key, op);
        }
    }

    pub(super) fn on_tcp(&mut self, now: Timestamp, p: &Packet, label: &str) {
        let h = p.tcp_header().expect("tcp");
        let key = flow_key_of(p).expect("tcp");
        if h.flags.contains(TcpFlags::RST) {
            self.with_tcp(&key, |e, f| {
                if f.state != TcpState::Closed {
                    f.last_activity = now;
                    e.counters.tcp.reset += 1;
                    e.close_tcp(now, f, true);
                }
            });
            return;
        }
        if h.flags.contains(TcpFlags::SYN) && !h.flags.contains(TcpFlags::ACK) {
            self.on_syn(now, p, key, label);
            return;
        }
        let Some(mut f) = self.tcp.remove(&key) else {
            self.reset_unknown(now, p, label);
            return;
        };
        if f.state == TcpState::Closed || f.connecting() || h.flags.contains(TcpFlags::SYN) {
            self.counters.tcp.dropped += 1;
        } else {
            f.last_activity = now;
            self.on_segment(now, &mut f, p);
        }
        self.tcp.insert(key, f);
    }

    fn on_syn(&mut self, now: Timestamp, p: &Packet, key: FlowKey, label: &str) {
        let h = p.tcp_header().expect("tcp");
        if let Some(f) = self.tcp.get(&key) {
            if f.state != TcpState::Closed {
                // Retransmitted or conflicting SYN on a live flow.
                self.counters.tcp.dropped += 1;
                return;
            }
        }
        let app_mss = h.mss().unwrap_or(DEFAULT_MSS) as usize;
        let local_isn = match self.cfg.local_isn {
            super::IsnMode::Fixed(v) => v,
            super::IsnMode::Random => self.rng.gen(),
        };
        let mut f = TcpFlow {
            key,
            app_label: label.to_string(),
            state: TcpState::SynSeen,
            app_isn: h.seq,
            local_isn,
            snd_una: local_isn,
            snd_nxt: local_isn,
            rcv_nxt: h.seq.wrapping_add(1),
            app_window: h.window as u32,
            mss: app_mss.min(self.cfg.mtu - 40).max(1),
            stream: None,
            upstream_dst: key.dst,
            to_app: VecDeque::new(),
            to_net: VecDeque::new(),
            last_activity: now,
            upstream_readable: false,
            upstream_eof: false,
            shutdown_sent: false,
            app_fin: false,
            fin_sent: false,
            last_adv_window: 0,
            local_reply: None,
        };
        self.counters.tcp.created += 1;
        match self.chain(now, key, label, Direction::AppToNet, EventKind::FlowOpen, Some(p), &[]) {
            EffectiveAction::Block { mode, by } => {
                log::debug!("{key} blocked by {by}");
                self.counters.tcp.blocked += 1;
                match mode {
                    BlockMode::DropSilent => {
                        f.state = TcpState::Closed;
                    }
                    BlockMode::ResetApp => {
                        self.refuse_syn(now, key, h.seq, label);
                        self.counters.tcp.reset += 1;
                        f.state = TcpState::Closed;
                    }
                    BlockMode::InjectResponse(notice) => {
                        f.local_reply = Some(notice);
                        self.synack(now, &mut f);
                    }
                }
                self.tcp.insert(key, f);
                return;
            }
            EffectiveAction::Redirect { dst, .. } => f.upstream_dst = dst,
            EffectiveAction::Pass | EffectiveAction::Modify(_) => {}
        }
        if !self.budget_available() {
            self.refuse_syn(now, key, h.seq, label);
            self.counters.tcp.refused += 1;
            f.state = TcpState::Closed;
            self.tcp.insert(key, f);
            return;
        }
        match self.upstream.open_stream(now, f.upstream_dst) {
            Ok(s) => {
                self.note_handles();
                f.stream = Some(s);
                f.state = TcpState::UpstreamConnecting;
                self.streams.insert(s, key);
            }
            Err(e) => {
                log::debug!("connect {} failed: {e}", f.upstream_dst);
                self.refuse_syn(now, key, h.seq, label);
                self.counters.tcp.refused += 1;
                f.state = TcpState::Closed;
            }
        }
        self.tcp.insert(key, f);
    }

    fn synack(&mut self, now: Timestamp, f: &mut TcpFlow) {
        let opts = TcpHeader::mss_option((self.cfg.mtu - 40) as u16);
        let isn = f.local_isn;
        self.send_tcp(now, f, isn, TcpFlags::SYN | TcpFlags::ACK, Vec::new(), opts);
        f.snd_nxt = isn.wrapping_add(1);
        f.snd_una = f.snd_nxt;
        f.state = TcpState::Established;
    }

    pub(super) fn on_connected(&mut self, now: Timestamp, stream: StreamId, result: Result<(), ConnectFailure>) {
        let known = self.streams.contains_key(&stream);
        self.with_stream(stream, |e, f| {
            if f.state != TcpState::UpstreamConnecting {
                return;
            }
            f.last_activity = now;
            if result.is_err() {
                e.refuse_syn(now, f.key, f.app_isn, &f.app_label.clone());
                e.counters.tcp.refused += 1;
                e.close_tcp(now, f, false);
                return;
            }
            if !e.host.is_empty() {
                let mut h = TcpHeader::new(f.key.dst.port(), f.key.src.port(), f.local_isn, f.app_isn.wrapping_add(1), TcpFlags::SYN | TcpFlags::ACK);
                h.options = TcpHeader::mss_option((e.cfg.mtu - 40) as u16);
                h.data_offset = 24;
                let view = Packet::tcp(f.key.dst, f.key.src, h, Vec::new());
                let label = f.app_label.clone();
                if let EffectiveAction::Block { mode, .. } =
                    e.chain(now, f.key, &label, Direction::NetToApp, EventKind::PacketIn, Some(&view), &[])
                {
                    e.counters.tcp.blocked += 1;
                    if mode == BlockMode::ResetApp {
                        e.refuse_syn(now, f.key, f.app_isn, &label);
                        e.counters.tcp.reset += 1;
                    }
                    e.close_tcp(now, f, true);
                    return;
                }
            }
            e.synack(now, f);
        });
        if !known {
            // Stream outlived its flow; release it.
            self.upstream.close_stream(now, stream);
        }
    }

    pub(super) fn on_stream_readable(&mut self, now: Timestamp, stream: StreamId) {
        self.with_stream(stream, |e, f| {
            f.upstream_readable = true;
            e.pump_to_app(now, f);
        });
    }

    pub(super) fn on_stream_writable(&mut self, now: Timestamp, stream: StreamId) {
        self.with_stream(stream, |e, f| e.flush_to_net(now, f));
    }

    pub(super) fn on_stream_closed(&mut self, now: Timestamp, stream: StreamId) {
        self.with_stream(stream, |e, f| {
            f.upstream_eof = true;
            f.upstream_readable = true;
            e.pump_to_app(now, f);
        });
    }

    pub(super) fn on_stream_reset(&mut self, now: Timestamp, stream: StreamId) {
        self.with_stream(stream, |e, f| {
            if f.state != TcpState::Closed {
                e.reset_flow(now, f, true);
            }
        });
    }

    fn on_segment(&mut self, now: Timestamp, f: &mut TcpFlow, p: &Packet) {
        let h = p.tcp_header().expect("tcp");
        if h.flags.contains(TcpFlags::ACK) {
            let limit = f.snd_nxt;
            if seq_lt(f.snd_una, h.ack) && seq_le(h.ack, limit) {
                f.snd_una = h.ack;
            }
            f.app_window = h.window as u32;
        }
        let fin = h.flags.contains(TcpFlags::FIN);
        let mut data = std::borrow::Cow::Borrowed(p.payload.as_slice());
        if !data.is_empty() {
            let label = f.app_label.clone();
            match self.chain(now, f.key, &label, Direction::AppToNet, EventKind::PacketOut, Some(p), &data) {
                EffectiveAction::Pass => {}
                EffectiveAction::Modify(m) => data = m.into(),
                EffectiveAction::Block { mode, .. } => {
                    self.counters.tcp.blocked += 1;
                    match mode {
                        BlockMode::DropSilent => self.close_tcp(now, f, true),
                        BlockMode::ResetApp => self.reset_flow(now, f, true),
                        BlockMode::InjectResponse(notice) => {
                            if let Some(s) = f.stream.take() {
                                self.streams.remove(&s);
                                self.upstream.abort_stream(now, s);
                            }
                            f.to_net.clear();
                            f.local_reply = Some(notice);
                            self.accept_segment(now, f, h.seq, &data, fin, p);
                        }
                    }
                    return;
                }
                EffectiveAction::Redirect { .. } => {}
            }
        }
        self.accept_segment(now, f, h.seq, &data, fin, p);
    }

    fn accept_segment(&mut self, now: Timestamp, f: &mut TcpFlow, seq: u32, data: &[u8], fin: bool, p: &Packet) {
        let end = seq.wrapping_add(data.len() as u32);
        let needs_ack = !data.is_empty() || fin;
        if !data.is_empty() && !f.app_fin && seq_le(seq, f.rcv_nxt) && seq_lt(f.rcv_nxt, end) {
            let fresh = &data[f.rcv_nxt.wrapping_sub(seq) as usize..];
            if f.to_net.len() + fresh.len() <= self.cfg.buffer_capacity {
                if self.record_egress {
                    let mut h = p.tcp_header().expect("tcp").clone();
                    h.seq = f.rcv_nxt;
                    let egress = Packet::tcp(f.key.src, f.key.dst, h, fresh.to_vec());
                    self.emit(now, Direction::AppToNet, &f.app_label.clone(), egress);
                }
                if f.is_local() {
                    if let Some(notice) = f.local_reply.take() {
                        f.to_app.extend(notice);
                        f.upstream_eof = true;
                    }
                } else {
                    f.to_net.extend(fresh);
                    self.counters.bytes_to_net += fresh.len() as u64;
                }
                f.rcv_nxt = end;
            }
        }
        if fin && !f.app_fin && end == f.rcv_nxt {
            f.rcv_nxt = f.rcv_nxt.wrapping_add(1);
            f.app_fin = true;
            if f.local_reply.take().is_some() {
                f.upstream_eof = true;
            }
        }
        if needs_ack {
            self.send_ack(now, f);
        }
        self.flush_to_net(now, f);
        self.pump_to_app(now, f);
    }

    fn flush_to_net(&mut self, now: Timestamp, f: &mut TcpFlow) {
        let Some(stream) = f.stream else {
            f.to_net.clear();
            return;
        };
        if f.state == TcpState::Closed || f.connecting() {
            return;
        }
        let before = self.adv_window(f);
        while !f.to_net.is_empty() {
            let (a, _) = f.to_net.as_slices();
            match self.upstream.send(now, stream, a) {
                Ok(0) => break,
                Ok(n) => {
                    f.to_net.drain(..n);
                }
                Err(e) => {
                    log::debug!("upstream write on {}: {e}", f.key);
                    self.reset_flow(now, f, true);
                    return;
                }
            }
        }
        if f.app_fin && f.to_net.is_empty() && !f.shutdown_sent {
            f.shutdown_sent = true;
            let _ = self.upstream.shutdown_write(now, stream);
        }
        // The app may be stalled on a small window; tell it space opened.
        if (f.last_adv_window as usize) < f.mss && self.adv_window(f) > before && !f.app_fin {
            self.send_ack(now, f);
        }
        self.update_state(now, f);
    }

    /// Pulls upstream bytes into the to-app buffer and segments them out.
    fn pump_to_app(&mut self, now: Timestamp, f: &mut TcpFlow) {
        if f.state == TcpState::Closed || f.connecting() {
            return;
        }
        let cap = self.cfg.buffer_capacity;
        while f.upstream_readable {
            let Some(stream) = f.stream else {
                f.upstream_readable = false;
                break;
            };
            let room = cap.saturating_sub(f.to_app.len() + f.in_flight() as usize);
            if room == 0 {
                break;
            }
            let chunk = match self.upstream.recv(now, stream, room) {
                Ok(c) => c,
                Err(_) => Vec::new(),
            };
            if chunk.is_empty() {
                f.upstream_readable = false;
                break;
            }
            f.last_activity = now;
            let label = f.app_label.clone();
            let chunk = if self.host.is_empty() {
                chunk
            } else {
                let h = TcpHeader::new(f.key.dst.port(), f.key.src.port(), f.snd_nxt, f.rcv_nxt, TcpFlags::ACK | TcpFlags::PSH);
                let view = Packet::tcp(f.key.dst, f.key.src, h, chunk);
                match self.chain(now, f.key, &label, Direction::NetToApp, EventKind::PacketIn, Some(&view), &view.payload) {
                    EffectiveAction::Modify(m) => m,
                    EffectiveAction::Block { mode, .. } => {
                        self.counters.tcp.blocked += 1;
                        let tell = mode != BlockMode::DropSilent;
                        self.reset_flow(now, f, tell);
                        return;
                    }
                    _ => view.payload,
                }
            };
            f.to_app.extend(chunk);
        }
        while !f.to_app.is_empty() {
            let space = f.app_window.saturating_sub(f.in_flight()) as usize;
            let n = f.mss.min(f.to_app.len()).min(space);
            if n == 0 {
                break;
            }
            let seg: Vec<u8> = f.to_app.drain(..n).collect();
            let seq = f.snd_nxt;
            self.send_tcp(now, f, seq, TcpFlags::PSH | TcpFlags::ACK, seg, Vec::new());
            f.snd_nxt = f.snd_nxt.wrapping_add(n as u32);
        }
        if f.upstream_eof && !f.upstream_readable && f.to_app.is_empty() && !f.fin_sent {
            let seq = f.snd_nxt;
            self.send_tcp(now, f, seq, TcpFlags::FIN | TcpFlags::ACK, Vec::new(), Vec::new());
            f.snd_nxt = f.snd_nxt.wrapping_add(1);
            f.fin_sent = true;
        }
        self.update_state(now, f);
    }

    fn update_state(&mut self, now: Timestamp, f: &mut TcpFlow) {
        if f.state == TcpState::Closed || f.connecting() {
            return;
        }
        let fin_acked = f.fin_sent && f.snd_una == f.snd_nxt;
        f.state = match (f.app_fin, f.fin_sent) {
            (false, false) => TcpState::Established,
            (true, false) => TcpState::AppFinWait,
            (false, true) => TcpState::UpstreamFinWait,
            (true, true) if fin_acked => {
                self.close_tcp(now, f, false);
                return;
            }
            (true, true) => f.state,
        };
    }

    pub(super) fn sweep_tcp(&mut self, now: Timestamp) {
        let linger = EngineConfig::secs(self.cfg.tcp_linger);
        let keys: Vec<FlowKey> = self.tcp.keys().copied().collect();
        for key in keys {
            let mut f = self.tcp.remove(&key).expect("present");
            if f.state == TcpState::Closed {
                continue;
            }
            let stale = now.since(f.last_activity) > linger;
            let lingering = !matches!(f.state, TcpState::Established) || f.is_local();
            if stale && lingering {
                log::debug!("{key} timed out in {:?}", f.state);
                self.counters.tcp.evicted_idle += 1;
                if f.connecting() {
                    self.refuse_syn(now, key, f.app_isn, &f.app_label.clone());
                    self.counters.tcp.reset += 1;
                    self.close_tcp(now, &mut f, true);
                } else {
                    self.reset_flow(now, &mut f, true);
                }
                continue;
            }
            self.tcp.insert(key, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use crate::io::sim::{Behavior, SimEndpointScript, SimUpstream};
    use crate::packet::{Protocol, TcpFlags, TcpHeader};
    use crate::plugin::PluginHost;

    const APP: &str = "10.0.0.2:40000";
    const ECHO: &str = "93.184.216.34:80";
    const REFUSE: &str = "93.184.216.35:80";
    const HOLE: &str = "93.184.216.36:80";
    const STATIC: &str = "93.184.216.37:80";

    fn engine() -> Engine<SimUpstream> {
        let sim = SimUpstream::new(
            vec![
                SimEndpointScript::host(ECHO.parse().unwrap(), Behavior::Echo),
                SimEndpointScript::host(REFUSE.parse().unwrap(), Behavior::ResetOnConnect),
                SimEndpointScript::host(HOLE.parse().unwrap(), Behavior::Blackhole),
                SimEndpointScript::host(
                    STATIC.parse().unwrap(),
                    Behavior::StaticResponse { data: "x".repeat(3000), delay_us: 0 },
                ),
            ],
            1,
        )
        .unwrap();
        let cfg = EngineConfig { local_isn: IsnMode::Fixed(5000), ..Default::default() };
        Engine::new(cfg, sim, PluginHost::default(), 7).unwrap()
    }

    fn seg(dst: &str, seq: u32, ack: u32, flags: TcpFlags, payload: &[u8]) -> Packet {
        let mut h = TcpHeader::new(0, 0, seq, ack, flags);
        h.window = 65535;
        if flags.contains(TcpFlags::SYN) {
            h.options = TcpHeader::mss_option(1460);
            h.data_offset = 24;
        }
        Packet::tcp(APP.parse().unwrap(), dst.parse().unwrap(), h, payload.to_vec())
    }

    fn send(e: &mut Engine<SimUpstream>, t: u64, p: Packet) -> Vec<Packet> {
        e.on_app_packet(Timestamp(t), &p, "app");
        e.run_until(Timestamp(t));
        e.drain_to_app()
    }

    fn hdr(p: &Packet) -> &TcpHeader {
        p.tcp_header().unwrap()
    }

    fn key(dst: &str) -> FlowKey {
        FlowKey::new(Protocol::Tcp, APP.parse().unwrap(), dst.parse().unwrap())
    }

    fn open(e: &mut Engine<SimUpstream>, dst: &str) {
        let out = send(e, 0, seg(dst, 1000, 0, TcpFlags::SYN, b""));
        assert_eq!(hdr(&out[0]).flags, TcpFlags::SYN | TcpFlags::ACK);
        assert!(send(e, 1, seg(dst, 1001, 5001, TcpFlags::ACK, b"")).is_empty());
    }

    #[test]
    fn synack_arithmetic() {
        let mut e = engine();
        let out = send(&mut e, 0, seg(ECHO, 1000, 0, TcpFlags::SYN, b""));
        assert_eq!(out.len(), 1);
        let h = hdr(&out[0]);
        assert_eq!((h.seq, h.ack, h.flags), (5000, 1001, TcpFlags::SYN | TcpFlags::ACK));
        assert_eq!(h.mss(), Some(1460));
        assert_eq!(out[0].src(), Some(ECHO.parse().unwrap()));
        assert_eq!(e.tcp_state(&key(ECHO)), Some(TcpState::Established));
    }

    #[test]
    fn refused_connect_resets() {
        let mut e = engine();
        let out = send(&mut e, 0, seg(REFUSE, 1000, 0, TcpFlags::SYN, b""));
        let h = hdr(&out[0]);
        assert!(h.flags.contains(TcpFlags::RST));
        assert_eq!(h.ack, 1001);
        assert_eq!(e.tcp_state(&key(REFUSE)), Some(TcpState::Closed));
        assert_eq!(e.upstream().active_handle_count(), 0);
    }

    #[test]
    fn duplicate_syn_absorbed() {
        let mut e = engine();
        e.on_app_packet(Timestamp(0), &seg(HOLE, 1000, 0, TcpFlags::SYN, b""), "app");
        e.on_app_packet(Timestamp(1), &seg(HOLE, 1000, 0, TcpFlags::SYN, b""), "app");
        assert_eq!(e.upstream().handles_opened(), 1);
        assert_eq!(e.tcp_state(&key(HOLE)), Some(TcpState::UpstreamConnecting));
        assert!(e.drain_to_app().is_empty());
    }

    #[test]
    fn stray_segment_gets_reset() {
        let mut e = engine();
        let out = send(&mut e, 0, seg(ECHO, 77, 999, TcpFlags::ACK, b"hi"));
        let h = hdr(&out[0]);
        assert_eq!((h.flags, h.seq), (TcpFlags::RST, 999));
        let out = send(&mut e, 0, seg(ECHO, 77, 0, TcpFlags::empty(), b"hi"));
        let h = hdr(&out[0]);
        assert_eq!((h.flags, h.ack), (TcpFlags::RST | TcpFlags::ACK, 79));
        assert!(send(&mut e, 0, seg(ECHO, 77, 0, TcpFlags::RST, b"")).is_empty());
    }

    #[test]
    fn in_order_data_acked_and_forwarded() {
        let mut e = engine();
        open(&mut e, ECHO);
        let out = send(&mut e, 2, seg(ECHO, 1001, 5001, TcpFlags::ACK | TcpFlags::PSH, b"0123456789"));
        assert_eq!(hdr(&out[0]).ack, 1011);
        assert!(hdr(&out[0]).flags == TcpFlags::ACK && out[0].payload.is_empty());
        // echo comes straight back
        assert_eq!(out[1].payload, b"0123456789");
        assert_eq!(hdr(&out[1]).seq, 5001);
        let log = e.upstream().stream_logs().next().unwrap().1;
        assert_eq!(log.received, b"0123456789");
    }

    #[test]
    fn out_of_order_gets_dup_ack() {
        let mut e = engine();
        open(&mut e, ECHO);
        send(&mut e, 2, seg(ECHO, 1001, 5001, TcpFlags::ACK, b"0123456789"));
        let out = send(&mut e, 3, seg(ECHO, 1050, 5011, TcpFlags::ACK, b"late"));
        assert_eq!(out.len(), 1);
        assert_eq!(hdr(&out[0]).ack, 1011);
        let log = e.upstream().stream_logs().next().unwrap().1;
        assert_eq!(log.received.len(), 10);
    }

    #[test]
    fn upstream_bytes_segmented_by_mss() {
        let mut e = engine();
        open(&mut e, STATIC);
        let out = send(&mut e, 2, seg(STATIC, 1001, 5001, TcpFlags::ACK, b"GET"));
        let data: Vec<_> = out.iter().filter(|p| !p.payload.is_empty()).collect();
        let sizes: Vec<_> = data.iter().map(|p| p.payload.len()).collect();
        assert_eq!(sizes, [1460, 1460, 80]);
        let seqs: Vec<_> = data.iter().map(|p| hdr(p).seq).collect();
        assert_eq!(seqs, [5001, 6461, 7921]);
        assert!(data.iter().all(|p| hdr(p).flags == TcpFlags::PSH | TcpFlags::ACK));
        // upstream closed after replying: FIN follows the data
        let fin = out.last().unwrap();
        assert!(hdr(fin).flags.contains(TcpFlags::FIN));
        assert_eq!(hdr(fin).seq, 5001 + 3000);
        assert_eq!(e.tcp_state(&key(STATIC)), Some(TcpState::UpstreamFinWait));
    }

    #[test]
    fn app_fin_half_closes_upstream() {
        let mut e = engine();
        open(&mut e, ECHO);
        let mut got = send(&mut e, 2, seg(ECHO, 1001, 5001, TcpFlags::ACK | TcpFlags::PSH, &[7; 999]));
        got.retain(|p| !p.payload.is_empty());
        let out = send(&mut e, 3, seg(ECHO, 2000, 5001 + 999, TcpFlags::FIN | TcpFlags::ACK, b""));
        assert_eq!(hdr(&out[0]).ack, 2001);
        let log = e.upstream().stream_logs().next().unwrap().1.clone();
        assert!(log.engine_shutdown);
        // echo endpoint closes after our half-close -> FIN toward the app
        let fin = out.iter().find(|p| hdr(p).flags.contains(TcpFlags::FIN)).unwrap();
        assert_eq!(hdr(fin).seq, 5001 + 999);
        assert_eq!(e.tcp_state(&key(ECHO)), Some(TcpState::AppFinWait));
        assert!(send(&mut e, 4, seg(ECHO, 2001, 6001, TcpFlags::ACK, b"")).is_empty());
        assert_eq!(e.tcp_state(&key(ECHO)), Some(TcpState::Closed));
        assert_eq!(e.upstream().active_handle_count(), 0);
        e.run_until(Timestamp::from_secs(2));
        assert_eq!(e.tcp_state(&key(ECHO)), None);
        assert!(send(&mut e, 3_000_000, seg(ECHO, 2001, 6001, TcpFlags::ACK, b""))[0]
            .tcp_header()
            .unwrap()
            .flags
            .contains(TcpFlags::RST));
    }

    #[test]
    fn app_reset_releases_stream() {
        let mut e = engine();
        open(&mut e, ECHO);
        send(&mut e, 2, seg(ECHO, 1001, 5001, TcpFlags::ACK, b"abc"));
        assert_eq!(e.upstream().active_handle_count(), 1);
        assert!(send(&mut e, 3, seg(ECHO, 1004, 0, TcpFlags::RST, b"")).is_empty());
        assert_eq!(e.upstream().active_handle_count(), 0);
        assert!(send(&mut e, 4, seg(ECHO, 1004, 5004, TcpFlags::ACK, b"zz")).is_empty());
        e.run_until(Timestamp::from_secs(1));
        assert_eq!(e.flow_count(), 0);
    }

    #[test]
    fn blackhole_connect_times_out() {
        let mut e = engine();
        send(&mut e, 0, seg(HOLE, 1000, 0, TcpFlags::SYN, b""));
        e.run_until(Timestamp::from_secs(32));
        let out = e.drain_to_app();
        assert_eq!(hdr(&out[0]).ack, 1001);
        assert!(hdr(&out[0]).flags.contains(TcpFlags::RST));
        assert_eq!(e.upstream().active_handle_count(), 0);
    }

    #[test]
    fn budget_exhaustion_refuses() {
        let sim = SimUpstream::new(vec![], 1).unwrap();
        let cfg = EngineConfig { socket_budget: 1, ..Default::default() };
        let mut e = Engine::new(cfg, sim, PluginHost::default(), 1).unwrap();
        send(&mut e, 0, seg(HOLE, 1, 0, TcpFlags::SYN, b""));
        let mut p = seg(HOLE, 1, 0, TcpFlags::SYN, b"");
        if let crate::packet::Transport::Tcp(h) = &mut p.transport {
            h.src_port = 40001;
        }
        let p = p.normalized();
        let out = send(&mut e, 0, p);
        assert!(hdr(&out[0]).flags.contains(TcpFlags::RST));
        assert_eq!(hdr(&out[0]).ack, 2);
        assert_eq!(e.counters().budget_exhausted, 1);
    }

    #[test]
    fn windowed_sending_waits_for_ack() {
        let mut e = engine();
        let mut syn = seg(STATIC, 1000, 0, TcpFlags::SYN, b"");
        if let crate::packet::Transport::Tcp(h) = &mut syn.transport {
            h.window = 1000;
        }
        let syn = syn.normalized();
        send(&mut e, 0, syn);
        let mut ack = seg(STATIC, 1001, 5001, TcpFlags::ACK, b"GET");
        if let crate::packet::Transport::Tcp(h) = &mut ack.transport {
            h.window = 1000;
        }
        let out = send(&mut e, 1, ack.normalized());
        let bytes: usize = out.iter().map(|p| p.payload.len()).sum();
        assert_eq!(bytes, 1000);
        let mut ack = seg(STATIC, 1004, 6001, TcpFlags::ACK, b"");
        if let crate::packet::Transport::Tcp(h) = &mut ack.transport {
            h.window = 4000;
        }
        let out = send(&mut e, 2, ack.normalized());
        let bytes: usize = out.iter().map(|p| p.payload.len()).sum();
        assert_eq!(bytes, 2000);
    }
}
