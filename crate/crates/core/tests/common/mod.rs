//! Shared drivers for the integration tests and the acceptance target.
#![allow(dead_code)]

use mbz::config::{load_config, RunConfig};
use mbz::engine::{Engine, EngineConfig, IsnMode};
use mbz::io::sim::{Behavior, SimEndpointScript, SimUpstream};
use mbz::io::UpstreamNetwork;
use mbz::packet::{FlowKey, Packet, Protocol, TcpFlags, TcpHeader};
use mbz::plugin::PluginHost;
use mbz::replay::{replay_config, ReplayOutcome};
use mbz::time::Timestamp;
use std::net::SocketAddrV4;
use std::path::PathBuf;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}
#[allow(unused_imports)]
pub(crate) use ensure;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/snitch")
}

pub fn fixture_config(name: &str) -> RunConfig {
    load_config(&fixture_dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn replay_fixture(name: &str) -> ReplayOutcome {
    replay_config(&fixture_config(name), None).unwrap_or_else(|e| panic!("{name}: {e}"))
}

// ---- TCP proxy property ----

pub const APP: &str = "10.0.0.2:40000";
pub const ECHO: &str = "198.51.100.1:7";
pub const STATIC: &str = "198.51.100.2:80";
pub const REFUSE: &str = "198.51.100.3:80";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ending {
    Fin,
    /// Reset after this many segments have gone out.
    Rst(usize),
}

#[derive(Debug, Clone)]
pub enum Endpoint {
    Echo,
    /// Replies once with this body, then closes.
    Static(String),
}

#[derive(Debug, Clone)]
pub struct ProxyCase {
    pub data: Vec<u8>,
    /// Segment sizes; they sum to `data.len()`.
    pub segments: Vec<usize>,
    /// Indices of segments sent twice.
    pub duplicates: Vec<usize>,
    pub ending: Ending,
    pub endpoint: Endpoint,
    pub app_isn: u32,
    pub app_mss: u16,
    pub jitter_us: u64,
}

pub fn proxy_engine(jitter_us: u64, static_body: &str, isn: IsnMode) -> Engine<SimUpstream> {
    let mut echo = SimEndpointScript::host(ECHO.parse().unwrap(), Behavior::Echo);
    echo.connect_delay_us = 2_000;
    echo.jitter_us = jitter_us;
    let mut stat = SimEndpointScript::host(
        STATIC.parse().unwrap(),
        Behavior::StaticResponse { data: static_body.to_string(), delay_us: 500 },
    );
    stat.connect_delay_us = 2_000;
    stat.jitter_us = jitter_us;
    let refuse = SimEndpointScript::host(REFUSE.parse().unwrap(), Behavior::ResetOnConnect);
    let sim = SimUpstream::new(vec![echo, stat, refuse], 11).unwrap();
    let cfg = EngineConfig { local_isn: isn, ..Default::default() };
    Engine::new(cfg, sim, PluginHost::default(), 3).unwrap()
}

/// A TCP client that acknowledges what it receives and respects the
/// engine's advertised window.
struct App {
    src: SocketAddrV4,
    dst: SocketAddrV4,
    snd_nxt: u32,
    peer_acked: u32,
    peer_window: u32,
    rcv_nxt: u32,
    received: Vec<u8>,
    fin_seen: bool,
    rst_seen: bool,
}

impl App {
    fn segment(&self, seq: u32, flags: TcpFlags, payload: &[u8]) -> Packet {
        let mut h = TcpHeader::new(0, 0, seq, self.rcv_nxt, flags);
        h.window = 65535;
        Packet::tcp(self.src, self.dst, h, payload.to_vec())
    }

    /// Consumes engine output; answers with an ACK when anything arrived.
    fn absorb(&mut self, out: Vec<Packet>) -> Result<Option<Packet>, String> {
        let mut ack = false;
        for p in out {
            let h = p.tcp_header().ok_or("non-tcp packet to app")?;
            ensure!(p.dst() == Some(self.src), "packet to wrong address {:?}", p.dst());
            if h.flags.contains(TcpFlags::RST) {
                self.rst_seen = true;
                continue;
            }
            ensure!(!self.fin_seen || p.payload.is_empty(), "data after FIN");
            if h.flags.contains(TcpFlags::ACK) {
                self.peer_acked = h.ack;
                self.peer_window = h.window as u32;
            }
            if !p.payload.is_empty() {
                ensure!(h.seq == self.rcv_nxt, "out-of-order delivery: seq {} want {}", h.seq, self.rcv_nxt);
                self.received.extend_from_slice(&p.payload);
                self.rcv_nxt = self.rcv_nxt.wrapping_add(p.payload.len() as u32);
                ack = true;
            }
            if h.flags.contains(TcpFlags::FIN) {
                ensure!(h.seq == self.rcv_nxt, "FIN at {} want {}", h.seq, self.rcv_nxt);
                self.rcv_nxt = self.rcv_nxt.wrapping_add(1);
                self.fin_seen = true;
                ack = true;
            }
        }
        Ok(ack.then(|| self.segment(self.snd_nxt, TcpFlags::ACK, b"")))
    }
}

fn step(e: &mut Engine<SimUpstream>, app: &mut App, t: &mut u64, dt: u64, send: Option<Packet>) -> Check {
    if let Some(p) = send {
        e.on_app_packet(Timestamp(*t), &p, "app");
    }
    *t += dt;
    e.run_until(Timestamp(*t));
    let mut out = e.drain_to_app();
    while !out.is_empty() {
        match app.absorb(out)? {
            Some(ack) => e.on_app_packet(Timestamp(*t), &ack, "app"),
            None => break,
        }
        out = e.drain_to_app();
    }
    Ok(())
}

/// Runs one randomized exchange and compares both transcripts.
pub fn run_proxy_case(c: &ProxyCase) -> Check {
    let (dst, body) = match &c.endpoint {
        Endpoint::Echo => (ECHO, String::new()),
        Endpoint::Static(b) => (STATIC, b.clone()),
    };
    let mut e = proxy_engine(c.jitter_us, &body, IsnMode::Random);
    let mut app = App {
        src: APP.parse().unwrap(),
        dst: dst.parse().unwrap(),
        snd_nxt: c.app_isn,
        peer_acked: c.app_isn,
        peer_window: 0,
        rcv_nxt: 0,
        received: Vec::new(),
        fin_seen: false,
        rst_seen: false,
    };
    let key = FlowKey::new(Protocol::Tcp, app.src, app.dst);
    let mut t = 0u64;

    let mut syn = app.segment(c.app_isn, TcpFlags::SYN, b"");
    if let mbz::packet::Transport::Tcp(h) = &mut syn.transport {
        h.options = TcpHeader::mss_option(c.app_mss);
        h.data_offset = 24;
    }
    e.on_app_packet(Timestamp(t), &syn.normalized(), "app");
    t += 20_000;
    e.run_until(Timestamp(t));
    let out = e.drain_to_app();
    ensure!(out.len() == 1, "expected one SYN/ACK, got {}", out.len());
    let h = out[0].tcp_header().unwrap();
    ensure!(h.flags == TcpFlags::SYN | TcpFlags::ACK, "handshake flags {}", h.flags);
    ensure!(h.ack == c.app_isn.wrapping_add(1), "SYN/ACK ack {}", h.ack);
    app.snd_nxt = c.app_isn.wrapping_add(1);
    app.peer_acked = app.snd_nxt;
    app.peer_window = h.window as u32;
    app.rcv_nxt = h.seq.wrapping_add(1);
    let ack = app.segment(app.snd_nxt, TcpFlags::ACK, b"");
    step(&mut e, &mut app, &mut t, 0, Some(ack))?;

    let mut offset = 0usize;
    let mut sent_segments = 0usize;
    for (i, &len) in c.segments.iter().enumerate() {
        if c.ending == Ending::Rst(sent_segments) {
            break;
        }
        let chunk = &c.data[offset..offset + len];
        let mut waited = 0;
        while app.snd_nxt.wrapping_sub(app.peer_acked) as usize + len > app.peer_window as usize {
            ensure!(waited < 1000, "window never opened");
            step(&mut e, &mut app, &mut t, 1_000, None)?;
            waited += 1;
        }
        let seq = app.snd_nxt;
        let p = app.segment(seq, TcpFlags::ACK | TcpFlags::PSH, chunk);
        app.snd_nxt = app.snd_nxt.wrapping_add(len as u32);
        offset += len;
        sent_segments += 1;
        step(&mut e, &mut app, &mut t, 300, Some(p))?;
        if c.duplicates.contains(&i) {
            let p = app.segment(seq, TcpFlags::ACK | TcpFlags::PSH, chunk);
            step(&mut e, &mut app, &mut t, 300, Some(p))?;
        }
        ensure!(!app.rst_seen, "engine reset the flow mid-transfer");
    }
    let sent = &c.data[..offset];

    match c.ending {
        Ending::Fin => {
            let fin = app.segment(app.snd_nxt, TcpFlags::FIN | TcpFlags::ACK, b"");
            app.snd_nxt = app.snd_nxt.wrapping_add(1);
            step(&mut e, &mut app, &mut t, 1_000, Some(fin))?;
            let mut rounds = 0;
            while !app.fin_seen {
                ensure!(rounds < 2000, "no FIN from engine after {} bytes back", app.received.len());
                step(&mut e, &mut app, &mut t, 1_000, None)?;
                rounds += 1;
            }
            step(&mut e, &mut app, &mut t, 1_000, None)?;
            ensure!(!app.rst_seen, "unexpected reset");
            ensure!(e.tcp_state(&key).is_none_or(|s| s == mbz::engine::TcpState::Closed), "flow still open: {:?}", e.tcp_state(&key));
        }
        Ending::Rst(_) => {
            let rst = app.segment(app.snd_nxt, TcpFlags::RST, b"");
            step(&mut e, &mut app, &mut t, 5_000, Some(rst))?;
        }
    }

    let logs: Vec<_> = e.upstream().stream_logs().map(|(_, l)| l.clone()).collect();
    ensure!(logs.len() == 1, "{} upstream streams", logs.len());
    let log = &logs[0];
    ensure!(log.received == sent, "upstream transcript differs: {} of {} bytes", log.received.len(), sent.len());
    match c.ending {
        Ending::Fin => {
            ensure!(app.received == log.sent, "downstream transcript differs: {} vs {} bytes", app.received.len(), log.sent.len());
            let expect: &[u8] = match &c.endpoint {
                Endpoint::Echo => sent,
                Endpoint::Static(b) => b.as_bytes(),
            };
            ensure!(app.received == expect, "endpoint produced unexpected bytes");
            ensure!(log.engine_shutdown && !log.engine_aborted, "upstream not closed gracefully");
        }
        Ending::Rst(_) => {
            ensure!(log.sent.starts_with(&app.received), "downstream bytes are not a prefix of what the endpoint sent");
            ensure!(log.engine_aborted || log.peer_closed, "upstream survived the reset");
            ensure!(e.tcp_state(&key).is_none_or(|s| s == mbz::engine::TcpState::Closed), "flow still open after reset");
        }
    }
    ensure!(e.upstream().active_handle_count() == 0, "upstream handle leaked");
    Ok(())
}

pub mod strategy {
    use super::*;
    use proptest::prelude::*;

    fn segmentation(len: usize) -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..=2000, 1..64).prop_map(move |raw| {
            let mut out = Vec::new();
            let mut left = len;
            for s in raw.into_iter().cycle() {
                if left == 0 {
                    break;
                }
                let n = s.min(left);
                out.push(n);
                left -= n;
            }
            out
        })
    }

    pub fn proxy_case() -> impl Strategy<Value = ProxyCase> {
        (10usize..=10_000)
            .prop_flat_map(|len| {
                (
                    prop::collection::vec(any::<u8>(), len),
                    segmentation(len),
                    any::<u32>(),
                    prop_oneof![Just(536u16), Just(1460u16), 64u16..1460],
                    0u64..3_000,
                    prop_oneof![3 => Just(None), 1 => (10usize..=10_000).prop_map(Some)],
                    any::<bool>(),
                    any::<prop::sample::Index>(),
                    prop::collection::vec(any::<prop::sample::Index>(), 0..4),
                )
            })
            .prop_map(|(data, segments, app_isn, app_mss, jitter_us, body, rst, cut, dups)| {
                let ending = if rst { Ending::Rst(cut.index(segments.len() + 1)) } else { Ending::Fin };
                let endpoint = match body {
                    None => Endpoint::Echo,
                    Some(n) => Endpoint::Static("r".repeat(n)),
                };
                let duplicates = dups.iter().map(|d| d.index(segments.len())).collect();
                ProxyCase { data, segments, duplicates, ending, endpoint, app_isn, app_mss, jitter_us }
            })
    }
}

pub mod criteria;
