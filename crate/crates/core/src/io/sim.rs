//! Scripted remote endpoints on a virtual clock.
//!
//! Each [`SimEndpointScript`] claims an address block (and optionally a
//! port) and decides how connections and datagrams to it behave. Anything
//! unclaimed is a blackhole: connects never complete and datagrams vanish.
//! Every byte exchanged is logged so tests can compare transcripts.

use super::dns::{self, DnsQuery};
use super::upstream::{
    ConnectFailure, DatagramId, StreamId, UpstreamError, UpstreamEvent, UpstreamNetwork,
};
use crate::time::Timestamp;
use ipnet::Ipv4Net;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::Path;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DnsTamper {
    /// Names missing from the table resolve to this address instead of NXDOMAIN.
    RewriteNxdomain(Ipv4Addr),
    /// Every answer is replaced by this address.
    Spoof(Ipv4Addr),
    /// Queries are silently dropped.
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Behavior {
    /// Streams echo every byte and close after the engine half-closes;
    /// datagrams are reflected.
    Echo,
    /// Replies once to the first request bytes (or datagram), then closes.
    StaticResponse {
        data: String,
        #[serde(default)]
        delay_us: u64,
    },
    /// Answers A queries over UDP from `answers`; unknown names get NXDOMAIN.
    DnsResponder {
        answers: BTreeMap<String, Vec<Ipv4Addr>>,
        #[serde(default)]
        delay_us: u64,
        #[serde(default)]
        tamper: Option<DnsTamper>,
    },
    Blackhole,
    ResetOnConnect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimEndpointScript {
    #[serde(rename = "match")]
    pub net: Ipv4Net,
    /// `None` matches every port.
    #[serde(default)]
    pub port: Option<u16>,
    pub behavior: Behavior,
    #[serde(default)]
    pub connect_delay_us: u64,
    /// Extra uniform delay in `[0, jitter_us]` drawn per action from the seeded RNG.
    #[serde(default)]
    pub jitter_us: u64,
}

impl SimEndpointScript {
    pub fn new(net: Ipv4Net, port: Option<u16>, behavior: Behavior) -> Self {
        SimEndpointScript {
            net,
            port,
            behavior,
            connect_delay_us: 0,
            jitter_us: 0,
        }
    }

    /// Script for exactly one address and port.
    pub fn host(addr: SocketAddrV4, behavior: Behavior) -> Self {
        Self::new(
            Ipv4Net::new(*addr.ip(), 32).expect("/32 is valid"),
            Some(addr.port()),
            behavior,
        )
    }

    fn matches(&self, dst: SocketAddrV4) -> bool {
        self.net.contains(dst.ip()) && self.port.is_none_or(|p| p == dst.port())
    }

    fn overlaps(&self, other: &SimEndpointScript) -> bool {
        let nets = self.net.contains(&other.net.network()) || other.net.contains(&self.net.network());
        let ports = match (self.port, other.port) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        };
        nets && ports
    }
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFile {
    #[serde(default)]
    pub endpoint: Vec<SimEndpointScript>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("endpoint scripts {0} and {1} overlap")]
    OverlappingScripts(usize, usize),
    #[error("scripts file {path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn load_scripts(path: &Path) -> Result<Vec<SimEndpointScript>, SimError> {
    let text = std::fs::read_to_string(path)?;
    let file: ScriptFile = toml::from_str(&text).map_err(|e| SimError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(file.endpoint)
}

/// Everything one simulated connection saw.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StreamLog {
    pub dst: Option<SocketAddrV4>,
    pub opened_at: Timestamp,
    /// Bytes the engine sent to the endpoint.
    pub received: Vec<u8>,
    /// Bytes the endpoint delivered to the engine.
    pub sent: Vec<u8>,
    pub engine_shutdown: bool,
    pub engine_aborted: bool,
    pub refused: bool,
    pub peer_closed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatagramLog {
    pub at: Timestamp,
    pub socket: DatagramId,
    pub dst: SocketAddrV4,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConnState {
    Connecting,
    Connected,
    Refused,
}

#[derive(Debug)]
struct SimStream {
    script: Option<usize>,
    state: ConnState,
    rx: VecDeque<u8>,
    write_closed: bool,
    responded: bool,
    last_scheduled: Timestamp,
}

#[derive(Debug)]
enum Pending {
    Connect { stream: StreamId, ok: bool },
    Deliver { stream: StreamId, bytes: Vec<u8> },
    PeerClose { stream: StreamId },
    Datagram { socket: DatagramId, from: SocketAddrV4, payload: Vec<u8> },
}

pub struct SimUpstream {
    scripts: Vec<SimEndpointScript>,
    rng: ChaCha8Rng,
    next_id: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<(Timestamp, u64)>>,
    pending: BTreeMap<u64, Pending>,
    streams: BTreeMap<StreamId, SimStream>,
    sockets: BTreeMap<DatagramId, ()>,
    logs: BTreeMap<StreamId, StreamLog>,
    datagrams: Vec<DatagramLog>,
    opened: u64,
    released: u64,
}

impl SimUpstream {
    pub fn new(scripts: Vec<SimEndpointScript>, seed: u64) -> Result<Self, SimError> {
        for i in 0..scripts.len() {
            for j in i + 1..scripts.len() {
                if scripts[i].overlaps(&scripts[j]) {
                    return Err(SimError::OverlappingScripts(i, j));
                }
            }
        }
        Ok(SimUpstream {
            scripts,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_id: 1,
            seq: 0,
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            streams: BTreeMap::new(),
            sockets: BTreeMap::new(),
            logs: BTreeMap::new(),
            datagrams: Vec::new(),
            opened: 0,
            released: 0,
        })
    }

    fn script_for(&self, dst: SocketAddrV4) -> Option<usize> {
        self.scripts.iter().position(|s| s.matches(dst))
    }

    fn delay(&mut self, script: usize, base_us: u64) -> Duration {
        let jitter = self.scripts[script].jitter_us;
        let extra = if jitter > 0 { self.rng.gen_range(0..=jitter) } else { 0 };
        Duration::from_micros(base_us + extra)
    }

    fn schedule(&mut self, at: Timestamp, p: Pending) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq)));
        self.pending.insert(self.seq, p);
    }

    /// Schedules on a stream without overtaking earlier deliveries.
    fn schedule_stream(&mut self, stream: StreamId, at: Timestamp, p: Pending) {
        let at = match self.streams.get_mut(&stream) {
            Some(s) => {
                let at = at.max(s.last_scheduled);
                s.last_scheduled = at;
                at
            }
            None => at,
        };
        self.schedule(at, p);
    }

    pub fn stream_log(&self, id: StreamId) -> Option<&StreamLog> {
        self.logs.get(&id)
    }

    pub fn stream_logs(&self) -> impl Iterator<Item = (&StreamId, &StreamLog)> {
        self.logs.iter()
    }

    /// Datagrams the engine sent, in order.
    pub fn datagram_log(&self) -> &[DatagramLog] {
        &self.datagrams
    }

    /// Destinations of every stream the engine opened.
    pub fn opened_destinations(&self) -> Vec<SocketAddrV4> {
        self.logs.values().filter_map(|l| l.dst).collect()
    }

    pub fn handles_opened(&self) -> u64 {
        self.opened
    }

    fn dns_reply(&mut self, script: usize, payload: &[u8]) -> Option<(Vec<u8>, u64)> {
        let Behavior::DnsResponder { answers, delay_us, tamper } = &self.scripts[script].behavior
        else {
            return None;
        };
        let q: DnsQuery = dns::parse_query(payload)?;
        let found = answers.get(&q.name).cloned();
        let addrs = match (tamper, found) {
            (Some(DnsTamper::Drop), _) => return None,
            (Some(DnsTamper::Spoof(a)), _) => Some(vec![*a]),
            (Some(DnsTamper::RewriteNxdomain(a)), None) => Some(vec![*a]),
            (_, found) => found,
        };
        let reply = dns::build_response(&q, addrs.as_deref(), 300)?;
        Some((reply, *delay_us))
    }
}

impl UpstreamNetwork for SimUpstream {
    fn open_stream(&mut self, now: Timestamp, dst: SocketAddrV4) -> Result<StreamId, UpstreamError> {
        let id = StreamId(self.next_id);
        self.next_id += 1;
        let script = self.script_for(dst);
        self.streams.insert(
            id,
            SimStream {
                script,
                state: ConnState::Connecting,
                rx: VecDeque::new(),
                write_closed: false,
                responded: false,
                last_scheduled: now,
            },
        );
        self.logs.insert(
            id,
            StreamLog {
                dst: Some(dst),
                opened_at: now,
                ..Default::default()
            },
        );
        self.opened += 1;
        if let Some(s) = script {
            let base = self.scripts[s].connect_delay_us;
            let d = self.delay(s, base);
            match self.scripts[s].behavior {
                Behavior::Blackhole => {}
                Behavior::ResetOnConnect => {
                    self.schedule_stream(id, now + d, Pending::Connect { stream: id, ok: false })
                }
                _ => self.schedule_stream(id, now + d, Pending::Connect { stream: id, ok: true }),
            }
        }
        Ok(id)
    }

    fn send(&mut self, now: Timestamp, stream: StreamId, data: &[u8]) -> Result<usize, UpstreamError> {
        let s = self.streams.get(&stream).ok_or(UpstreamError::UnknownHandle)?;
        if s.state != ConnState::Connected {
            return Err(UpstreamError::NotConnected);
        }
        if s.write_closed {
            return Err(UpstreamError::WriteClosed);
        }
        let script = s.script;
        let responded = s.responded;
        if let Some(log) = self.logs.get_mut(&stream) {
            log.received.extend_from_slice(data);
        }
        if data.is_empty() {
            return Ok(0);
        }
        if let Some(idx) = script {
            match self.scripts[idx].behavior.clone() {
                Behavior::Echo => {
                    let d = self.delay(idx, 0);
                    self.schedule_stream(stream, now + d, Pending::Deliver { stream, bytes: data.to_vec() });
                }
                Behavior::StaticResponse { data: resp, delay_us } if !responded => {
                    if let Some(s) = self.streams.get_mut(&stream) {
                        s.responded = true;
                    }
                    let d = self.delay(idx, delay_us);
                    self.schedule_stream(stream, now + d, Pending::Deliver { stream, bytes: resp.into_bytes() });
                    self.schedule_stream(stream, now + d, Pending::PeerClose { stream });
                }
                _ => {}
            }
        }
        Ok(data.len())
    }

    fn recv(&mut self, _now: Timestamp, stream: StreamId, max: usize) -> Result<Vec<u8>, UpstreamError> {
        let s = self.streams.get_mut(&stream).ok_or(UpstreamError::UnknownHandle)?;
        let n = max.min(s.rx.len());
        Ok(s.rx.drain(..n).collect())
    }

    fn shutdown_write(&mut self, now: Timestamp, stream: StreamId) -> Result<(), UpstreamError> {
        let s = self.streams.get_mut(&stream).ok_or(UpstreamError::UnknownHandle)?;
        if s.write_closed {
            return Ok(());
        }
        s.write_closed = true;
        let (script, responded) = (s.script, s.responded);
        if let Some(log) = self.logs.get_mut(&stream) {
            log.engine_shutdown = true;
        }
        if let Some(idx) = script {
            let closes = match self.scripts[idx].behavior {
                Behavior::Echo | Behavior::DnsResponder { .. } => true,
                Behavior::StaticResponse { .. } => !responded,
                _ => false,
            };
            if closes {
                self.schedule_stream(stream, now, Pending::PeerClose { stream });
            }
        }
        Ok(())
    }

    fn close_stream(&mut self, _now: Timestamp, stream: StreamId) {
        if self.streams.remove(&stream).is_some() {
            self.released += 1;
        }
    }

    fn abort_stream(&mut self, _now: Timestamp, stream: StreamId) {
        if self.streams.remove(&stream).is_some() {
            self.released += 1;
            if let Some(log) = self.logs.get_mut(&stream) {
                log.engine_aborted = true;
            }
        }
    }

    fn open_datagram(&mut self, _now: Timestamp) -> Result<DatagramId, UpstreamError> {
        let id = DatagramId(self.next_id);
        self.next_id += 1;
        self.sockets.insert(id, ());
        self.opened += 1;
        Ok(id)
    }

    fn send_to(
        &mut self,
        now: Timestamp,
        socket: DatagramId,
        dst: SocketAddrV4,
        payload: &[u8],
    ) -> Result<(), UpstreamError> {
        if !self.sockets.contains_key(&socket) {
            return Err(UpstreamError::UnknownHandle);
        }
        self.datagrams.push(DatagramLog {
            at: now,
            socket,
            dst,
            payload: payload.to_vec(),
        });
        let Some(idx) = self.script_for(dst) else {
            return Ok(());
        };
        let reply = match &self.scripts[idx].behavior {
            Behavior::Echo => Some((payload.to_vec(), 0)),
            Behavior::StaticResponse { data, delay_us } => Some((data.clone().into_bytes(), *delay_us)),
            Behavior::DnsResponder { .. } => self.dns_reply(idx, payload),
            Behavior::Blackhole | Behavior::ResetOnConnect => None,
        };
        if let Some((bytes, base)) = reply {
            let d = self.delay(idx, base);
            self.schedule(now + d, Pending::Datagram { socket, from: dst, payload: bytes });
        }
        Ok(())
    }

    fn close_datagram(&mut self, _now: Timestamp, socket: DatagramId) {
        if self.sockets.remove(&socket).is_some() {
            self.released += 1;
        }
    }

    fn active_handle_count(&self) -> usize {
        (self.opened - self.released) as usize
    }

    fn poll_event(&mut self, now: Timestamp) -> Option<UpstreamEvent> {
        while let Some(&Reverse((at, seq))) = self.queue.peek() {
            if at > now {
                return None;
            }
            self.queue.pop();
            let Some(p) = self.pending.remove(&seq) else { continue };
            match p {
                Pending::Connect { stream, ok } => {
                    let Some(s) = self.streams.get_mut(&stream) else { continue };
                    if ok {
                        s.state = ConnState::Connected;
                        return Some(UpstreamEvent::Connected { stream, result: Ok(()) });
                    }
                    s.state = ConnState::Refused;
                    if let Some(log) = self.logs.get_mut(&stream) {
                        log.refused = true;
                    }
                    return Some(UpstreamEvent::Connected {
                        stream,
                        result: Err(ConnectFailure::Refused),
                    });
                }
                Pending::Deliver { stream, bytes } => {
                    let Some(s) = self.streams.get_mut(&stream) else { continue };
                    s.rx.extend(bytes.iter().copied());
                    if let Some(log) = self.logs.get_mut(&stream) {
                        log.sent.extend_from_slice(&bytes);
                    }
                    return Some(UpstreamEvent::Readable { stream });
                }
                Pending::PeerClose { stream } => {
                    if !self.streams.contains_key(&stream) {
                        continue;
                    }
                    if let Some(log) = self.logs.get_mut(&stream) {
                        log.peer_closed = true;
                    }
                    return Some(UpstreamEvent::PeerClosed { stream });
                }
                Pending::Datagram { socket, from, payload } => {
                    if !self.sockets.contains_key(&socket) {
                        continue;
                    }
                    return Some(UpstreamEvent::Datagram { socket, from, payload });
                }
            }
        }
        None
    }

    fn next_event_at(&self) -> Option<Timestamp> {
        self.queue.peek().map(|Reverse((at, _))| *at)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sa(s: &str) -> SocketAddrV4 {
        s.parse().unwrap()
    }

    fn drain(up: &mut SimUpstream, now: Timestamp) -> Vec<UpstreamEvent> {
        std::iter::from_fn(|| up.poll_event(now)).collect()
    }

    #[test]
    fn reset_on_connect_refuses() {
        let mut up = SimUpstream::new(
            vec![SimEndpointScript::host(sa("10.1.0.1:80"), Behavior::ResetOnConnect)],
            0,
        )
        .unwrap();
        let s = up.open_stream(Timestamp(0), sa("10.1.0.1:80")).unwrap();
        assert_eq!(
            drain(&mut up, Timestamp(0)),
            vec![UpstreamEvent::Connected { stream: s, result: Err(ConnectFailure::Refused) }]
        );
    }

    #[test]
    fn echo_stream() {
        let mut up =
            SimUpstream::new(vec![SimEndpointScript::host(sa("10.1.0.1:7"), Behavior::Echo)], 0).unwrap();
        let s = up.open_stream(Timestamp(0), sa("10.1.0.1:7")).unwrap();
        assert_eq!(drain(&mut up, Timestamp(0)).len(), 1);
        assert_eq!(up.send(Timestamp(0), s, b"abc").unwrap(), 3);
        assert_eq!(drain(&mut up, Timestamp(0)), vec![UpstreamEvent::Readable { stream: s }]);
        assert_eq!(up.recv(Timestamp(0), s, 100).unwrap(), b"abc");
        up.shutdown_write(Timestamp(0), s).unwrap();
        assert_eq!(drain(&mut up, Timestamp(0)), vec![UpstreamEvent::PeerClosed { stream: s }]);
        assert_eq!(up.active_handle_count(), 1);
        up.close_stream(Timestamp(0), s);
        assert_eq!(up.active_handle_count(), 0);
        let log = up.stream_log(s).unwrap();
        assert_eq!(log.received, b"abc");
        assert_eq!(log.sent, b"abc");
    }

    #[test]
    fn dns_answer_respects_delay() {
        let mut answers = BTreeMap::new();
        answers.insert("example.com".to_string(), vec!["93.184.216.34".parse().unwrap()]);
        let mut up = SimUpstream::new(
            vec![SimEndpointScript::host(
                sa("8.8.8.8:53"),
                Behavior::DnsResponder { answers, delay_us: 20_000, tamper: None },
            )],
            1,
        )
        .unwrap();
        let sock = up.open_datagram(Timestamp(0)).unwrap();
        let q = dns::build_query(9, "example.com").unwrap();
        up.send_to(Timestamp(1_000), sock, sa("8.8.8.8:53"), &q).unwrap();
        assert!(drain(&mut up, Timestamp(20_999)).is_empty());
        assert_eq!(up.next_event_at(), Some(Timestamp(21_000)));
        let evs = drain(&mut up, Timestamp(21_000));
        let UpstreamEvent::Datagram { from, payload, .. } = &evs[0] else { panic!() };
        assert_eq!(*from, sa("8.8.8.8:53"));
        let a = dns::parse_response(payload).unwrap();
        assert_eq!(a.addrs, vec!["93.184.216.34".parse::<Ipv4Addr>().unwrap()]);
    }

    #[test]
    fn unmatched_is_blackhole() {
        let mut up = SimUpstream::new(vec![], 0).unwrap();
        let s = up.open_stream(Timestamp(0), sa("1.2.3.4:80")).unwrap();
        assert!(drain(&mut up, Timestamp(u64::MAX)).is_empty());
        assert!(matches!(up.send(Timestamp(0), s, b"x"), Err(UpstreamError::NotConnected)));
        let d = up.open_datagram(Timestamp(0)).unwrap();
        up.send_to(Timestamp(0), d, sa("1.2.3.4:53"), b"q").unwrap();
        assert!(drain(&mut up, Timestamp(u64::MAX)).is_empty());
    }

    #[test]
    fn overlapping_scripts_rejected() {
        let a = SimEndpointScript::new("10.0.0.0/8".parse().unwrap(), None, Behavior::Echo);
        let b = SimEndpointScript::host(sa("10.2.3.4:80"), Behavior::Blackhole);
        assert!(matches!(SimUpstream::new(vec![a.clone(), b], 0), Err(SimError::OverlappingScripts(0, 1))));
        let c = SimEndpointScript::new("10.0.0.0/8".parse().unwrap(), Some(81), Behavior::Echo);
        let d = SimEndpointScript::new("10.0.0.0/8".parse().unwrap(), Some(80), Behavior::Echo);
        assert!(SimUpstream::new(vec![c, d], 0).is_ok());
    }

    #[test]
    fn jitter_is_seeded() {
        let run = |seed| {
            let mut s = SimEndpointScript::host(sa("10.0.0.9:7"), Behavior::Echo);
            s.jitter_us = 5_000;
            let mut up = SimUpstream::new(vec![s], seed).unwrap();
            let id = up.open_stream(Timestamp(0), sa("10.0.0.9:7")).unwrap();
            let t = up.next_event_at().unwrap();
            drain(&mut up, t);
            up.send(t, id, b"x").unwrap();
            (t, up.next_event_at().unwrap())
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn tamper_rules() {
        let mut answers = BTreeMap::new();
        answers.insert("a.test".to_string(), vec!["1.1.1.1".parse().unwrap()]);
        let resolve = |tamper: Option<DnsTamper>, name: &str| {
            let mut up = SimUpstream::new(
                vec![SimEndpointScript::host(
                    sa("9.9.9.9:53"),
                    Behavior::DnsResponder { answers: answers.clone(), delay_us: 0, tamper },
                )],
                0,
            )
            .unwrap();
            let sock = up.open_datagram(Timestamp(0)).unwrap();
            up.send_to(Timestamp(0), sock, sa("9.9.9.9:53"), &dns::build_query(1, name).unwrap())
                .unwrap();
            up.poll_event(Timestamp(0)).map(|e| match e {
                UpstreamEvent::Datagram { payload, .. } => dns::parse_response(&payload).unwrap(),
                _ => panic!(),
            })
        };
        assert_eq!(resolve(None, "b.test").unwrap().rcode, dns::DnsRcode::NxDomain);
        let rw = resolve(Some(DnsTamper::RewriteNxdomain("6.6.6.6".parse().unwrap())), "b.test").unwrap();
        assert_eq!(rw.addrs, vec!["6.6.6.6".parse::<Ipv4Addr>().unwrap()]);
        let sp = resolve(Some(DnsTamper::Spoof("7.7.7.7".parse().unwrap())), "a.test").unwrap();
        assert_eq!(sp.addrs, vec!["7.7.7.7".parse::<Ipv4Addr>().unwrap()]);
        assert!(resolve(Some(DnsTamper::Drop), "a.test").is_none());
    }

    #[test]
    fn scripts_file_parses() {
        let text = r#"
[[endpoint]]
match = "93.184.216.0/24"
port = 80
behavior = { static_response = { data = "HTTP/1.0 200 OK\r\n\r\nhi", delay_us = 1000 } }

[[endpoint]]
match = "8.8.8.8/32"
port = 53
behavior = { dns_responder = { answers = { "example.com" = ["93.184.216.34"] }, delay_us = 20000 } }

[[endpoint]]
match = "10.9.0.0/16"
behavior = "reset_on_connect"
"#;
        let f: ScriptFile = toml::from_str(text).unwrap();
        assert_eq!(f.endpoint.len(), 3);
        assert_eq!(f.endpoint[2].behavior, Behavior::ResetOnConnect);
    }
}
