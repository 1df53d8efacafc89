//! Connect-latency overhead of the engine on loopback.
//!
//! Each sample pairs two connects to the same local listener. The direct
//! connect is timed around `TcpStream::connect`. The engine connect is timed
//! from writing the app's SYN into an in-memory conduit to reading the
//! engine's SYN/ACK back out of it, with real upstream sockets underneath.
//! Both taps sit inside this harness.

use crate::engine::{Engine, EngineConfig, IsnMode};
use crate::io::{MemoryConduit, PacketConduit, SocketUpstream};
use crate::packet::{serialize_packet, Packet, TcpFlags, TcpHeader, Transport};
use crate::plugin::{HostPolicy, PermissionSet, PluginDescriptor, PluginHost};
use crate::plugins::advisor::{AdvisorConfig, ProtocolAdvisor};
use crate::plugins::snitch::{Snitch, SnitchConfig};
use crate::time::Timestamp;
use serde::{Deserialize, Serialize};
use std::net::{Ipv4Addr, SocketAddrV4, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

pub const MIN_SAMPLES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub n: usize,
    pub concurrency: usize,
    /// Run observe-only plugins in the engine pass instead of an empty chain.
    pub with_plugins: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { n: 1000, concurrency: 1, with_plugins: false }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("need at least {MIN_SAMPLES} connections, got {0}")]
    InsufficientSamples(usize),
    #[error("engine did not answer a SYN within {0:?}")]
    NoSynAck(Duration),
    #[error("engine connect was refused")]
    Refused,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSample {
    pub direct_connect_us: f64,
    pub engine_connect_us: f64,
    pub delta_us: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSummary {
    pub count: usize,
    pub median_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchResult {
    pub concurrency: usize,
    pub with_plugins: bool,
    pub samples: Vec<BenchSample>,
    /// Statistics of `delta_us`.
    pub summary: BenchSummary,
}

/// Nearest-rank percentile of sorted data, `q` in (0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn sorted_deltas(samples: &[BenchSample]) -> Vec<f64> {
    let mut d: Vec<f64> = samples.iter().map(|s| s.delta_us).collect();
    d.sort_by(f64::total_cmp);
    d
}

pub fn summarize(samples: &[BenchSample]) -> BenchSummary {
    let d = sorted_deltas(samples);
    BenchSummary {
        count: d.len(),
        median_us: percentile(&d, 0.5),
        p90_us: percentile(&d, 0.9),
        p99_us: percentile(&d, 0.99),
    }
}

impl BenchResult {
    pub fn from_samples(samples: Vec<BenchSample>, concurrency: usize, with_plugins: bool) -> Self {
        BenchResult { concurrency, with_plugins, summary: summarize(&samples), samples }
    }

    /// True when the stored summary is what the samples give.
    pub fn is_consistent(&self) -> bool {
        self.summary == summarize(&self.samples)
            && self.samples.iter().all(|s| (s.engine_connect_us - s.direct_connect_us - s.delta_us).abs() < 1e-6)
    }

    /// Empirical CDF of the deltas as (delta_us, fraction) points.
    pub fn cdf(&self) -> Vec<(f64, f64)> {
        let d = sorted_deltas(&self.samples);
        let n = d.len() as f64;
        d.iter().enumerate().map(|(i, x)| (*x, (i + 1) as f64 / n)).collect()
    }

    pub fn table(&self) -> String {
        let s = &self.summary;
        let mut t = String::new();
        t.push_str(&format!("connections   {}\n", s.count));
        t.push_str(&format!("concurrency   {}\n", self.concurrency));
        t.push_str(&format!("plugins       {}\n", if self.with_plugins { "observe-only" } else { "none" }));
        t.push_str(&format!("median delta  {:.1} us\n", s.median_us));
        t.push_str(&format!("p90 delta     {:.1} us\n", s.p90_us));
        t.push_str(&format!("p99 delta     {:.1} us\n", s.p99_us));
        t
    }
}

struct Listener {
    addr: SocketAddrV4,
    stop: Arc<AtomicBool>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Listener {
    fn start() -> std::io::Result<Self> {
        let l = TcpListener::bind((Ipv4Addr::LOCALHOST, 0))?;
        let addr = match l.local_addr()? {
            std::net::SocketAddr::V4(a) => a,
            std::net::SocketAddr::V6(_) => unreachable!("bound to an IPv4 address"),
        };
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::spawn(move || {
            for conn in l.incoming() {
                drop(conn);
                if flag.load(Ordering::Relaxed) {
                    break;
                }
            }
        });
        Ok(Listener { addr, stop, thread: Some(thread) })
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn bench_host(with_plugins: bool) -> PluginHost {
    let mut host = PluginHost::new(HostPolicy::default());
    if with_plugins {
        host.register(PluginDescriptor::new("snitch", PermissionSet::OBSERVE), Box::new(Snitch::new(SnitchConfig::default())))
            .expect("fresh host");
        host.register(
            PluginDescriptor::new("advisor", PermissionSet::OBSERVE),
            Box::new(ProtocolAdvisor::new(AdvisorConfig::default())),
        )
        .expect("fresh host");
    }
    host
}

const SYN_TIMEOUT: Duration = Duration::from_secs(2);

struct Worker {
    engine: Engine<SocketUpstream>,
    conduit: MemoryConduit,
    started: Instant,
    app: Ipv4Addr,
    next_port: u16,
}

impl Worker {
    fn new(id: usize, with_plugins: bool) -> Result<Self, BenchError> {
        let cfg = EngineConfig { local_isn: IsnMode::Fixed(1), socket_budget: 4096, ..Default::default() };
        let engine = Engine::new(cfg, SocketUpstream::new()?, bench_host(with_plugins), id as u64).expect("valid config");
        Ok(Worker {
            engine,
            conduit: MemoryConduit::new(),
            started: Instant::now(),
            app: Ipv4Addr::new(10, 0, (id >> 8) as u8, (id & 0xff) as u8 + 1),
            next_port: 20000,
        })
    }

    fn now(&self) -> Timestamp {
        Timestamp(self.started.elapsed().as_micros() as u64)
    }

    /// Moves conduit input into the engine and engine output into the conduit.
    fn pump(&mut self) {
        while let Some(p) = self.conduit.read_packet() {
            let now = self.now();
            self.engine.on_app_bytes(now, &p.bytes, &p.app_label);
        }
        let now = self.now();
        for p in self.engine.drain_to_app() {
            if let Ok(bytes) = serialize_packet(&p, self.engine.config().mtu) {
                self.conduit.write_packet(now, &bytes);
            }
        }
    }

    fn connect_through_engine(&mut self, dst: SocketAddrV4) -> Result<f64, BenchError> {
        let port = self.next_port;
        self.next_port = if port == u16::MAX { 20000 } else { port + 1 };
        let src = SocketAddrV4::new(self.app, port);
        let mut syn_h = TcpHeader::new(port, dst.port(), 1000, 0, TcpFlags::SYN);
        syn_h.options = TcpHeader::mss_option(1460);
        let syn = serialize_packet(&Packet::tcp(src, dst, syn_h, vec![]), 1500).expect("valid packet");

        let t0 = Instant::now();
        self.conduit.inject(self.now(), "bench", syn);
        self.pump();
        let synack = loop {
            if let Some((_, bytes)) = self.conduit.take_outbound() {
                break bytes;
            }
            if t0.elapsed() > SYN_TIMEOUT {
                return Err(BenchError::NoSynAck(SYN_TIMEOUT));
            }
            self.engine.upstream_mut().wait(Some(Duration::from_millis(50)))?;
            let now = self.now();
            self.engine.poll_upstream(now);
            self.pump();
        };
        let elapsed = t0.elapsed().as_secs_f64() * 1e6;

        let p = crate::packet::parse_packet(&synack).map_err(|_| BenchError::Refused)?;
        let Transport::Tcp(h) = &p.transport else { return Err(BenchError::Refused) };
        if !h.flags.contains(TcpFlags::SYN | TcpFlags::ACK) {
            return Err(BenchError::Refused);
        }
        let rst = TcpHeader::new(port, dst.port(), 1001, h.seq.wrapping_add(1), TcpFlags::RST | TcpFlags::ACK);
        let rst = serialize_packet(&Packet::tcp(src, dst, rst, vec![]), 1500).expect("valid packet");
        self.conduit.inject(self.now(), "bench", rst);
        self.pump();
        while self.conduit.take_outbound().is_some() {}
        let now = self.now();
        self.engine.sweep(now);
        Ok(elapsed)
    }

    fn sample(&mut self, dst: SocketAddrV4) -> Result<BenchSample, BenchError> {
        let t0 = Instant::now();
        let direct = TcpStream::connect(dst)?;
        let direct_us = t0.elapsed().as_secs_f64() * 1e6;
        drop(direct);
        let engine_us = self.connect_through_engine(dst)?;
        Ok(BenchSample { direct_connect_us: direct_us, engine_connect_us: engine_us, delta_us: engine_us - direct_us })
    }
}

pub fn run_bench(opts: BenchOptions) -> Result<BenchResult, BenchError> {
    if opts.n < MIN_SAMPLES {
        return Err(BenchError::InsufficientSamples(opts.n));
    }
    let listener = Listener::start()?;
    let workers = opts.concurrency.clamp(1, opts.n);
    let dst = listener.addr;
    let per: Vec<usize> = (0..workers).map(|w| opts.n / workers + usize::from(w < opts.n % workers)).collect();
    let results: Vec<Result<Vec<BenchSample>, BenchError>> = std::thread::scope(|s| {
        let handles: Vec<_> = per
            .iter()
            .enumerate()
            .map(|(id, &count)| {
                s.spawn(move || {
                    let mut w = Worker::new(id, opts.with_plugins)?;
                    // one unmeasured round to warm caches and the listener
                    w.sample(dst)?;
                    (0..count).map(|_| w.sample(dst)).collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
    });
    let mut samples = Vec::with_capacity(opts.n);
    for r in results {
        samples.extend(r?);
    }
    Ok(BenchResult::from_samples(samples, workers, opts.with_plugins))
}
