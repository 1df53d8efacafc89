//! One check per acceptance criterion. Each returns a short summary on success.

use super::*;
use mbz::bench::{run_bench, BenchOptions};
use mbz::config::PluginKind;
use mbz::engine::TcpState;
use mbz::io::dns::{build_query, parse_response};
use mbz::io::pcap::read_pcap_from;
use mbz::io::sim::DnsTamper;
use mbz::io::trace::Direction;
use mbz::plugin::*;
use mbz::plugins::whatif::{Divergence, DnsWhatIf, WhatIfConfig};
use mbz::replay::replay;
use mbz::report::to_json;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

pub type Outcome = Result<String, String>;

pub fn tcp_proxy(cases: u32) -> Outcome {
    let started = Instant::now();
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner
        .run(&strategy::proxy_case(), |c| {
            run_proxy_case(&c).map_err(proptest::test_runner::TestCaseError::fail)
        })
        .map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "{cases} cases took {secs:.1} s");
    Ok(format!("{cases} cases in {secs:.1} s"))
}

fn syn(s: u32, dst: &str) -> Packet {
    let mut h = TcpHeader::new(0, 0, s, 0, TcpFlags::SYN);
    h.window = 65535;
    Packet::tcp(APP.parse().unwrap(), dst.parse().unwrap(), h, Vec::new())
}

pub fn handshake(samples: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..samples {
        let s: u32 = rng.gen();
        let l: u32 = rng.gen();
        let mut e = proxy_engine(0, "", IsnMode::Fixed(l));
        e.on_app_packet(Timestamp(0), &syn(s, ECHO), "app");
        e.run_until(Timestamp::from_millis(10));
        let out = e.drain_to_app();
        ensure!(out.len() == 1, "S={s}: {} packets instead of one SYN/ACK", out.len());
        let h = out[0].tcp_header().unwrap();
        ensure!(h.flags == TcpFlags::SYN | TcpFlags::ACK, "S={s}: flags {}", h.flags);
        ensure!(h.seq == l && h.ack == s.wrapping_add(1), "S={s} L={l}: seq {} ack {}", h.seq, h.ack);

        e.on_app_packet(Timestamp::from_millis(20), &syn(s, REFUSE), "app");
        e.run_until(Timestamp::from_millis(30));
        let out = e.drain_to_app();
        ensure!(out.len() == 1, "S={s}: refusal produced {} packets", out.len());
        let h = out[0].tcp_header().unwrap();
        ensure!(h.flags.contains(TcpFlags::RST), "S={s}: refusal flags {}", h.flags);
        ensure!(h.ack == s.wrapping_add(1), "S={s}: RST ack {}", h.ack);
        let key = FlowKey::new(Protocol::Tcp, APP.parse().unwrap(), REFUSE.parse().unwrap());
        ensure!(e.tcp_state(&key).is_none_or(|st| st == TcpState::Closed), "refused flow left open");
    }
    Ok(format!("{samples} random S, each with its own fixed L"))
}

const RESOLVER: &str = "192.0.2.53:53";
const HOLE_NET: &str = "203.0.113.0/24";

fn udp_engine(cfg: EngineConfig) -> Engine<SimUpstream> {
    let answers = BTreeMap::from([("example.test".to_string(), vec![Ipv4Addr::new(198, 51, 100, 7)])]);
    let sim = SimUpstream::new(
        vec![
            SimEndpointScript::host(
                RESOLVER.parse().unwrap(),
                Behavior::DnsResponder { answers, delay_us: 1_000, tamper: None },
            ),
            SimEndpointScript::new(HOLE_NET.parse().unwrap(), None, Behavior::Blackhole),
        ],
        5,
    )
    .unwrap();
    Engine::new(cfg, sim, PluginHost::default(), 5).unwrap()
}

fn app_udp(port: u16, dst: SocketAddrV4, payload: Vec<u8>) -> Packet {
    Packet::udp(SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 2), port), dst, payload)
}

/// First time, stepping by 10 ms, at which the flow is gone.
fn eviction_time(e: &mut Engine<SimUpstream>, key: &FlowKey, from: Timestamp, limit: Timestamp) -> Option<Timestamp> {
    let mut t = from;
    while t <= limit {
        e.run_until(t);
        if !e.has_udp_flow(key) {
            return Some(t);
        }
        t = t + Duration::from_millis(10);
    }
    None
}

pub fn udp_lifecycle() -> Outcome {
    // two queries to one resolver share a socket
    let cfg = EngineConfig::default();
    let mut e = udp_engine(cfg.clone());
    let resolver: SocketAddrV4 = RESOLVER.parse().unwrap();
    e.on_app_packet(Timestamp(0), &app_udp(5000, resolver, build_query(1, "example.test").unwrap()), "a");
    let after_first = e.upstream().handles_opened();
    e.on_app_packet(Timestamp(10), &app_udp(5001, resolver, build_query(2, "example.test").unwrap()), "a");
    ensure!(after_first == 1, "first query opened {after_first} handles");
    ensure!(e.upstream().handles_opened() == 1, "second query opened another handle");
    e.run_until(Timestamp::from_millis(50));
    let answers = e.drain_to_app();
    ensure!(answers.len() == 2, "{} DNS answers", answers.len());
    ensure!(answers.iter().all(|p| parse_response(&p.payload).is_some()), "unparseable answer");

    // idle eviction, plain and DNS
    let sweep = Duration::from_secs(cfg.sweep_interval);
    let start = Timestamp::from_millis(500);
    let mut e = udp_engine(cfg.clone());
    let hole = SocketAddrV4::new(Ipv4Addr::new(203, 0, 113, 9), 7777);
    e.on_app_packet(start, &app_udp(6000, hole, vec![1]), "a");
    e.on_app_packet(start, &app_udp(6001, resolver, build_query(3, "example.test").unwrap()), "a");
    let plain = FlowKey::new(Protocol::Udp, "10.0.0.2:6000".parse().unwrap(), hole);
    let dns = FlowKey::new(Protocol::Udp, "10.0.0.2:6001".parse().unwrap(), resolver);
    // the reply 1 ms later is the DNS flow's last activity
    let dns_last = start + Duration::from_millis(1);
    let dns_gone = eviction_time(&mut e, &dns, start, Timestamp::from_secs(60)).ok_or("dns flow never evicted")?;
    let plain_gone = eviction_time(&mut e, &plain, dns_gone, Timestamp::from_secs(60)).ok_or("flow never evicted")?;
    let within = |gone: Timestamp, last: Timestamp, timeout: u64| {
        let idle = gone.since(last);
        let t = Duration::from_secs(timeout);
        idle + sweep >= t && idle <= t + sweep
    };
    ensure!(within(plain_gone, start, cfg.udp_timeout), "plain flow evicted after {:?}", plain_gone.since(start));
    ensure!(within(dns_gone, dns_last, cfg.dns_timeout), "dns flow evicted after {:?}", dns_gone.since(dns_last));
    ensure!(e.upstream().active_handle_count() == 0, "handles left after eviction");

    // stress: 10,000 flows against a small budget
    let budget = 64;
    let mut e = udp_engine(EngineConfig { socket_budget: budget, ..EngineConfig::default() });
    let mut worst = 0;
    for i in 0..10_000u32 {
        let dst = SocketAddrV4::new(Ipv4Addr::new(203, 0, 113, (i % 250) as u8 + 1), 1000 + (i / 250) as u16);
        let t = Timestamp(i as u64 * 2_000);
        e.run_until(t);
        e.on_app_packet(t, &app_udp(10_000 + (i % 50_000) as u16, dst, vec![0; 32]), "a");
        worst = worst.max(e.upstream().active_handle_count());
        ensure!(worst <= budget, "{worst} handles open with budget {budget} at flow {i}");
    }
    e.run_until(Timestamp::from_secs(120));
    let c = e.counters();
    ensure!(c.handle_high_water as usize <= budget, "high-water {} > budget {budget}", c.handle_high_water);
    ensure!(c.udp.created + c.udp.dropped == 10_000, "{} created + {} dropped", c.udp.created, c.udp.dropped);
    ensure!(c.udp.evicted_pressure > 0, "pressure eviction never ran");
    ensure!(e.flow_count() == 0, "{} flows outlived the run", e.flow_count());
    Ok(format!(
        "dns reuse +1 handle; evicted after {:?}/{:?}; 10000 flows ({} refused), high-water {} of {budget}",
        plain_gone.since(start),
        dns_gone.since(dns_last),
        c.udp.dropped,
        c.handle_high_water
    ))
}

/// Counts its own callbacks so the host's bookkeeping has an outside check.
struct Probe<F: FnMut(&PluginContext) -> Verdict + 'static> {
    calls: Arc<AtomicU64>,
    cpu_us: u64,
    verdict: F,
}

impl<F: FnMut(&PluginContext) -> Verdict + 'static> Plugin for Probe<F> {
    fn on_event(&mut self, ctx: &PluginContext, _: &TrafficEvent<'_>, _: &mut Services) -> Result<Verdict, PluginError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok((self.verdict)(ctx))
    }
    fn on_wakeup(&mut self, _: Timestamp, _: &mut Services) {
        self.calls.fetch_add(1, Ordering::Relaxed);
    }
    fn reported_cpu_us(&self) -> u64 {
        self.cpu_us
    }
    fn as_any(&self) -> &dyn Any {
        self
    }
}

fn probe<F: FnMut(&PluginContext) -> Verdict + 'static>(cpu_us: u64, verdict: F) -> (Box<dyn Plugin>, Arc<AtomicU64>) {
    let calls = Arc::new(AtomicU64::new(0));
    (Box::new(Probe { calls: calls.clone(), cpu_us, verdict }), calls)
}

pub fn governance(subsequent: usize) -> Outcome {
    const OBS: PermissionSet = PermissionSet::OBSERVE;
    let blocked_port = 9999;
    let mut host = PluginHost::new(HostPolicy { cpu_metering: CpuMetering::Reported, ..Default::default() });
    let (hog, hog_calls) = probe(2_000, |_| Verdict::Pass);
    let (liar, _) = probe(0, |_| Verdict::Block(BlockMode::ResetApp));
    let (scribbler, _) = probe(0, |_| Verdict::Modify(b"XXXX".to_vec()));
    let (gate, _) = probe(0, move |c| {
        if c.key.dst.port() == blocked_port || c.key.src.port() == blocked_port {
            Verdict::Block(BlockMode::DropSilent)
        } else {
            Verdict::Pass
        }
    });
    let (after, after_calls) = probe(0, |_| Verdict::Pass);
    let hog = host.register(PluginDescriptor::new("hog", OBS), hog).unwrap();
    host.register(PluginDescriptor::new("liar", OBS), liar).unwrap();
    host.register(PluginDescriptor::new("scribbler", OBS), scribbler).unwrap();
    let gate = host.register(PluginDescriptor::new("gate", OBS | PermissionSet::BLOCK_FLOW), gate).unwrap();
    let after = host.register(PluginDescriptor::new("after", OBS), after).unwrap();

    let echo = SimEndpointScript::new("198.51.100.9/32".parse().unwrap(), None, Behavior::Echo);
    let sim = SimUpstream::new(vec![echo], 1).unwrap();
    let mut e = Engine::new(EngineConfig::default(), sim, host, 1).unwrap();
    let open = SocketAddrV4::new(Ipv4Addr::new(198, 51, 100, 9), 9);
    let shut = SocketAddrV4::new(Ipv4Addr::new(198, 51, 100, 9), blocked_port);

    let mut t = 0u64;
    let mut send = |e: &mut Engine<SimUpstream>, dst: SocketAddrV4, n: usize| {
        let mut echoed = 0;
        for _ in 0..n {
            e.on_app_packet(Timestamp(t), &app_udp(40_000, dst, b"ping".to_vec()), "app");
            t += 1_000;
            e.run_until(Timestamp(t));
            echoed += e.drain_to_app().len();
        }
        echoed
    };

    // the hog overruns its CPU budget and is disabled after the grace period
    let echoed = send(&mut e, open, 3);
    ensure!(echoed == 3, "{echoed} of 3 echoes reached the app");
    ensure!(!e.host().is_enabled(hog), "hog still enabled after {} calls", hog_calls.load(Ordering::Relaxed));
    ensure!(e.host().disable_reason(hog) == Some(DisableReason::CpuOverrun), "wrong disable reason");
    let frozen = hog_calls.load(Ordering::Relaxed);
    let frozen_host = e.host().invocations(hog);

    // downgraded verdicts: traffic still flows, unmodified
    let sent_before = e.upstream().datagram_log().len();
    let echoed = send(&mut e, open, 10);
    ensure!(echoed == 10, "{echoed} of 10 echoes reached the app");
    let log = &e.upstream().datagram_log()[sent_before..];
    ensure!(log.iter().all(|d| d.payload == b"ping"), "unpermitted modify reached the wire");
    let denied: BTreeSet<&str> = e
        .host()
        .violations()
        .iter()
        .filter(|v| v.kind == ViolationKind::PermissionDenied)
        .map(|v| v.plugin.as_str())
        .collect();
    ensure!(denied == BTreeSet::from(["liar", "scribbler"]), "permission violations from {denied:?}");

    // short-circuit: the gate's block keeps later plugins and the wire out of it
    let after_before = after_calls.load(Ordering::Relaxed);
    let echoed = send(&mut e, shut, 10);
    ensure!(echoed == 0, "blocked datagrams were answered");
    ensure!(e.upstream().datagram_log().iter().all(|d| d.dst != shut), "blocked datagram reached upstream");
    ensure!(after_calls.load(Ordering::Relaxed) == after_before, "plugin after the block was invoked");
    ensure!(e.host().invocations(after) == after_before, "host counted invocations after the block");

    // quiescence over many more events
    let mut total = 0;
    let gate_before = e.host().invocations(gate);
    for i in 0..subsequent {
        let dst = if i % 5 == 0 { shut } else { open };
        total += send(&mut e, dst, 1);
    }
    e.run_until(Timestamp(t + 120_000_000));
    e.host_mut().finalize(Timestamp(t + 120_000_000));
    ensure!(total > 0, "no traffic in the quiescence phase");
    ensure!(hog_calls.load(Ordering::Relaxed) == frozen, "disabled plugin was called again");
    ensure!(e.host().invocations(hog) == frozen_host, "host invoked the disabled plugin");
    let events = e.host().invocations(gate) - gate_before;
    ensure!(events as usize >= subsequent, "only {events} chain events in the quiescence phase");
    Ok(format!("hog disabled after {frozen} calls, silent over {events} later events"))
}

pub fn snitch() -> Outcome {
    let out = replay_fixture("run.toml");
    let s = out.report.snitch.ok_or("no snitch report")?;
    let total = s.protocols.tcp + s.protocols.udp + s.protocols.quic;
    let tcp_pct = (s.protocols.tcp as f64 * 1000.0 / total as f64).round() / 10.0;
    let udp_pct = ((s.protocols.udp + s.protocols.quic) as f64 * 1000.0 / total as f64).round() / 10.0;
    let heavy = s.orgs.iter().filter(|o| o.requests > 10).count();
    ensure!(s.third_party_flows == 372, "{} third-party flows", s.third_party_flows);
    ensure!(total == 372, "protocol histogram sums to {total}");
    ensure!(tcp_pct == 91.7 && udp_pct == 8.3, "shares {tcp_pct}/{udp_pct}");
    ensure!(s.organizations > 40, "{} organizations", s.organizations);
    ensure!(heavy == 5, "{heavy} organizations with more than 10 requests");
    Ok(format!("372 flows, {tcp_pct}% tcp / {udp_pct}% udp, {} orgs, {heavy} heavy", s.organizations))
}

const METRICLY: Ipv4Addr = Ipv4Addr::new(198, 18, 0, 10);
const IMEI: &[u8] = b"356938035643809";

/// Byte offsets covered by an IMEI occurrence.
fn imei_positions(bytes: &[u8]) -> BTreeSet<usize> {
    (0..bytes.len().saturating_sub(IMEI.len() - 1))
        .filter(|&i| &bytes[i..i + IMEI.len()] == IMEI)
        .flat_map(|i| i..i + IMEI.len())
        .collect()
}

pub fn firewall() -> Outcome {
    let base = replay_fixture("run.toml");
    let deny = replay_fixture("run_deny_metricly.toml");
    let base_snitch = base.report.snitch.as_ref().ok_or("no snitch report")?;
    let metricly = base_snitch.orgs.iter().find(|o| o.organization == "Metricly").ok_or("Metricly missing from baseline")?;
    let s = deny.report.snitch.as_ref().ok_or("no snitch report")?;
    ensure!(s.orgs.iter().all(|o| o.organization != "Metricly"), "Metricly still in the report");
    ensure!(
        s.third_party_flows == base_snitch.third_party_flows - metricly.flows,
        "{} flows, expected {}",
        s.third_party_flows,
        base_snitch.third_party_flows - metricly.flows
    );
    ensure!(
        deny.upstream.opened_destinations().iter().all(|d| *d.ip() != METRICLY),
        "a stream to Metricly was opened"
    );
    ensure!(deny.upstream.datagram_log().iter().all(|d| *d.dst.ip() != METRICLY), "a datagram reached Metricly");
    ensure!(base.upstream.opened_destinations().iter().any(|d| *d.ip() == METRICLY), "baseline never contacted Metricly");

    // rewrite: diff the output pcaps byte by byte
    let rewrite = replay_fixture("run_rewrite_imei.toml");
    let mtu = fixture_config("run.toml").engine.mtu;
    let a = read_pcap_from(base.pcap_bytes(mtu).as_slice()).map_err(|e| e.to_string())?;
    let b = read_pcap_from(rewrite.pcap_bytes(mtu).as_slice()).map_err(|e| e.to_string())?;
    ensure!(a.len() == b.len(), "pcap lengths {} vs {}", a.len(), b.len());
    let mut changed = 0usize;
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        ensure!(x.timestamp == y.timestamp, "packet {i}: timestamps differ");
        ensure!(x.packet.len() == y.packet.len(), "packet {i}: lengths differ");
        let ihl = (x.packet[0] & 0x0f) as usize * 4;
        let proto = x.packet[9];
        let checksum = match proto {
            6 => ihl + 16..ihl + 18,
            _ => ihl + 6..ihl + 8,
        };
        let payload_at = match proto {
            6 => ihl + (x.packet[ihl + 12] >> 4) as usize * 4,
            _ => ihl + 8,
        };
        let allowed = imei_positions(&x.packet[payload_at..]);
        for (j, (p, q)) in x.packet.iter().zip(&y.packet).enumerate() {
            if p == q || checksum.contains(&j) {
                continue;
            }
            ensure!(j >= payload_at && allowed.contains(&(j - payload_at)), "packet {i}: byte {j} changed outside the IMEI");
            ensure!(*q == b'0', "packet {i}: byte {j} rewritten to {q:#x}");
            changed += 1;
        }
        ensure!(imei_positions(&y.packet).is_empty(), "packet {i} still carries the IMEI");
    }
    ensure!(changed > 0, "rewrite changed nothing");
    Ok(format!(
        "{} Metricly flows gone, no handle opened; rewrite touched {changed} IMEI octets only",
        metricly.flows
    ))
}

pub fn bench(n: usize) -> Outcome {
    let started = Instant::now();
    let r = run_bench(BenchOptions { n, concurrency: 1, with_plugins: false }).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    ensure!(r.samples.len() == n, "{} samples", r.samples.len());
    ensure!(r.summary.median_us < 1_000.0, "median delta {:.1} us", r.summary.median_us);
    ensure!(secs < 120.0, "bench took {secs:.1} s");
    let cdf = r.cdf();
    ensure!(cdf.len() == n, "cdf has {} points", cdf.len());
    ensure!(cdf.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1), "cdf not monotone");
    Ok(format!("median delta {:.1} us over {n} connects in {secs:.1} s", r.summary.median_us))
}

pub fn determinism() -> Outcome {
    for name in ["run.toml", "run_deny_metricly.toml", "run_rewrite_imei.toml"] {
        let mtu = fixture_config(name).engine.mtu;
        let a = replay_fixture(name);
        let b = replay_fixture(name);
        ensure!(to_json(&a.report) == to_json(&b.report), "{name}: reports differ");
        ensure!(a.pcap_bytes(mtu) == b.pcap_bytes(mtu), "{name}: pcaps differ");
    }
    Ok("3 configs, reports and pcaps byte-identical".into())
}

const PRIMARY: &str = "192.0.2.53:53";
const ALT: &str = "192.0.2.54:53";
const KNOWN: &str = "known.test";
const MISSING: &str = "missing.test";

#[derive(Clone, Copy)]
enum Alt {
    Same,
    Spoof,
    RewriteNx,
    Drop,
    /// Knows a different address for `KNOWN` and also knows `MISSING`.
    Different,
}

#[derive(Clone, Copy)]
enum Primary {
    Normal,
    Drop,
}

/// Independent expectation for one query.
fn expected(primary: Primary, alt: Alt, name: &str) -> Divergence {
    use Divergence::*;
    let known = name == KNOWN;
    match (primary, alt) {
        (Primary::Drop, _) => Timeout,
        (_, Alt::Drop) => Timeout,
        (_, Alt::Same) => None,
        (_, Alt::Spoof) if known => AnswerMismatch,
        (_, Alt::Spoof) => NxdomainRewrite,
        (_, Alt::RewriteNx) if known => None,
        (_, Alt::RewriteNx) => NxdomainRewrite,
        (_, Alt::Different) if known => AnswerMismatch,
        (_, Alt::Different) => NxdomainRewrite,
    }
}

fn resolver(addr: &str, answers: &[(&str, [u8; 4])], tamper: Option<DnsTamper>) -> SimEndpointScript {
    let answers = answers.iter().map(|(n, a)| (n.to_string(), vec![Ipv4Addr::from(*a)])).collect();
    SimEndpointScript::host(addr.parse().unwrap(), Behavior::DnsResponder { answers, delay_us: 3_000, tamper })
}

/// Runs `queries` through an engine; returns the probes and every packet the app saw.
fn whatif_run(primary: Primary, alt: Alt, queries: &[&str], probing: bool) -> (Vec<Divergence>, Vec<(u64, Vec<u8>)>) {
    let table = [(KNOWN, [198, 51, 100, 1])];
    let p = resolver(PRIMARY, &table, matches!(primary, Primary::Drop).then_some(DnsTamper::Drop));
    let a = match alt {
        Alt::Same => resolver(ALT, &table, None),
        Alt::Spoof => resolver(ALT, &table, Some(DnsTamper::Spoof(Ipv4Addr::new(203, 0, 113, 66)))),
        Alt::RewriteNx => resolver(ALT, &table, Some(DnsTamper::RewriteNxdomain(Ipv4Addr::new(203, 0, 113, 66)))),
        Alt::Drop => resolver(ALT, &table, Some(DnsTamper::Drop)),
        Alt::Different => resolver(ALT, &[(KNOWN, [198, 51, 100, 2]), (MISSING, [198, 51, 100, 3])], None),
    };
    let mut host = PluginHost::new(HostPolicy { cpu_metering: CpuMetering::Reported, ..Default::default() });
    let h = probing.then(|| {
        let cfg = WhatIfConfig { alternates: vec![ALT.parse().unwrap()], sample_rate: 1.0, seed: 1, timeout_ms: 500 };
        let d = PluginDescriptor::new("whatif", PermissionSet::OBSERVE | PermissionSet::INJECT_PACKETS);
        host.register(d, Box::new(DnsWhatIf::new(cfg))).unwrap()
    });
    let sim = SimUpstream::new(vec![p, a], 9).unwrap();
    let mut e = Engine::new(EngineConfig::default(), sim, host, 9).unwrap();
    let mut seen = Vec::new();
    let mut t = 0;
    for (i, name) in queries.iter().enumerate() {
        let q = build_query(0x100 + i as u16, name).unwrap();
        e.on_app_packet(Timestamp(t), &app_udp(20_000 + i as u16, PRIMARY.parse().unwrap(), q), "app");
        t += 1_000_000;
        e.run_until(Timestamp(t));
        for em in e.drain_emitted() {
            if em.direction == Direction::NetToApp {
                seen.push((em.at.0, mbz::packet::serialize_packet(&em.packet, 1500).unwrap()));
            }
        }
    }
    e.run_until(Timestamp(t + 5_000_000));
    e.host_mut().finalize(Timestamp(t + 5_000_000));
    let divs = match h {
        Some(h) => e.host().plugin::<DnsWhatIf>(h).unwrap().probes().iter().map(|p| p.divergence).collect(),
        None => Vec::new(),
    };
    (divs, seen)
}

pub fn whatif() -> Outcome {
    let queries = [KNOWN, MISSING, KNOWN, MISSING];
    let mut checked = 0;
    let mut seen_kinds = BTreeSet::new();
    for primary in [Primary::Normal, Primary::Drop] {
        for alt in [Alt::Same, Alt::Spoof, Alt::RewriteNx, Alt::Drop, Alt::Different] {
            let (divs, with) = whatif_run(primary, alt, &queries, true);
            let want: Vec<Divergence> = queries.iter().map(|q| expected(primary, alt, q)).collect();
            ensure!(divs == want, "classified {divs:?}, expected {want:?}");
            checked += divs.len();
            seen_kinds.extend(divs.iter().map(|d| format!("{d:?}")));
            let (_, without) = whatif_run(primary, alt, &queries, false);
            ensure!(with == without, "app-visible DNS traffic changed with probing on");
        }
    }
    ensure!(seen_kinds.len() == 4, "only saw {seen_kinds:?}");

    // the same on the committed trace: app-visible DNS bytes unchanged
    let cfg = fixture_config("run.toml");
    let mut off = cfg.clone();
    off.plugins.retain(|p| !matches!(p.kind, PluginKind::DnsWhatIf(_)));
    let trace = mbz::replay::load_trace(&cfg).map_err(|e| e.to_string())?;
    let scripts = mbz::replay::load_endpoint_scripts(&cfg).map_err(|e| e.to_string())?;
    let on = replay(&cfg, &trace, scripts.clone(), cfg.seed).map_err(|e| e.to_string())?;
    let plain = replay(&off, &trace, scripts, cfg.seed).map_err(|e| e.to_string())?;
    let dns = |o: &mbz::replay::ReplayOutcome| {
        let mut v: Vec<(FlowKey, Vec<u8>)> = o
            .emitted
            .iter()
            .filter(|e| e.direction == Direction::NetToApp && e.packet.src().is_some_and(|s| s.port() == 53))
            .map(|e| (mbz::packet::flow_key_of(&e.packet).unwrap(), mbz::packet::serialize_packet(&e.packet, 1500).unwrap()))
            .collect();
        v.sort();
        v
    };
    let (a, b) = (dns(&on), dns(&plain));
    ensure!(!a.is_empty() && a == b, "trace DNS traffic differs with probing ({} vs {} packets)", a.len(), b.len());
    ensure!(!on.report.whatif.is_empty(), "no probes on the trace");
    Ok(format!("{checked} scripted probes classified correctly; {} trace DNS packets unchanged", a.len()))
}
