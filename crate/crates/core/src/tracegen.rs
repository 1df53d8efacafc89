//! Synthetic app traces with a planned third-party footprint.
//!
//! [`SnitchScenario::default`] describes one chat app that talks to its own
//! backend, five heavy third parties and forty one-off ones. Each flow is
//! turned into the packets an app would write: a DNS lookup before first use
//! of a name, a TCP handshake, one request, a close, or a short UDP burst.
//! TCP acknowledgements assume the engine's initial sequence number is
//! [`ENGINE_ISN`] and that endpoints echo what they receive.

use crate::io::dns;
use crate::io::sim::{Behavior, DnsTamper, ScriptFile, SimEndpointScript};
use crate::io::trace::{Direction, TraceEvent};
use crate::packet::{serialize_packet, Packet, TcpFlags, TcpHeader};
use crate::plugins::sniff::{client_hello, quic_initial};
use crate::time::Timestamp;
use ipnet::Ipv4Net;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::net::{Ipv4Addr, SocketAddrV4};

pub const ENGINE_ISN: u32 = 5000;
pub const APP_ADDR: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);
pub const RESOLVER: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::new(192, 0, 2, 53), 53);
pub const ALT_RESOLVER: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::new(192, 0, 2, 54), 53);
/// Address the alternate resolver hands out for names that do not exist.
pub const NX_REWRITE_ADDR: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 66);
/// Test IMEI carried in plaintext by some requests.
pub const IMEI: &str = "356938035643809";
const MTU: usize = 1500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowShape {
    /// TLS ClientHello to port 443.
    Tls,
    /// Plaintext HTTP to port 80, carrying the IMEI.
    HttpImei,
    /// QUIC long-header burst to UDP 443.
    Quic,
    /// Plain UDP burst to port 3478.
    Udp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrgPlan {
    pub name: String,
    pub domain: String,
    pub addr: Ipv4Addr,
    /// How the org map recognises it.
    pub by_cidr: bool,
    /// Reached without a DNS lookup; TCP flows are then named by SNI.
    pub skip_dns: bool,
    pub flows: Vec<FlowShape>,
    /// Indices into `flows` whose request segment is sent twice.
    pub duplicated: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnitchScenario {
    pub app: String,
    pub first_party: OrgPlan,
    pub third_parties: Vec<OrgPlan>,
    /// Looked up but never answered with an address by the primary resolver.
    pub missing_name: String,
    pub seed: u64,
    pub flow_spacing_us: u64,
}

fn shapes(spec: &[(FlowShape, usize)]) -> Vec<FlowShape> {
    spec.iter().flat_map(|(s, n)| std::iter::repeat_n(*s, *n)).collect()
}

fn org(name: &str, domain: &str, addr: Ipv4Addr, flows: Vec<FlowShape>) -> OrgPlan {
    OrgPlan {
        name: name.into(),
        domain: domain.into(),
        addr,
        by_cidr: false,
        skip_dns: false,
        flows,
        duplicated: BTreeSet::new(),
    }
}

impl Default for SnitchScenario {
    fn default() -> Self {
        use FlowShape::*;
        let a = |n: u8| Ipv4Addr::new(198, 18, 0, n);
        let mut heavy = vec![
            org("Metricly", "sdk.metricly.test", a(10), shapes(&[(Tls, 110), (Quic, 10)])),
            org("AdVantage", "ads.advantage.test", a(11), shapes(&[(Tls, 80), (Quic, 10)])),
            org("Crashbeam", "reports.crashbeam.test", a(12), shapes(&[(Tls, 55), (Udp, 5)])),
            org("Pixelpost", "px.pixelpost.test", a(13), shapes(&[(Tls, 37), (Quic, 3)])),
            org("Tagwell", "collect.tagwell.test", a(14), shapes(&[(HttpImei, 21), (Udp, 1)])),
        ];
        // Crashbeam's path retransmits 3 of its 55 requests.
        heavy[2].duplicated = [4, 20, 41].into_iter().collect();
        let mut singles = Vec::new();
        for i in 1..=40u8 {
            let name = format!("Vendor {i:02}");
            let domain = format!("api.vendor{i:02}.test");
            let shape = if i > 38 { Udp } else { Tls };
            let mut o = org(&name, &domain, Ipv4Addr::new(198, 18, 1, i), vec![shape]);
            // a few are only recognisable by SNI, the UDP ones by address
            o.skip_dns = (31..=38).contains(&i) || i > 38;
            o.by_cidr = i > 38;
            singles.push(o);
        }
        heavy.extend(singles);
        SnitchScenario {
            app: "examplechat".into(),
            first_party: org("ExampleChat", "api.examplechat.test", a(2), shapes(&[(Tls, 30)])),
            third_parties: heavy,
            missing_name: "beacon.gone.test".into(),
            seed: 372,
            flow_spacing_us: 400_000,
        }
    }
}

pub struct Generated {
    pub trace: Vec<TraceEvent>,
    /// `pattern,organization` CSV.
    pub org_map_csv: String,
    /// Simulated endpoint scripts (TOML).
    pub endpoints_toml: String,
}

struct Builder {
    app: String,
    events: Vec<(u64, u64, Vec<u8>)>,
    order: u64,
    next_port: u16,
    next_dns_id: u16,
}

impl Builder {
    fn push(&mut self, at: u64, p: Packet) {
        self.order += 1;
        let bytes = serialize_packet(&p, MTU).expect("generated packets fit");
        self.events.push((at, self.order, bytes));
    }

    fn port(&mut self) -> u16 {
        self.next_port += 1;
        self.next_port
    }

    fn lookup(&mut self, at: u64, name: &str) {
        let src = SocketAddrV4::new(APP_ADDR, self.port());
        self.next_dns_id = self.next_dns_id.wrapping_add(1);
        let q = dns::build_query(self.next_dns_id, name).expect("valid name");
        self.push(at, Packet::udp(src, RESOLVER, q));
    }

    fn tcp(&mut self, at: u64, dst: SocketAddrV4, isn: u32, payload: Vec<u8>, duplicate: bool) {
        let src = SocketAddrV4::new(APP_ADDR, self.port());
        let seg = |seq: u32, ack: u32, flags: TcpFlags, data: Vec<u8>| {
            let mut h = TcpHeader::new(src.port(), dst.port(), seq, ack, flags);
            h.window = 65535;
            Packet::tcp(src, dst, h, data)
        };
        let mut syn = seg(isn, 0, TcpFlags::SYN, vec![]);
        if let crate::packet::Transport::Tcp(h) = &mut syn.transport {
            h.options = TcpHeader::mss_option(1460);
        }
        let len = payload.len() as u32;
        let a0 = ENGINE_ISN.wrapping_add(1);
        self.push(at, syn);
        self.push(at + 30_000, seg(isn + 1, a0, TcpFlags::ACK, vec![]));
        self.push(at + 31_000, seg(isn + 1, a0, TcpFlags::PSH | TcpFlags::ACK, payload.clone()));
        if duplicate {
            self.push(at + 150_000, seg(isn + 1, a0, TcpFlags::PSH | TcpFlags::ACK, payload));
        }
        self.push(at + 250_000, seg(isn + 1 + len, a0 + len, TcpFlags::FIN | TcpFlags::ACK, vec![]));
        self.push(at + 350_000, seg(isn + 2 + len, a0 + len + 1, TcpFlags::ACK, vec![]));
    }

    fn udp(&mut self, at: u64, dst: SocketAddrV4, payload: Vec<u8>, count: u64) {
        let src = SocketAddrV4::new(APP_ADDR, self.port());
        for k in 0..count {
            self.push(at + k * 20_000, Packet::udp(src, dst, payload.clone()));
        }
    }
}

fn request(shape: FlowShape, domain: &str, n: usize) -> Vec<u8> {
    match shape {
        FlowShape::Tls => client_hello(domain),
        FlowShape::HttpImei => format!(
            "POST /v1/collect HTTP/1.1\r\nHost: {domain}\r\nContent-Type: application/x-www-form-urlencoded\r\n\r\nseq={n}&imei={IMEI}&model=phone\r\n"
        )
        .into_bytes(),
        FlowShape::Quic => quic_initial(1200),
        FlowShape::Udp => format!("ping {n}").into_bytes(),
    }
}

impl SnitchScenario {
    pub fn third_party_flows(&self) -> usize {
        self.third_parties.iter().map(|o| o.flows.len()).sum()
    }

    pub fn generate(&self) -> Generated {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut plan: Vec<(&OrgPlan, usize)> = std::iter::once(&self.first_party)
            .chain(&self.third_parties)
            .flat_map(|o| (0..o.flows.len()).map(move |i| (o, i)))
            .collect();
        plan.shuffle(&mut rng);

        let mut b = Builder { app: self.app.clone(), events: Vec::new(), order: 0, next_port: 40000, next_dns_id: 0 };
        let mut resolved = BTreeSet::new();
        let mut t = 1_000_000u64;
        for (n, (o, i)) in plan.iter().enumerate() {
            if !o.skip_dns && resolved.insert(o.domain.clone()) {
                b.lookup(t, &o.domain);
                t += 100_000;
            }
            if n == plan.len() / 2 {
                b.lookup(t, &self.missing_name);
                t += 100_000;
            }
            let shape = o.flows[*i];
            let payload = request(shape, &o.domain, n);
            match shape {
                FlowShape::Tls => b.tcp(t, SocketAddrV4::new(o.addr, 443), 1_000_000 + n as u32 * 1000, payload, o.duplicated.contains(i)),
                FlowShape::HttpImei => b.tcp(t, SocketAddrV4::new(o.addr, 80), 1_000_000 + n as u32 * 1000, payload, false),
                FlowShape::Quic => b.udp(t, SocketAddrV4::new(o.addr, 443), payload, 3),
                FlowShape::Udp => b.udp(t, SocketAddrV4::new(o.addr, 3478), payload, 2),
            }
            t += self.flow_spacing_us;
        }
        b.events.sort_by_key(|(at, order, _)| (*at, *order));
        let trace = b
            .events
            .into_iter()
            .map(|(at, _, packet)| TraceEvent {
                timestamp: Timestamp(at),
                direction: Direction::AppToNet,
                app_label: b.app.clone(),
                packet,
            })
            .collect();
        Generated { trace, org_map_csv: self.org_map_csv(), endpoints_toml: self.endpoints_toml() }
    }

    fn org_map_csv(&self) -> String {
        let mut s = String::from("pattern,organization\n");
        for o in std::iter::once(&self.first_party).chain(&self.third_parties) {
            if o.by_cidr {
                s.push_str(&format!("{}/32,{}\n", o.addr, o.name));
            } else {
                // registrable part: the last two labels
                let labels: Vec<&str> = o.domain.rsplitn(3, '.').collect();
                s.push_str(&format!(".{}.{},{}\n", labels[1], labels[0], o.name));
            }
        }
        s
    }

    fn endpoints_toml(&self) -> String {
        let answers: BTreeMap<String, Vec<Ipv4Addr>> = std::iter::once(&self.first_party)
            .chain(&self.third_parties)
            .filter(|o| !o.by_cidr)
            .map(|o| (o.domain.clone(), vec![o.addr]))
            .collect();
        let dns_at = |addr: SocketAddrV4, tamper| {
            let mut s = SimEndpointScript::host(addr, Behavior::DnsResponder { answers: answers.clone(), delay_us: 5_000, tamper });
            s.jitter_us = 2_000;
            s
        };
        let mut servers = SimEndpointScript::new(Ipv4Net::new(Ipv4Addr::new(198, 18, 0, 0), 15).expect("valid prefix"), None, Behavior::Echo);
        servers.connect_delay_us = 10_000;
        servers.jitter_us = 5_000;
        let file = ScriptFile {
            endpoint: vec![
                dns_at(RESOLVER, None),
                dns_at(ALT_RESOLVER, Some(DnsTamper::RewriteNxdomain(NX_REWRITE_ADDR))),
                servers,
            ],
        };
        toml::to_string(&file).expect("scripts serialize")
    }
}
