//! Passive third-party accounting: who each app talks to, how often, over what.
//!
//! A TCP flow open is one request. UDP requests are bursts on one 5-tuple
//! separated by more than `burst_gap` of silence. DNS traffic itself is not
//! counted; its answers only feed the name cache.

use super::orgmap::{OrgMap, UNKNOWN_ORG};
use super::sniff::{is_quic_long_header, tls_sni, DnsCache};
use crate::io::dns::DNS_PORT;
use crate::io::trace::Direction;
use crate::packet::{FlowKey, Protocol};
use crate::plugin::{EventKind, Plugin, PluginContext, PluginError, Services, TrafficEvent, Verdict};
use crate::time::Timestamp;
use serde::{Deserialize, Serialize};
use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnitchProtocol {
    Tcp,
    Udp,
    /// UDP/443 carrying QUIC long headers.
    Quic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnitchRecord {
    pub app_label: String,
    pub key: FlowKey,
    pub dst_domain: String,
    pub organization: String,
    pub protocol: SnitchProtocol,
    pub request_count: u64,
    pub first_seen: Timestamp,
    pub last_seen: Timestamp,
}

#[derive(Debug, Clone)]
pub struct SnitchConfig {
    pub orgs: OrgMap,
    /// Organizations treated as first party and left out of the report.
    pub first_party: BTreeSet<String>,
    pub burst_gap: Duration,
}

impl Default for SnitchConfig {
    fn default() -> Self {
        SnitchConfig {
            orgs: OrgMap::default(),
            first_party: BTreeSet::new(),
            burst_gap: Duration::from_secs(1),
        }
    }
}

#[derive(Debug)]
pub struct Snitch {
    cfg: SnitchConfig,
    dns: DnsCache,
    records: Vec<SnitchRecord>,
    /// Latest record per live key.
    open: BTreeMap<FlowKey, usize>,
}

impl Snitch {
    pub fn new(cfg: SnitchConfig) -> Self {
        Snitch {
            cfg,
            dns: DnsCache::default(),
            records: Vec::new(),
            open: BTreeMap::new(),
        }
    }

    /// Every record, in creation order.
    pub fn records(&self) -> &[SnitchRecord] {
        &self.records
    }

    fn start(&mut self, ctx: &PluginContext, proto: SnitchProtocol) -> usize {
        let domain = self.dns.lookup(*ctx.key.dst.ip()).unwrap_or_default().to_string();
        let org = self.cfg.orgs.lookup(Some(&domain), *ctx.key.dst.ip()).to_string();
        self.records.push(SnitchRecord {
            app_label: ctx.app_label.clone(),
            key: ctx.key,
            dst_domain: domain,
            organization: org,
            protocol: proto,
            request_count: 1,
            first_seen: ctx.clock,
            last_seen: ctx.clock,
        });
        let idx = self.records.len() - 1;
        self.open.insert(ctx.key, idx);
        idx
    }

    fn learn_sni(&mut self, idx: usize, payload: &[u8]) {
        let r = &mut self.records[idx];
        if !r.dst_domain.is_empty() || r.key.protocol != Protocol::Tcp {
            return;
        }
        if let Some(name) = tls_sni(payload) {
            r.organization = self.cfg.orgs.lookup(Some(&name), *r.key.dst.ip()).to_string();
            r.dst_domain = name;
        }
    }

    pub fn report(&self) -> SnitchReport {
        SnitchReport::build(&self.records, &self.cfg.first_party)
    }
}

impl Plugin for Snitch {
    fn on_event(&mut self, ctx: &PluginContext, ev: &TrafficEvent<'_>, _: &mut Services) -> Result<Verdict, PluginError> {
        if let Some(p) = ev.packet {
            if ctx.direction == Direction::NetToApp {
                self.dns.observe(p);
            }
        }
        if ctx.key.dst.port() == DNS_PORT || ctx.direction != Direction::AppToNet {
            return Ok(Verdict::Pass);
        }
        let key = ctx.key;
        match (key.protocol, ctx.kind) {
            (_, EventKind::FlowClose) => {
                self.open.remove(&key);
            }
            (Protocol::Tcp, EventKind::FlowOpen) => {
                self.start(ctx, SnitchProtocol::Tcp);
            }
            (Protocol::Tcp, EventKind::PacketOut) => {
                if let Some(&i) = self.open.get(&key) {
                    self.records[i].last_seen = ctx.clock;
                    self.learn_sni(i, ev.payload);
                }
            }
            (Protocol::Udp, EventKind::FlowOpen | EventKind::PacketOut) => {
                let quic = key.dst.port() == 443 && is_quic_long_header(ev.payload);
                let i = match self.open.get(&key) {
                    Some(&i) => {
                        let r = &mut self.records[i];
                        if ctx.clock.since(r.last_seen) > self.cfg.burst_gap {
                            r.request_count += 1;
                        }
                        r.last_seen = ctx.clock;
                        i
                    }
                    None => self.start(ctx, SnitchProtocol::Udp),
                };
                if quic {
                    self.records[i].protocol = SnitchProtocol::Quic;
                }
            }
            _ => {}
        }
        Ok(Verdict::Pass)
    }

    fn memory_estimate(&self) -> u64 {
        (self.records.len() * std::mem::size_of::<SnitchRecord>() + self.dns.len() * 48) as u64
    }

    fn reported_cpu_us(&self) -> u64 {
        2
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrgCount {
    pub organization: String,
    pub requests: u64,
    pub flows: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolHistogram {
    pub tcp: u64,
    pub udp: u64,
    pub quic: u64,
}

impl ProtocolHistogram {
    fn add(&mut self, p: SnitchProtocol) {
        match p {
            SnitchProtocol::Tcp => self.tcp += 1,
            SnitchProtocol::Udp => self.udp += 1,
            SnitchProtocol::Quic => self.quic += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tcp + self.udp + self.quic
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AppReport {
    pub app_label: String,
    pub flows: u64,
    pub requests: u64,
    pub protocols: ProtocolHistogram,
    pub orgs: Vec<OrgCount>,
}

/// Third-party traffic summary. Orgs are ordered by request count
/// (descending), then name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SnitchReport {
    pub third_party_flows: u64,
    pub third_party_requests: u64,
    pub protocols: ProtocolHistogram,
    /// Percentages of third-party flows, QUIC counted as UDP.
    pub tcp_share_pct: f64,
    pub udp_share_pct: f64,
    pub organizations: u64,
    pub orgs_over_10_requests: u64,
    pub orgs: Vec<OrgCount>,
    /// (flows per org, number of orgs with that many), ascending.
    pub flows_per_org: Vec<(u64, u64)>,
    pub apps: Vec<AppReport>,
}

fn sorted_orgs(m: BTreeMap<&str, OrgCount>) -> Vec<OrgCount> {
    let mut v: Vec<OrgCount> = m.into_values().collect();
    v.sort_by(|a, b| b.requests.cmp(&a.requests).then_with(|| a.organization.cmp(&b.organization)));
    v
}

fn tally<'a>(m: &mut BTreeMap<&'a str, OrgCount>, r: &'a SnitchRecord) {
    let e = m.entry(r.organization.as_str()).or_insert_with(|| OrgCount {
        organization: r.organization.clone(),
        ..Default::default()
    });
    e.requests += r.request_count;
    e.flows += 1;
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

impl SnitchReport {
    pub fn build(records: &[SnitchRecord], first_party: &BTreeSet<String>) -> SnitchReport {
        let third: Vec<&SnitchRecord> = records.iter().filter(|r| !first_party.contains(&r.organization)).collect();
        let mut rep = SnitchReport::default();
        let mut orgs = BTreeMap::new();
        let mut apps: BTreeMap<&str, (AppReport, BTreeMap<&str, OrgCount>)> = BTreeMap::new();
        for r in &third {
            rep.third_party_flows += 1;
            rep.third_party_requests += r.request_count;
            rep.protocols.add(r.protocol);
            tally(&mut orgs, r);
            let (a, ao) = apps.entry(r.app_label.as_str()).or_insert_with(|| {
                (
                    AppReport {
                        app_label: r.app_label.clone(),
                        ..Default::default()
                    },
                    BTreeMap::new(),
                )
            });
            a.flows += 1;
            a.requests += r.request_count;
            a.protocols.add(r.protocol);
            tally(ao, r);
        }
        if rep.third_party_flows > 0 {
            let n = rep.third_party_flows as f64;
            rep.tcp_share_pct = round1(100.0 * rep.protocols.tcp as f64 / n);
            rep.udp_share_pct = round1(100.0 * (rep.protocols.udp + rep.protocols.quic) as f64 / n);
        }
        rep.orgs = sorted_orgs(orgs);
        rep.organizations = rep.orgs.len() as u64;
        rep.orgs_over_10_requests = rep.orgs.iter().filter(|o| o.requests > 10).count() as u64;
        let mut dist: BTreeMap<u64, u64> = BTreeMap::new();
        for o in &rep.orgs {
            *dist.entry(o.flows).or_default() += 1;
        }
        rep.flows_per_org = dist.into_iter().collect();
        rep.apps = apps
            .into_values()
            .map(|(mut a, ao)| {
                a.orgs = sorted_orgs(ao);
                a
            })
            .collect();
        rep
    }

    /// Requests attributed to one organization.
    pub fn requests_for(&self, org: &str) -> u64 {
        self.orgs.iter().find(|o| o.organization == org).map_or(0, |o| o.requests)
    }

    pub fn unknown_requests(&self) -> u64 {
        self.requests_for(UNKNOWN_ORG)
    }
}
