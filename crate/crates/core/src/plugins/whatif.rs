//! DNS what-if: replays a sample of the app's DNS queries against other
//! resolvers and records where the answers disagree.
//!
//! The original traffic is never touched; every verdict is Pass.

use crate::io::dns::{self, DnsAnswer, DnsRcode, DNS_PORT};
use crate::io::trace::Direction;
use crate::packet::{FlowKey, Protocol};
use crate::plugin::{
    EventKind, Plugin, PluginContext, PluginError, ProbeId, ProbeOutcome, Services, TrafficEvent, Verdict,
};
use crate::time::Timestamp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WhatIfConfig {
    pub alternates: Vec<SocketAddrV4>,
    /// Fraction of queries probed, 0 to 1.
    pub sample_rate: f64,
    pub seed: u64,
    /// How long to wait for any resolver, in milliseconds.
    pub timeout_ms: u64,
}

impl Default for WhatIfConfig {
    fn default() -> Self {
        WhatIfConfig {
            alternates: Vec::new(),
            sample_rate: 0.05,
            seed: 0,
            timeout_ms: 2000,
        }
    }
}

/// What one resolver said.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Addrs(BTreeSet<Ipv4Addr>),
    NxDomain,
    Error(u8),
    Timeout,
}

impl Resolution {
    pub fn from_answer(a: &DnsAnswer) -> Self {
        match a.rcode {
            DnsRcode::NoError => Resolution::Addrs(a.addrs.iter().copied().collect()),
            DnsRcode::NxDomain => Resolution::NxDomain,
            DnsRcode::Other(c) => Resolution::Error(c),
        }
    }

    fn has_addrs(&self) -> bool {
        matches!(self, Resolution::Addrs(a) if !a.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    None,
    AnswerMismatch,
    NxdomainRewrite,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolverResult {
    pub resolver: SocketAddrV4,
    pub rtt_us: Option<u64>,
    pub resolution: Resolution,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhatIfProbe {
    pub at_us: u64,
    pub app: String,
    pub name: String,
    pub qtype: u16,
    pub original: ResolverResult,
    pub alternates: Vec<ResolverResult>,
    pub divergence: Divergence,
}

/// Compares the original resolution with the alternates.
///
/// An original timeout wins; then an NXDOMAIN on one side against addresses
/// on the other; then any other disagreement; then an alternate timeout.
pub fn classify(original: &Resolution, alternates: &[Resolution]) -> Divergence {
    if *original == Resolution::Timeout {
        return Divergence::Timeout;
    }
    let answered: Vec<&Resolution> = alternates.iter().filter(|r| **r != Resolution::Timeout).collect();
    let nx_flip = |a: &Resolution, b: &Resolution| *a == Resolution::NxDomain && b.has_addrs();
    if answered.iter().any(|r| nx_flip(original, r) || nx_flip(r, original)) {
        return Divergence::NxdomainRewrite;
    }
    if answered.iter().any(|r| *r != original) {
        return Divergence::AnswerMismatch;
    }
    if answered.len() < alternates.len() {
        return Divergence::Timeout;
    }
    Divergence::None
}

#[derive(Debug)]
struct Pending {
    at: Timestamp,
    app: String,
    name: String,
    qtype: u16,
    resolver: SocketAddrV4,
    original: Option<(Option<u64>, Resolution)>,
    alternates: Vec<Option<(Option<u64>, Resolution)>>,
}

impl Pending {
    fn done(&self) -> bool {
        self.original.is_some() && self.alternates.iter().all(Option::is_some)
    }
}

#[derive(Debug)]
pub struct DnsWhatIf {
    cfg: WhatIfConfig,
    rng: ChaCha8Rng,
    seq: u64,
    pending: BTreeMap<u64, Pending>,
    by_query: BTreeMap<(FlowKey, u16), u64>,
    by_probe: BTreeMap<ProbeId, (u64, usize)>,
    /// Wakeups per probe; `true` marks the final one.
    deadlines: BTreeMap<(Timestamp, u64), bool>,
    done: Vec<WhatIfProbe>,
    seen_queries: u64,
    skipped_throttled: u64,
}

impl DnsWhatIf {
    pub fn new(cfg: WhatIfConfig) -> Self {
        DnsWhatIf {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            seq: 0,
            pending: BTreeMap::new(),
            by_query: BTreeMap::new(),
            by_probe: BTreeMap::new(),
            deadlines: BTreeMap::new(),
            done: Vec::new(),
            seen_queries: 0,
            skipped_throttled: 0,
        }
    }

    /// Finished probes in completion order.
    pub fn probes(&self) -> &[WhatIfProbe] {
        &self.done
    }

    pub fn seen_queries(&self) -> u64 {
        self.seen_queries
    }

    pub fn skipped_throttled(&self) -> u64 {
        self.skipped_throttled
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.cfg.timeout_ms)
    }

    fn on_query(&mut self, ctx: &PluginContext, payload: &[u8], services: &mut Services) {
        let Some(q) = dns::parse_query(payload) else { return };
        self.seen_queries += 1;
        if ctx.throttle {
            self.skipped_throttled += 1;
            return;
        }
        if self.cfg.alternates.is_empty() || !self.rng.gen_bool(self.cfg.sample_rate.clamp(0.0, 1.0)) {
            return;
        }
        let now = services.now();
        let id = self.seq;
        self.seq += 1;
        for (i, alt) in self.cfg.alternates.iter().enumerate() {
            let probe = services.probe(*alt, payload.to_vec(), self.timeout());
            self.by_probe.insert(probe, (id, i));
        }
        let deadline = now + self.timeout();
        services.wake_at(deadline);
        self.deadlines.insert((deadline, id), false);
        self.by_query.insert((ctx.key, q.id), id);
        self.pending.insert(
            id,
            Pending {
                at: now,
                app: ctx.app_label.clone(),
                name: q.name,
                qtype: q.qtype,
                resolver: ctx.key.dst,
                original: None,
                alternates: vec![None; self.cfg.alternates.len()],
            },
        );
    }

    fn on_answer(&mut self, key: FlowKey, payload: &[u8], now: Timestamp) {
        let Some(a) = dns::parse_response(payload) else { return };
        let Some(id) = self.by_query.remove(&(key, a.id)) else { return };
        if let Some(p) = self.pending.get_mut(&id) {
            if p.original.is_none() {
                p.original = Some((Some(now.since(p.at).as_micros() as u64), Resolution::from_answer(&a)));
            }
        }
        self.maybe_finish(id);
    }

    fn maybe_finish(&mut self, id: u64) {
        if !self.pending.get(&id).is_some_and(Pending::done) {
            return;
        }
        let p = self.pending.remove(&id).unwrap();
        self.by_query.retain(|_, v| *v != id);
        self.deadlines.retain(|(_, v), _| *v != id);
        let (rtt_us, resolution) = p.original.unwrap();
        let alternates: Vec<ResolverResult> = p
            .alternates
            .into_iter()
            .zip(&self.cfg.alternates)
            .map(|(r, resolver)| {
                let (rtt_us, resolution) = r.unwrap();
                ResolverResult { resolver: *resolver, rtt_us, resolution }
            })
            .collect();
        let alt_res: Vec<Resolution> = alternates.iter().map(|r| r.resolution.clone()).collect();
        self.done.push(WhatIfProbe {
            at_us: p.at.as_micros(),
            app: p.app,
            name: p.name,
            qtype: p.qtype,
            divergence: classify(&resolution, &alt_res),
            original: ResolverResult { resolver: p.resolver, rtt_us, resolution },
            alternates,
        });
    }
}

fn is_dns(key: &FlowKey) -> bool {
    key.protocol == Protocol::Udp && key.dst.port() == DNS_PORT
}

impl Plugin for DnsWhatIf {
    fn on_event(&mut self, ctx: &PluginContext, ev: &TrafficEvent<'_>, services: &mut Services) -> Result<Verdict, PluginError> {
        if !is_dns(&ctx.key) {
            return Ok(Verdict::Pass);
        }
        match (ctx.direction, ctx.kind) {
            (Direction::AppToNet, EventKind::FlowOpen | EventKind::PacketOut) => self.on_query(ctx, ev.payload, services),
            (Direction::NetToApp, EventKind::PacketIn) => self.on_answer(ctx.key, ev.payload, services.now()),
            _ => {}
        }
        Ok(Verdict::Pass)
    }

    fn on_probe_result(&mut self, now: Timestamp, probe: ProbeId, outcome: ProbeOutcome, _: &mut Services) {
        let Some((id, i)) = self.by_probe.remove(&probe) else { return };
        let Some(p) = self.pending.get_mut(&id) else { return };
        let r = match outcome {
            ProbeOutcome::Response { payload, .. } => match dns::parse_response(&payload) {
                Some(a) => (Some(now.since(p.at).as_micros() as u64), Resolution::from_answer(&a)),
                None => (Some(now.since(p.at).as_micros() as u64), Resolution::Error(u8::MAX)),
            },
            ProbeOutcome::Timeout | ProbeOutcome::Failed => (None, Resolution::Timeout),
        };
        p.alternates[i] = Some(r);
        self.maybe_finish(id);
    }

    fn on_wakeup(&mut self, now: Timestamp, services: &mut Services) {
        let due: Vec<((Timestamp, u64), bool)> =
            self.deadlines.range(..=(now, u64::MAX)).map(|(k, v)| (*k, *v)).collect();
        for (k, hard) in due {
            self.deadlines.remove(&k);
            let id = k.1;
            let Some(p) = self.pending.get_mut(&id) else { continue };
            if p.original.is_none() {
                p.original = Some((None, Resolution::Timeout));
            }
            if hard {
                for a in p.alternates.iter_mut().filter(|a| a.is_none()) {
                    *a = Some((None, Resolution::Timeout));
                }
            } else if !p.done() {
                // Probe timeouts normally come from the host; this covers probes it never issued.
                let at = now + Duration::from_secs(1);
                services.wake_at(at);
                self.deadlines.insert((at, id), true);
            }
            self.maybe_finish(id);
        }
    }

    fn finalize(&mut self, _now: Timestamp) {
        let ids: Vec<u64> = self.pending.keys().copied().collect();
        for id in ids {
            if let Some(p) = self.pending.get_mut(&id) {
                if p.original.is_none() {
                    p.original = Some((None, Resolution::Timeout));
                }
                for a in p.alternates.iter_mut().filter(|a| a.is_none()) {
                    *a = Some((None, Resolution::Timeout));
                }
            }
            self.maybe_finish(id);
        }
    }

    fn memory_estimate(&self) -> u64 {
        (self.pending.len() * 256 + self.done.len() * 192) as u64
    }

    fn reported_cpu_us(&self) -> u64 {
        4
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
