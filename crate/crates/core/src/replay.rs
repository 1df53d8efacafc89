//! Trace replay on a virtual clock against simulated endpoints.

use crate::config::{PluginKind, RunConfig};
use crate::engine::{Emitted, Engine};
use crate::io::pcap::{read_pcap, write_pcap_to, PcapError};
use crate::io::sim::{load_scripts, SimEndpointScript, SimError, SimUpstream};
use crate::io::trace::{read_trace_file, Direction, TraceError, TraceEvent};
use crate::packet::serialize_packet;
use crate::plugin::{Plugin, PluginHandle, PluginHost};
use crate::plugins::advisor::ProtocolAdvisor;
use crate::plugins::firewall::{Firewall, FirewallError};
use crate::plugins::orgmap::{OrgMap, OrgMapError};
use crate::plugins::snitch::{Snitch, SnitchConfig};
use crate::plugins::whatif::DnsWhatIf;
use crate::report::{FirewallSummary, PluginSummary, RunReport, TraceSummary, REPORT_VERSION};
use crate::time::Timestamp;
use std::path::{Path, PathBuf};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("rules {path}: {source}")]
    Rules { path: PathBuf, source: FirewallError },
    #[error("org map {path}: {source}")]
    OrgMap { path: PathBuf, source: OrgMapError },
    #[error(transparent)]
    Scripts(#[from] SimError),
    #[error("engine: {0}")]
    Engine(#[from] crate::engine::ConfigError),
    #[error("plugin: {0}")]
    Host(#[from] crate::plugin::HostError),
    #[error("config has no [io] trace or pcap")]
    NoInput,
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ReplayError {
    /// Problems with what the operator asked for, as opposed to I/O trouble.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            ReplayError::Config(_)
                | ReplayError::Rules { .. }
                | ReplayError::OrgMap { .. }
                | ReplayError::Scripts(SimError::OverlappingScripts(..) | SimError::Parse { .. })
                | ReplayError::Engine(_)
                | ReplayError::Host(_)
                | ReplayError::NoInput
        )
    }
}

/// Builds each configured plugin and registers it in config order.
pub fn build_host(cfg: &RunConfig) -> Result<(PluginHost, Vec<PluginHandle>), ReplayError> {
    let mut host = PluginHost::new(cfg.host_policy());
    host.update_context(cfg.device_context());
    let mut handles = Vec::new();
    for entry in &cfg.plugins {
        let plugin: Box<dyn Plugin> = match &entry.kind {
            PluginKind::Snitch { org_map, first_party, burst_gap_ms } => {
                let orgs = match org_map {
                    Some(p) => OrgMap::load(p).map_err(|source| ReplayError::OrgMap { path: p.clone(), source })?,
                    None => OrgMap::default(),
                };
                Box::new(Snitch::new(SnitchConfig {
                    orgs,
                    first_party: first_party.clone(),
                    burst_gap: Duration::from_millis(*burst_gap_ms),
                }))
            }
            PluginKind::Firewall { rules } => {
                Box::new(Firewall::load(rules).map_err(|source| ReplayError::Rules { path: rules.clone(), source })?)
            }
            PluginKind::DnsWhatIf(c) => Box::new(DnsWhatIf::new(c.clone())),
            PluginKind::ProtocolAdvisor(c) => Box::new(ProtocolAdvisor::new(*c)),
        };
        handles.push(host.register(entry.descriptor.clone(), plugin)?);
    }
    Ok((host, handles))
}

pub fn load_trace(cfg: &RunConfig) -> Result<Vec<TraceEvent>, ReplayError> {
    if let Some(p) = &cfg.io.trace {
        return Ok(read_trace_file(p)?);
    }
    if let Some(p) = &cfg.io.pcap {
        let mut events = read_pcap(p)?;
        for e in &mut events {
            e.app_label = cfg.io.pcap_app_label.clone();
        }
        return Ok(events);
    }
    Err(ReplayError::NoInput)
}

pub fn load_endpoint_scripts(cfg: &RunConfig) -> Result<Vec<SimEndpointScript>, ReplayError> {
    Ok(match &cfg.io.scripts {
        Some(p) => load_scripts(p)?,
        None => Vec::new(),
    })
}

pub struct ReplayOutcome {
    pub report: RunReport,
    /// Everything the engine produced, in order.
    pub emitted: Vec<Emitted>,
    pub upstream: SimUpstream,
}

impl ReplayOutcome {
    /// Emitted packets as a raw-IP pcap.
    pub fn pcap_bytes(&self, mtu: usize) -> Vec<u8> {
        let packets: Vec<(Timestamp, Vec<u8>)> = self
            .emitted
            .iter()
            .filter_map(|e| serialize_packet(&e.packet, mtu).ok().map(|b| (e.at, b)))
            .collect();
        let mut out = Vec::new();
        write_pcap_to(&mut out, packets.iter().map(|(t, b)| (*t, b.as_slice()))).expect("in-memory write");
        out
    }
}

/// Drives the app-to-network half of `trace` through an engine, then lets
/// timers run until every flow has closed or timed out.
pub fn replay(
    cfg: &RunConfig,
    trace: &[TraceEvent],
    scripts: Vec<SimEndpointScript>,
    seed: u64,
) -> Result<ReplayOutcome, ReplayError> {
    crate::io::trace::validate_order(trace)?;
    let (host, handles) = build_host(cfg)?;
    let upstream = SimUpstream::new(scripts, seed)?;
    let mut engine = Engine::new(cfg.engine.clone(), upstream, host, seed)?;
    let mut emitted = Vec::new();

    let mut summary = TraceSummary {
        events: trace.len() as u64,
        first_us: trace.first().map_or(0, |e| e.timestamp.0),
        last_us: trace.last().map_or(0, |e| e.timestamp.0),
        ..Default::default()
    };
    for ev in trace.iter().filter(|e| e.direction == Direction::AppToNet) {
        summary.app_to_net += 1;
        engine.run_until(ev.timestamp);
        engine.on_app_bytes(ev.timestamp, &ev.packet, &ev.app_label);
        emitted.extend(engine.drain_emitted());
    }

    let c = engine.config();
    let idle = c.udp_timeout.max(c.tcp_linger) + 2 * c.sweep_interval;
    let horizon = Timestamp(summary.last_us) + Duration::from_secs(idle);
    let mut end = Timestamp(summary.last_us);
    while let Some(t) = engine.next_deadline() {
        if t > horizon {
            break;
        }
        engine.run_until(t);
        end = t;
        emitted.extend(engine.drain_emitted());
    }
    engine.host_mut().finalize(end);
    emitted.extend(engine.drain_emitted());
    summary.end_us = end.0;

    let (upstream, host, counters) = engine.into_parts();
    let report = build_report(cfg, seed, summary, counters, &host, &handles, upstream.handles_opened());
    Ok(ReplayOutcome { report, emitted, upstream })
}

pub(crate) fn build_report(
    cfg: &RunConfig,
    seed: u64,
    trace: TraceSummary,
    engine: crate::engine::EngineCounters,
    host: &PluginHost,
    handles: &[PluginHandle],
    upstream_handles_opened: u64,
) -> RunReport {
    let mut r = RunReport {
        version: REPORT_VERSION,
        seed,
        trace,
        engine,
        upstream_handles_opened,
        violations: host.violations().iter().map(|v| v.to_log()).collect(),
        governor: host.governor_events().iter().map(|g| g.to_log()).collect(),
        ..Default::default()
    };
    for (entry, &h) in cfg.plugins.iter().zip(handles) {
        let d = host.descriptor(h);
        r.plugins.push(PluginSummary {
            id: d.id.clone(),
            kind: entry.kind.name().to_string(),
            permissions: d.requested.names().into_iter().map(String::from).collect(),
            enabled: host.is_enabled(h),
            disable_reason: host.disable_reason(h),
            invocations: host.invocations(h),
            exported_bytes: host.exported_bytes().get(&d.id).copied().unwrap_or(0),
        });
        match &entry.kind {
            PluginKind::Snitch { .. } => {
                if let (None, Some(s)) = (&r.snitch, host.plugin::<Snitch>(h)) {
                    r.snitch = Some(s.report());
                }
            }
            PluginKind::Firewall { .. } => {
                if let (None, Some(f)) = (&r.firewall, host.plugin::<Firewall>(h)) {
                    r.firewall = Some(FirewallSummary { id: d.id.clone(), rule_hits: f.hits().to_vec() });
                }
            }
            PluginKind::DnsWhatIf(_) => {
                if let Some(w) = host.plugin::<DnsWhatIf>(h) {
                    r.whatif.extend(w.probes().iter().cloned());
                }
            }
            PluginKind::ProtocolAdvisor(_) => {
                if let Some(a) = host.plugin::<ProtocolAdvisor>(h) {
                    r.advisor.extend(a.advice());
                }
            }
        }
    }
    r
}

/// Loads inputs named by the config and replays them.
pub fn replay_config(cfg: &RunConfig, seed: Option<u64>) -> Result<ReplayOutcome, ReplayError> {
    let trace = load_trace(cfg)?;
    let scripts = load_endpoint_scripts(cfg)?;
    replay(cfg, &trace, scripts, seed.unwrap_or(cfg.seed))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ReplayError> {
    std::fs::write(path, bytes).map_err(|source| ReplayError::Io { path: path.to_path_buf(), source })
}
