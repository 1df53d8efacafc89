//! First-match firewall over app, destination, port and protocol.
//!
//! Rules file (TOML):
//!
//! ```toml
//! default = "allow"
//!
//! [[rule]]
//! app = "mail*"
//! dst_except = ["imap.example.com", "smtp.example.com"]
//! action = { deny = "reset" }
//!
//! [[rule]]
//! app = "bank*"
//! protocol = "tcp"
//! ports_except = [443]
//! action = { deny = "inject_notice" }
//!
//! [[rule]]
//! action = { rewrite = { pattern = "356938035643809", replacement = "000000000000000" } }
//! ```
//!
//! Destinations are domain suffixes (matched against names learned from DNS
//! answers), CIDR blocks or plain addresses. Omitted match fields match
//! anything.

use super::orgmap::OrgPattern;
use super::sniff::DnsCache;
use crate::io::trace::Direction;
use crate::packet::{FlowKey, Protocol};
use crate::plugin::{BlockMode, EventKind, Plugin, PluginContext, PluginError, Services, TrafficEvent, Verdict};
use globset::{Glob, GlobMatcher};
use serde::{Deserialize, Serialize};
use std::any::Any;
use std::collections::BTreeMap;
use std::net::SocketAddrV4;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyMode {
    Silent,
    Reset,
    InjectNotice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteSpec {
    pub pattern: String,
    pub replacement: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleAction {
    Allow,
    Deny(DenyMode),
    Switch(SocketAddrV4),
    Rewrite(RewriteSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMatch {
    Tcp,
    Udp,
    #[default]
    Any,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    #[serde(default)]
    pub app: Option<String>,
    #[serde(default)]
    pub dst: Option<Vec<String>>,
    #[serde(default)]
    pub dst_except: Vec<String>,
    #[serde(default)]
    pub ports: Option<Vec<u16>>,
    #[serde(default)]
    pub ports_except: Vec<u16>,
    #[serde(default)]
    pub protocol: ProtocolMatch,
    pub action: RuleAction,
    /// Text shown to the app when this rule injects a notice.
    #[serde(default)]
    pub notice: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulesFile {
    #[serde(default = "allow")]
    pub default: RuleAction,
    #[serde(default)]
    pub rule: Vec<RuleSpec>,
}

fn allow() -> RuleAction {
    RuleAction::Allow
}

#[derive(Debug, Error)]
pub enum FirewallError {
    #[error("rule {index}: bad app glob: {source}")]
    Glob { index: usize, source: globset::Error },
    #[error("rule {index}: `{value}` is not a domain, address or CIDR block")]
    BadDestination { index: usize, value: String },
    #[error("rule {index}: rewrite pattern and replacement must be the same non-zero length")]
    RewriteLength { index: usize },
    #[error("default action must be allow or deny")]
    BadDefault,
    #[error("rules file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct Rule {
    app: Option<GlobMatcher>,
    dst: Option<Vec<OrgPattern>>,
    dst_except: Vec<OrgPattern>,
    ports: Option<Vec<u16>>,
    ports_except: Vec<u16>,
    protocol: ProtocolMatch,
    action: RuleAction,
    notice: Option<String>,
}

fn dst_pattern(index: usize, s: &str) -> Result<OrgPattern, FirewallError> {
    let bad = || FirewallError::BadDestination { index, value: s.to_string() };
    if s.contains('/') || s.parse::<std::net::Ipv4Addr>().is_ok() {
        return OrgPattern::parse(s).ok_or_else(bad);
    }
    let name = s.trim_start_matches('.');
    if name.is_empty() || name.contains(char::is_whitespace) {
        return Err(bad());
    }
    Ok(OrgPattern::Suffix(name.to_ascii_lowercase()))
}

impl Rule {
    pub fn compile(index: usize, spec: &RuleSpec) -> Result<Rule, FirewallError> {
        let app = spec
            .app
            .as_deref()
            .map(|g| Glob::new(g).map(|g| g.compile_matcher()))
            .transpose()
            .map_err(|source| FirewallError::Glob { index, source })?;
        let dst = spec
            .dst
            .as_ref()
            .map(|v| v.iter().map(|s| dst_pattern(index, s)).collect::<Result<Vec<_>, _>>())
            .transpose()?;
        let dst_except = spec.dst_except.iter().map(|s| dst_pattern(index, s)).collect::<Result<_, _>>()?;
        if let RuleAction::Rewrite(r) = &spec.action {
            if r.pattern.is_empty() || r.pattern.len() != r.replacement.len() {
                return Err(FirewallError::RewriteLength { index });
            }
        }
        Ok(Rule {
            app,
            dst,
            dst_except,
            ports: spec.ports.clone(),
            ports_except: spec.ports_except.clone(),
            protocol: spec.protocol,
            action: spec.action.clone(),
            notice: spec.notice.clone(),
        })
    }

    fn matches(&self, app: &str, key: &FlowKey, domain: Option<&str>) -> bool {
        let ip = *key.dst.ip();
        let port = key.dst.port();
        self.app.as_ref().is_none_or(|g| g.is_match(app))
            && match self.protocol {
                ProtocolMatch::Any => true,
                ProtocolMatch::Tcp => key.protocol == Protocol::Tcp,
                ProtocolMatch::Udp => key.protocol == Protocol::Udp,
            }
            && self.ports.as_ref().is_none_or(|p| p.contains(&port))
            && !self.ports_except.contains(&port)
            && self.dst.as_ref().is_none_or(|d| d.iter().any(|p| p.matches(domain, ip)))
            && !self.dst_except.iter().any(|p| p.matches(domain, ip))
    }
}

#[derive(Debug, Clone)]
pub struct Firewall {
    rules: Vec<Rule>,
    default: RuleAction,
    dns: DnsCache,
    /// Rule chosen for each flow at open; `None` means the default applied.
    decided: BTreeMap<FlowKey, Option<usize>>,
    hits: Vec<u64>,
}

const TLS_PORT: u16 = 443;

impl Firewall {
    pub fn new(file: &RulesFile) -> Result<Self, FirewallError> {
        if !matches!(file.default, RuleAction::Allow | RuleAction::Deny(_)) {
            return Err(FirewallError::BadDefault);
        }
        let rules = file
            .rule
            .iter()
            .enumerate()
            .map(|(i, r)| Rule::compile(i, r))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Firewall {
            hits: vec![0; rules.len()],
            rules,
            default: file.default.clone(),
            dns: DnsCache::default(),
            decided: BTreeMap::new(),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, FirewallError> {
        Self::new(&toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, FirewallError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Times each rule decided a flow.
    pub fn hits(&self) -> &[u64] {
        &self.hits
    }

    /// Index of the first rule matching this flow.
    pub fn first_match(&self, app: &str, key: &FlowKey, domain: Option<&str>) -> Option<usize> {
        self.rules.iter().position(|r| r.matches(app, key, domain))
    }

    fn action_of(&self, rule: Option<usize>) -> (&RuleAction, Option<&str>) {
        match rule {
            Some(i) => (&self.rules[i].action, self.rules[i].notice.as_deref()),
            None => (&self.default, None),
        }
    }

    fn notice(key: &FlowKey, rule: Option<usize>, text: Option<&str>) -> Vec<u8> {
        let body = match text {
            Some(t) => t.to_string(),
            None => format!(
                "Blocked by firewall rule {}: {} to {}\n",
                rule.map_or("default".to_string(), |i| i.to_string()),
                key.protocol,
                key.dst
            ),
        };
        if key.protocol == Protocol::Tcp {
            format!(
                "HTTP/1.1 403 Forbidden\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            )
            .into_bytes()
        } else {
            body.into_bytes()
        }
    }

    fn verdict(&self, ctx: &PluginContext, rule: Option<usize>, payload: &[u8]) -> Verdict {
        let (action, text) = self.action_of(rule);
        match action {
            RuleAction::Allow => Verdict::Pass,
            RuleAction::Deny(DenyMode::Silent) => Verdict::Block(BlockMode::DropSilent),
            RuleAction::Deny(DenyMode::Reset) => Verdict::Block(BlockMode::ResetApp),
            RuleAction::Deny(DenyMode::InjectNotice) => {
                if ctx.key.protocol == Protocol::Tcp && ctx.key.dst.port() == TLS_PORT {
                    Verdict::Block(BlockMode::ResetApp)
                } else {
                    Verdict::Block(BlockMode::InjectResponse(Self::notice(&ctx.key, rule, text)))
                }
            }
            RuleAction::Switch(dst) => Verdict::Redirect(*dst),
            RuleAction::Rewrite(r) => match rewrite(payload, r.pattern.as_bytes(), r.replacement.as_bytes()) {
                Some(p) => Verdict::Modify(p),
                None => Verdict::Pass,
            },
        }
    }
}

/// Replaces every non-overlapping occurrence of `pat`; `None` when there is none.
pub fn rewrite(payload: &[u8], pat: &[u8], rep: &[u8]) -> Option<Vec<u8>> {
    if pat.is_empty() || payload.len() < pat.len() {
        return None;
    }
    let mut out = payload.to_vec();
    let mut i = 0;
    let mut hit = false;
    while i + pat.len() <= out.len() {
        if &out[i..i + pat.len()] == pat {
            out[i..i + pat.len()].copy_from_slice(rep);
            i += pat.len();
            hit = true;
        } else {
            i += 1;
        }
    }
    hit.then_some(out)
}

impl Plugin for Firewall {
    fn on_event(&mut self, ctx: &PluginContext, ev: &TrafficEvent<'_>, _: &mut Services) -> Result<Verdict, PluginError> {
        if ctx.direction == Direction::NetToApp {
            if let Some(p) = ev.packet {
                self.dns.observe(p);
            }
            return Ok(Verdict::Pass);
        }
        let key = ctx.key;
        let rule = match ctx.kind {
            EventKind::FlowClose => {
                self.decided.remove(&key);
                return Ok(Verdict::Pass);
            }
            EventKind::FlowOpen => {
                let domain = self.dns.lookup(*key.dst.ip()).map(str::to_string);
                let r = self.first_match(&ctx.app_label, &key, domain.as_deref());
                if let Some(i) = r {
                    self.hits[i] += 1;
                }
                self.decided.insert(key, r);
                r
            }
            EventKind::PacketOut => match self.decided.get(&key) {
                Some(r) => *r,
                None => {
                    let domain = self.dns.lookup(*key.dst.ip()).map(str::to_string);
                    let r = self.first_match(&ctx.app_label, &key, domain.as_deref());
                    self.decided.insert(key, r);
                    r
                }
            },
            EventKind::PacketIn => return Ok(Verdict::Pass),
        };
        let v = self.verdict(ctx, rule, ev.payload);
        // Switch only means something when the flow opens.
        if ctx.kind != EventKind::FlowOpen && matches!(v, Verdict::Redirect(_)) {
            return Ok(Verdict::Pass);
        }
        Ok(v)
    }

    fn memory_estimate(&self) -> u64 {
        (self.decided.len() * 64 + self.dns.len() * 48) as u64
    }

    fn reported_cpu_us(&self) -> u64 {
        3
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
