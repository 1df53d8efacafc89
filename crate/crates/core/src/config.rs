//! Run configuration: engine settings, device context, the plugin chain and
//! where traffic comes from.
//!
//! ```toml
//! seed = 7
//!
//! [engine]
//! local_isn = { fixed = 5000 }
//!
//! [io]
//! trace = "trace.jsonl"
//! scripts = "endpoints.toml"
//!
//! [[plugin]]
//! kind = "firewall"
//! rules = "rules.toml"
//!
//! [[plugin]]
//! kind = "snitch"
//! org_map = "orgs.csv"
//! ```
//!
//! Relative paths are resolved against the directory holding the config
//! file. Unknown keys are errors.

use crate::engine::EngineConfig;
use crate::plugin::{Connectivity, CpuMetering, DeviceContext, HostPolicy, PermissionSet, PluginDescriptor, ResourceBudget};
use crate::plugins::advisor::AdvisorConfig;
use crate::plugins::whatif::WhatIfConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::net::SocketAddrV4;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, field: Option<String>, message: String },
    #[error("{path}: file not found")]
    MissingFile { path: PathBuf },
    #[error("duplicate plugin id `{0}`")]
    DuplicatePluginId(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceSection {
    pub connectivity: Connectivity,
    pub battery_percent: u8,
}

impl Default for DeviceSection {
    fn default() -> Self {
        let d = DeviceContext::default();
        DeviceSection { connectivity: d.connectivity, battery_percent: d.battery_percent }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HostSection {
    pub cpu_metering: CpuMetering,
    /// Battery level at or below which sampling plugins are throttled; 0 disables.
    pub low_battery_throttle: u8,
}

impl Default for HostSection {
    fn default() -> Self {
        let p = HostPolicy::default();
        HostSection { cpu_metering: p.cpu_metering, low_battery_throttle: p.low_battery_throttle.unwrap_or(0) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    /// JSON-lines trace.
    pub trace: Option<PathBuf>,
    /// pcap capture; used when `trace` is absent.
    pub pcap: Option<PathBuf>,
    /// App label for packets from a pcap, which carries none.
    pub pcap_app_label: String,
    /// Simulated endpoint scripts for replay.
    pub scripts: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Plotdata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub path: Option<PathBuf>,
    pub formats: Vec<ReportFormat>,
    /// Packets the engine emitted, as a raw-IP pcap.
    pub pcap: Option<PathBuf>,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { path: None, formats: vec![ReportFormat::Json], pcap: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnitchSettings {
    #[serde(default)]
    org_map: Option<PathBuf>,
    #[serde(default)]
    first_party: BTreeSet<String>,
    #[serde(default = "default_burst_gap")]
    burst_gap_ms: u64,
}

fn default_burst_gap() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FirewallSettings {
    rules: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WhatIfSettings {
    alternates: Vec<SocketAddrV4>,
    #[serde(default)]
    sample_rate: Option<f64>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    timeout_ms: Option<u64>,
}

/// What a plugin entry builds, with its kind-specific settings.
#[derive(Debug, Clone, PartialEq)]
pub enum PluginKind {
    Snitch { org_map: Option<PathBuf>, first_party: BTreeSet<String>, burst_gap_ms: u64 },
    Firewall { rules: PathBuf },
    DnsWhatIf(WhatIfConfig),
    ProtocolAdvisor(AdvisorConfig),
}

impl PluginKind {
    pub fn name(&self) -> &'static str {
        match self {
            PluginKind::Snitch { .. } => "snitch",
            PluginKind::Firewall { .. } => "firewall",
            PluginKind::DnsWhatIf(_) => "dns_whatif",
            PluginKind::ProtocolAdvisor(_) => "protocol_advisor",
        }
    }

    /// What the plugin asks for when the entry does not say.
    pub fn default_permissions(&self) -> PermissionSet {
        match self {
            PluginKind::Snitch { .. } | PluginKind::ProtocolAdvisor(_) => PermissionSet::OBSERVE,
            PluginKind::Firewall { .. } => {
                PermissionSet::OBSERVE
                    | PermissionSet::MODIFY_PAYLOAD
                    | PermissionSet::BLOCK_FLOW
                    | PermissionSet::REDIRECT_FLOW
                    | PermissionSet::INJECT_PACKETS
            }
            PluginKind::DnsWhatIf(_) => PermissionSet::OBSERVE | PermissionSet::INJECT_PACKETS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PluginEntry {
    pub descriptor: PluginDescriptor,
    pub kind: PluginKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Directory relative paths were resolved against.
    pub base_dir: PathBuf,
    pub seed: u64,
    pub engine: EngineConfig,
    pub device: DeviceSection,
    pub host: HostSection,
    pub io: IoSection,
    pub report: ReportSection,
    pub plugins: Vec<PluginEntry>,
}

impl RunConfig {
    pub fn host_policy(&self) -> HostPolicy {
        HostPolicy {
            cpu_metering: self.host.cpu_metering,
            low_battery_throttle: (self.host.low_battery_throttle > 0).then_some(self.host.low_battery_throttle),
        }
    }

    pub fn device_context(&self) -> DeviceContext {
        DeviceContext { connectivity: self.device.connectivity, battery_percent: self.device.battery_percent }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    engine: EngineConfig,
    #[serde(default)]
    device: DeviceSection,
    #[serde(default)]
    host: HostSection,
    #[serde(default)]
    io: IoSection,
    #[serde(default)]
    report: ReportSection,
    #[serde(default)]
    plugin: Vec<toml::Spanned<toml::Table>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CommonFields {
    #[serde(default)]
    id: Option<String>,
    kind: String,
    #[serde(default)]
    permissions: Option<PermissionSet>,
    #[serde(default)]
    budget: Option<ResourceBudget>,
    #[serde(default)]
    wifi_only_export: bool,
}

const COMMON_KEYS: [&str; 5] = ["id", "kind", "permissions", "budget", "wifi_only_export"];

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

/// Field named in a serde message such as "unknown field `speeed`".
fn field_in(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

/// Parses config text. `origin` names the source in errors; `base_dir`
/// anchors relative paths.
pub fn parse_config(text: &str, origin: &str, base_dir: &Path) -> Result<RunConfig, ConfigError> {
    let parse_err = |line: usize, message: String| ConfigError::Parse {
        path: origin.to_string(),
        line,
        field: field_in(&message),
        message,
    };
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| line_of(text, s.start));
        parse_err(line, e.message().to_string())
    })?;
    raw.engine.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
    let must_exist = |p: PathBuf| if p.exists() { Ok(p) } else { Err(ConfigError::MissingFile { path: p }) };

    let mut io = raw.io;
    io.trace = io.trace.as_deref().map(resolve).map(must_exist).transpose()?;
    io.pcap = io.pcap.as_deref().map(resolve).map(must_exist).transpose()?;
    io.scripts = io.scripts.as_deref().map(resolve).map(must_exist).transpose()?;
    let mut report = raw.report;
    report.path = report.path.as_deref().map(resolve);
    report.pcap = report.pcap.as_deref().map(resolve);

    let mut plugins = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, spanned) in raw.plugin.into_iter().enumerate() {
        let line = line_of(text, spanned.span().start);
        let mut table = spanned.into_inner();
        let mut common_table = toml::Table::new();
        for k in COMMON_KEYS {
            if let Some(v) = table.remove(k) {
                common_table.insert(k.to_string(), v);
            }
        }
        let bad = |e: toml::de::Error| parse_err(line, format!("plugin[{i}]: {}", e.message()));
        let common: CommonFields = common_table.try_into().map_err(bad)?;
        let kind = match common.kind.as_str() {
            "snitch" => {
                let s: SnitchSettings = table.try_into().map_err(bad)?;
                PluginKind::Snitch {
                    org_map: s.org_map.as_deref().map(resolve).map(must_exist).transpose()?,
                    first_party: s.first_party,
                    burst_gap_ms: s.burst_gap_ms,
                }
            }
            "firewall" => {
                let s: FirewallSettings = table.try_into().map_err(bad)?;
                PluginKind::Firewall { rules: must_exist(resolve(&s.rules))? }
            }
            "dns_whatif" => {
                let s: WhatIfSettings = table.try_into().map_err(bad)?;
                let d = WhatIfConfig::default();
                let cfg = WhatIfConfig {
                    alternates: s.alternates,
                    sample_rate: s.sample_rate.unwrap_or(d.sample_rate),
                    seed: s.seed.unwrap_or(raw.seed),
                    timeout_ms: s.timeout_ms.unwrap_or(d.timeout_ms),
                };
                if !(0.0..=1.0).contains(&cfg.sample_rate) {
                    return Err(parse_err(line, format!("plugin[{i}]: `sample_rate` must be within 0..=1")));
                }
                PluginKind::DnsWhatIf(cfg)
            }
            "protocol_advisor" => {
                let c: AdvisorConfig = table.try_into().map_err(bad)?;
                PluginKind::ProtocolAdvisor(c)
            }
            other => {
                return Err(ConfigError::Parse {
                    path: origin.to_string(),
                    line,
                    field: Some("kind".into()),
                    message: format!("plugin[{i}]: unknown plugin kind `{other}`"),
                })
            }
        };
        let id = common.id.unwrap_or_else(|| kind.name().to_string());
        if !ids.insert(id.clone()) {
            return Err(ConfigError::DuplicatePluginId(id));
        }
        let mut descriptor = PluginDescriptor::new(&id, common.permissions.unwrap_or_else(|| kind.default_permissions()));
        descriptor.name = kind.name().to_string();
        descriptor.budget = common.budget.unwrap_or_default();
        descriptor.wifi_only_export = common.wifi_only_export;
        descriptor.sampling_class = matches!(kind, PluginKind::DnsWhatIf(_));
        plugins.push(PluginEntry { descriptor, kind });
    }

    Ok(RunConfig {
        base_dir: base_dir.to_path_buf(),
        seed: raw.seed,
        engine: raw.engine,
        device: raw.device,
        host: raw.host,
        io,
        report,
        plugins,
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ConfigError::MissingFile { path: path.to_path_buf() },
        _ => ConfigError::Io { path: path.to_path_buf(), source: e },
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &path.display().to_string(), &base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        parse_config(text, "test.toml", Path::new("/nonexistent"))
    }

    #[test]
    fn minimal_config_is_valid() {
        let c = parse("").unwrap();
        assert_eq!(c.engine, EngineConfig::default());
        assert!(c.plugins.is_empty());
        assert_eq!(c.report.formats, vec![ReportFormat::Json]);
    }

    #[test]
    fn unknown_key_points_at_it() {
        let err = parse("seed = 1\n\n[engine]\nspeeed = 3\n").unwrap_err();
        let ConfigError::Parse { line, field, .. } = err else { panic!("{err}") };
        assert_eq!(line, 4);
        assert_eq!(field.as_deref(), Some("speeed"));
    }

    #[test]
    fn unknown_plugin_key_is_rejected() {
        let err = parse("[[plugin]]\nkind = \"protocol_advisor\"\nmin_sampels = 3\n").unwrap_err();
        let ConfigError::Parse { line, field, .. } = err else { panic!("{err}") };
        assert_eq!(line, 1);
        assert_eq!(field.as_deref(), Some("min_sampels"));
    }

    #[test]
    fn missing_rules_file_is_named() {
        let err = parse("[[plugin]]\nkind = \"firewall\"\nrules = \"nope.toml\"\n").unwrap_err();
        let ConfigError::MissingFile { path } = err else { panic!("{err}") };
        assert_eq!(path, Path::new("/nonexistent/nope.toml"));
    }

    #[test]
    fn duplicate_ids() {
        let err = parse("[[plugin]]\nkind = \"protocol_advisor\"\n[[plugin]]\nkind = \"protocol_advisor\"\n").unwrap_err();
        assert!(matches!(err, ConfigError::DuplicatePluginId(id) if id == "protocol_advisor"));
    }

    #[test]
    fn whatif_inherits_run_seed() {
        let c = parse("seed = 42\n[[plugin]]\nkind = \"dns_whatif\"\nalternates = [\"9.9.9.9:53\"]\n").unwrap();
        let PluginKind::DnsWhatIf(w) = &c.plugins[0].kind else { panic!() };
        assert_eq!(w.seed, 42);
        assert_eq!(w.sample_rate, 0.05);
        assert!(c.plugins[0].descriptor.sampling_class);
        assert!(c.plugins[0].descriptor.requested.contains(PermissionSet::INJECT_PACKETS));
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("rules.toml"), "").unwrap();
        std::fs::write(dir.path().join("run.toml"), "[[plugin]]\nkind = \"firewall\"\nrules = \"rules.toml\"\n").unwrap();
        let c = load_config(&dir.path().join("run.toml")).unwrap();
        let PluginKind::Firewall { rules } = &c.plugins[0].kind else { panic!() };
        assert_eq!(rules, &dir.path().join("rules.toml"));
    }
}
