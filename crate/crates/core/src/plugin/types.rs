use crate::io::trace::Direction;
use crate::packet::FlowKey;
use crate::time::Timestamp;
use bitflags::bitflags;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::net::SocketAddrV4;

bitflags! {
    /// Powers a plugin holds over traffic. Every flag other than `OBSERVE`
    /// requires `OBSERVE`.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct PermissionSet: u8 {
        const OBSERVE = 1 << 0;
        const MODIFY_PAYLOAD = 1 << 1;
        const BLOCK_FLOW = 1 << 2;
        const REDIRECT_FLOW = 1 << 3;
        const INJECT_PACKETS = 1 << 4;
        const EXPORT_OFF_DEVICE = 1 << 5;
    }
}

const PERMISSION_NAMES: [(&str, PermissionSet); 6] = [
    ("observe", PermissionSet::OBSERVE),
    ("modify_payload", PermissionSet::MODIFY_PAYLOAD),
    ("block_flow", PermissionSet::BLOCK_FLOW),
    ("redirect_flow", PermissionSet::REDIRECT_FLOW),
    ("inject_packets", PermissionSet::INJECT_PACKETS),
    ("export_off_device", PermissionSet::EXPORT_OFF_DEVICE),
];

impl PermissionSet {
    pub fn is_well_formed(self) -> bool {
        self.is_empty() || self.contains(PermissionSet::OBSERVE)
    }

    pub fn from_snake_name(name: &str) -> Option<PermissionSet> {
        PERMISSION_NAMES.iter().find(|(n, _)| *n == name).map(|(_, p)| *p)
    }

    pub fn names(self) -> Vec<&'static str> {
        PERMISSION_NAMES
            .iter()
            .filter(|(_, p)| self.contains(*p))
            .map(|(n, _)| *n)
            .collect()
    }
}

impl fmt::Display for PermissionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join("|"))
    }
}

impl Serialize for PermissionSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.names().serialize(s)
    }
}

impl<'de> Deserialize<'de> for PermissionSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        names.iter().try_fold(PermissionSet::empty(), |acc, n| {
            PermissionSet::from_snake_name(n)
                .map(|p| acc | p)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown permission `{n}`")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResourceBudget {
    pub max_cpu_us_per_packet: u64,
    /// Compared against the plugin's own memory estimate.
    pub max_mem_bytes: u64,
    /// Plugin-originated traffic (probes, exports) over a sliding minute.
    pub max_emitted_bytes_per_min: u64,
    /// Consecutive overruns tolerated before disabling.
    pub violation_grace: u32,
}

impl Default for ResourceBudget {
    fn default() -> Self {
        ResourceBudget {
            max_cpu_us_per_packet: 500,
            max_mem_bytes: 64 << 20,
            max_emitted_bytes_per_min: 1 << 20,
            violation_grace: 3,
        }
    }
}

impl ResourceBudget {
    pub fn is_valid(&self) -> bool {
        self.max_cpu_us_per_packet > 0
            && self.max_mem_bytes > 0
            && self.max_emitted_bytes_per_min > 0
            && self.violation_grace > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PluginDescriptor {
    pub id: String,
    pub name: String,
    pub requested: PermissionSet,
    pub budget: ResourceBudget,
    /// Exports are suspended while on cellular.
    pub wifi_only_export: bool,
    /// Sampling plugins get a throttle hint on low battery.
    pub sampling_class: bool,
}

impl PluginDescriptor {
    pub fn new(id: &str, requested: PermissionSet) -> Self {
        PluginDescriptor {
            id: id.to_string(),
            name: id.to_string(),
            requested,
            budget: ResourceBudget::default(),
            wifi_only_export: false,
            sampling_class: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    DropSilent,
    ResetApp,
    /// Answer the app locally with this payload instead of contacting the network.
    InjectResponse(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Modify(Vec<u8>),
    Block(BlockMode),
    Redirect(SocketAddrV4),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Pass,
    Modify,
    Block,
    InjectResponse,
    Redirect,
}

impl Verdict {
    pub fn kind(&self) -> VerdictKind {
        match self {
            Verdict::Pass => VerdictKind::Pass,
            Verdict::Modify(_) => VerdictKind::Modify,
            Verdict::Block(BlockMode::InjectResponse(_)) => VerdictKind::InjectResponse,
            Verdict::Block(_) => VerdictKind::Block,
            Verdict::Redirect(_) => VerdictKind::Redirect,
        }
    }

    /// Permissions the acting plugin must hold for this verdict to take effect.
    pub fn required_permissions(&self) -> PermissionSet {
        match self {
            Verdict::Pass => PermissionSet::empty(),
            Verdict::Modify(_) => PermissionSet::MODIFY_PAYLOAD,
            Verdict::Block(BlockMode::InjectResponse(_)) => {
                PermissionSet::BLOCK_FLOW | PermissionSet::INJECT_PACKETS
            }
            Verdict::Block(_) => PermissionSet::BLOCK_FLOW,
            Verdict::Redirect(_) => PermissionSet::REDIRECT_FLOW,
        }
    }
}

impl fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictKind::Pass => "pass",
            VerdictKind::Modify => "modify",
            VerdictKind::Block => "block",
            VerdictKind::InjectResponse => "inject_response",
            VerdictKind::Redirect => "redirect",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    FlowOpen,
    PacketOut,
    PacketIn,
    FlowClose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    #[default]
    Wifi,
    Cellular,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceContext {
    pub connectivity: Connectivity,
    pub battery_percent: u8,
}

impl Default for DeviceContext {
    fn default() -> Self {
        DeviceContext {
            connectivity: Connectivity::Wifi,
            battery_percent: 100,
        }
    }
}

/// Immutable snapshot handed to a plugin for one invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PluginContext {
    pub key: FlowKey,
    pub app_label: String,
    pub direction: Direction,
    pub kind: EventKind,
    pub device: DeviceContext,
    pub clock: Timestamp,
    /// Set for sampling-class plugins while battery is low.
    pub throttle: bool,
}
