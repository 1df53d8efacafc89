use super::types::*;
use crate::io::trace::Direction;
use crate::packet::{FlowKey, Packet};
use crate::time::Timestamp;
use serde::{Deserialize, Serialize};
use std::any::Any;
use std::collections::{BTreeMap, VecDeque};
use std::net::SocketAddrV4;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};
use thiserror::Error;

/// Length of the emitted-bytes accounting window.
pub const EMIT_WINDOW: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum PluginError {
    #[error("{0}")]
    Failed(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HostError {
    #[error("plugin id `{0}` is already registered")]
    DuplicateId(String),
    #[error("plugin `{0}`: every permission besides observe requires observe")]
    MalformedPermissions(String),
    #[error("plugin `{0}`: resource budget values must be positive")]
    InvalidBudget(String),
    #[error("no plugin with id `{0}`")]
    UnknownPlugin(String),
}

/// The traffic a plugin is asked about. `payload` reflects modifications by
/// earlier plugins in the chain.
#[derive(Debug, Clone, Copy)]
pub struct TrafficEvent<'a> {
    pub packet: Option<&'a Packet>,
    pub payload: &'a [u8],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProbeId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProbeOutcome {
    Response { payload: Vec<u8>, from: SocketAddrV4 },
    Timeout,
    /// The host refused or could not issue the probe.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum ServiceCall {
    Probe {
        id: ProbeId,
        dst: SocketAddrV4,
        payload: Vec<u8>,
        timeout: Duration,
    },
    Export { bytes: u64 },
    WakeAt(Timestamp),
}

/// Host-mediated services available during a callback. Requests take effect
/// after the callback returns and are checked against the plugin's grant.
#[derive(Debug)]
pub struct Services {
    now: Timestamp,
    next_probe: u64,
    calls: Vec<ServiceCall>,
}

impl Services {
    /// A standalone service handle, for driving a plugin outside a host.
    /// Requests made through it go nowhere.
    pub fn detached(now: Timestamp) -> Self {
        Services { now, next_probe: 1, calls: Vec::new() }
    }

    /// Probes requested so far, for inspection outside a host.
    pub fn requested_probes(&self) -> Vec<(ProbeId, SocketAddrV4)> {
        self.calls
            .iter()
            .filter_map(|c| match c {
                ServiceCall::Probe { id, dst, .. } => Some((*id, *dst)),
                _ => None,
            })
            .collect()
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    /// Sends `payload` as a datagram to `dst`; the reply (or timeout) arrives
    /// through [`Plugin::on_probe_result`]. Needs `INJECT_PACKETS`.
    pub fn probe(&mut self, dst: SocketAddrV4, payload: Vec<u8>, timeout: Duration) -> ProbeId {
        let id = ProbeId(self.next_probe);
        self.next_probe += 1;
        self.calls.push(ServiceCall::Probe { id, dst, payload, timeout });
        id
    }

    /// Ships data off the device. Needs `EXPORT_OFF_DEVICE`.
    pub fn export(&mut self, bytes: u64) {
        self.calls.push(ServiceCall::Export { bytes });
    }

    /// Asks for a [`Plugin::on_wakeup`] call at `at`.
    pub fn wake_at(&mut self, at: Timestamp) {
        self.calls.push(ServiceCall::WakeAt(at));
    }
}

/// Callback contract for in-process plugins.
///
/// Callbacks run on the engine's event context, one at a time, and must not
/// block; I/O goes through [`Services`].
pub trait Plugin: Any {
    fn on_event(
        &mut self,
        ctx: &PluginContext,
        event: &TrafficEvent<'_>,
        services: &mut Services,
    ) -> Result<Verdict, PluginError>;

    fn on_probe_result(&mut self, _now: Timestamp, _probe: ProbeId, _outcome: ProbeOutcome, _services: &mut Services) {}

    fn on_wakeup(&mut self, _now: Timestamp, _services: &mut Services) {}

    /// Self-reported memory use, sampled by the governor.
    fn memory_estimate(&self) -> u64 {
        0
    }

    /// Self-reported cost of the last callback, used with [`CpuMetering::Reported`].
    fn reported_cpu_us(&self) -> u64 {
        0
    }

    /// Called once when the plugin is disabled.
    fn finalize(&mut self, _now: Timestamp) {}

    fn as_any(&self) -> &dyn Any;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CpuMetering {
    /// Wall time around each callback.
    #[default]
    Wall,
    /// The plugin's own [`Plugin::reported_cpu_us`]; deterministic under replay.
    Reported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HostPolicy {
    pub cpu_metering: CpuMetering,
    /// Battery percentage at or below which sampling-class plugins are throttled.
    pub low_battery_throttle: Option<u8>,
}

impl Default for HostPolicy {
    fn default() -> Self {
        HostPolicy {
            cpu_metering: CpuMetering::Wall,
            low_battery_throttle: Some(20),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    PermissionDenied,
    InvalidVerdict,
    PluginFailure,
    ServiceDenied,
    ExportSuspended,
}

/// One line of the violation / governor log: `{ts_us, plugin, kind, detail}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub ts_us: u64,
    pub plugin: String,
    pub kind: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViolationRecord {
    pub at: Timestamp,
    pub plugin: String,
    pub kind: ViolationKind,
    pub verdict: Option<VerdictKind>,
    pub key: Option<FlowKey>,
    pub detail: String,
}

impl ViolationRecord {
    pub fn to_log(&self) -> LogRecord {
        LogRecord {
            ts_us: self.at.0,
            plugin: self.plugin.clone(),
            kind: serde_json::to_value(self.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            detail: self.detail.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisableReason {
    CpuOverrun,
    MemoryOverrun,
    EmittedOverrun,
    /// Emitted-bytes cap exceeded on cellular by a wifi-only exporter.
    CellularExportOverrun,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GovernorAction {
    Disabled(DisableReason),
    Reenabled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GovernorEvent {
    pub at: Timestamp,
    pub plugin: String,
    pub action: GovernorAction,
}

impl GovernorEvent {
    pub fn to_log(&self) -> LogRecord {
        let (kind, detail) = match &self.action {
            GovernorAction::Disabled(r) => (
                "disabled".to_string(),
                serde_json::to_value(r)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
            ),
            GovernorAction::Reenabled => ("reenabled".to_string(), String::new()),
        };
        LogRecord {
            ts_us: self.at.0,
            plugin: self.plugin.clone(),
            kind,
            detail,
        }
    }
}

/// A usage sample for one plugin; absent dimensions are not sampled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UsageSample {
    pub cpu_us: Option<u64>,
    pub mem_bytes: Option<u64>,
    pub emitted_bytes: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PluginHandle(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EffectiveAction {
    Pass,
    /// Final payload after every Modify in the chain.
    Modify(Vec<u8>),
    Block { mode: BlockMode, by: String },
    Redirect { dst: SocketAddrV4, by: String },
}

/// Metadata the engine supplies for one chain invocation.
#[derive(Debug, Clone)]
pub struct EventMeta {
    pub key: FlowKey,
    pub app_label: String,
    pub direction: Direction,
    pub kind: EventKind,
    /// Modify must keep the payload length (TCP sequence space is not renumbered).
    pub fixed_length: bool,
}

/// Work the engine performs on a plugin's behalf.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostRequest {
    Probe {
        plugin: PluginHandle,
        id: ProbeId,
        dst: SocketAddrV4,
        payload: Vec<u8>,
        timeout: Duration,
    },
    Wake {
        plugin: PluginHandle,
        at: Timestamp,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Overruns {
    cpu: u32,
    mem: u32,
    emitted: u32,
}

struct Slot {
    desc: PluginDescriptor,
    plugin: Box<dyn Plugin>,
    enabled: bool,
    invocations: u64,
    overruns: Overruns,
    emitted: VecDeque<(Timestamp, u64)>,
    disabled: Option<DisableReason>,
}

impl Slot {
    fn emitted_in_window(&mut self, now: Timestamp) -> u64 {
        while let Some(&(t, _)) = self.emitted.front() {
            if now.since(t) >= EMIT_WINDOW {
                self.emitted.pop_front();
            } else {
                break;
            }
        }
        self.emitted.iter().map(|(_, b)| b).sum()
    }
}

/// Registers plugins, runs the chain, enforces permissions and budgets.
pub struct PluginHost {
    slots: Vec<Slot>,
    device: DeviceContext,
    policy: HostPolicy,
    violations: Vec<ViolationRecord>,
    governor: Vec<GovernorEvent>,
    requests: Vec<HostRequest>,
    probe_owner: BTreeMap<ProbeId, PluginHandle>,
    next_probe: u64,
    exported_bytes: BTreeMap<String, u64>,
}

impl Default for PluginHost {
    fn default() -> Self {
        Self::new(HostPolicy::default())
    }
}

impl PluginHost {
    pub fn new(policy: HostPolicy) -> Self {
        PluginHost {
            slots: Vec::new(),
            device: DeviceContext::default(),
            policy,
            violations: Vec::new(),
            governor: Vec::new(),
            requests: Vec::new(),
            probe_owner: BTreeMap::new(),
            next_probe: 1,
            exported_bytes: BTreeMap::new(),
        }
    }

    /// Appends a plugin to the end of the chain.
    pub fn register(
        &mut self,
        desc: PluginDescriptor,
        plugin: Box<dyn Plugin>,
    ) -> Result<PluginHandle, HostError> {
        if self.slots.iter().any(|s| s.desc.id == desc.id) {
            return Err(HostError::DuplicateId(desc.id));
        }
        if !desc.requested.is_well_formed() {
            return Err(HostError::MalformedPermissions(desc.id));
        }
        if !desc.budget.is_valid() {
            return Err(HostError::InvalidBudget(desc.id));
        }
        self.slots.push(Slot {
            desc,
            plugin,
            enabled: true,
            invocations: 0,
            overruns: Overruns::default(),
            emitted: VecDeque::new(),
            disabled: None,
        });
        Ok(PluginHandle(self.slots.len() - 1))
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn chain_order(&self) -> Vec<&str> {
        self.slots.iter().map(|s| s.desc.id.as_str()).collect()
    }

    pub fn handle(&self, id: &str) -> Option<PluginHandle> {
        self.slots.iter().position(|s| s.desc.id == id).map(PluginHandle)
    }

    pub fn descriptor(&self, h: PluginHandle) -> &PluginDescriptor {
        &self.slots[h.0].desc
    }

    pub fn invocations(&self, h: PluginHandle) -> u64 {
        self.slots[h.0].invocations
    }

    pub fn is_enabled(&self, h: PluginHandle) -> bool {
        self.slots[h.0].enabled
    }

    pub fn disable_reason(&self, h: PluginHandle) -> Option<DisableReason> {
        self.slots[h.0].disabled
    }

    /// Typed access to a registered plugin.
    pub fn plugin<T: Plugin>(&self, h: PluginHandle) -> Option<&T> {
        self.slots.get(h.0)?.plugin.as_any().downcast_ref::<T>()
    }

    pub fn plugins(&self) -> impl Iterator<Item = (&PluginDescriptor, &dyn Plugin)> {
        self.slots.iter().map(|s| (&s.desc, s.plugin.as_ref()))
    }

    pub fn violations(&self) -> &[ViolationRecord] {
        &self.violations
    }

    pub fn governor_events(&self) -> &[GovernorEvent] {
        &self.governor
    }

    pub fn exported_bytes(&self) -> &BTreeMap<String, u64> {
        &self.exported_bytes
    }

    pub fn device(&self) -> DeviceContext {
        self.device
    }

    pub fn update_context(&mut self, device: DeviceContext) {
        self.device = DeviceContext {
            battery_percent: device.battery_percent.min(100),
            ..device
        };
    }

    /// User re-enable: clears overrun history and resumes invocation.
    pub fn reenable(&mut self, id: &str, now: Timestamp) -> Result<(), HostError> {
        let h = self.handle(id).ok_or_else(|| HostError::UnknownPlugin(id.to_string()))?;
        let slot = &mut self.slots[h.0];
        if !slot.enabled {
            slot.enabled = true;
            slot.disabled = None;
            slot.overruns = Overruns::default();
            slot.emitted.clear();
            self.governor.push(GovernorEvent {
                at: now,
                plugin: id.to_string(),
                action: GovernorAction::Reenabled,
            });
        }
        Ok(())
    }

    /// Requests accumulated from plugin services since the last call.
    pub fn take_requests(&mut self) -> Vec<HostRequest> {
        std::mem::take(&mut self.requests)
    }

    /// Permissions currently in force for a slot, after context suspensions.
    fn effective_permissions(&self, h: PluginHandle) -> PermissionSet {
        let d = &self.slots[h.0].desc;
        let mut p = d.requested;
        if d.wifi_only_export && self.device.connectivity == Connectivity::Cellular {
            p.remove(PermissionSet::EXPORT_OFF_DEVICE);
        }
        p
    }

    fn throttled(&self, h: PluginHandle) -> bool {
        self.slots[h.0].desc.sampling_class
            && self
                .policy
                .low_battery_throttle
                .is_some_and(|t| self.device.battery_percent <= t)
    }

    fn violate(
        &mut self,
        now: Timestamp,
        h: PluginHandle,
        kind: ViolationKind,
        verdict: Option<VerdictKind>,
        key: Option<FlowKey>,
        detail: String,
    ) {
        self.violations.push(ViolationRecord {
            at: now,
            plugin: self.slots[h.0].desc.id.clone(),
            kind,
            verdict,
            key,
            detail,
        });
    }

    fn disable(&mut self, now: Timestamp, h: PluginHandle, reason: DisableReason) {
        let slot = &mut self.slots[h.0];
        if !slot.enabled {
            return;
        }
        slot.enabled = false;
        slot.disabled = Some(reason);
        slot.plugin.finalize(now);
        self.governor.push(GovernorEvent {
            at: now,
            plugin: slot.desc.id.clone(),
            action: GovernorAction::Disabled(reason),
        });
        log::warn!("plugin {} disabled: {:?}", slot.desc.id, reason);
    }

    /// Feeds one usage sample into the governor.
    pub fn account(&mut self, now: Timestamp, h: PluginHandle, sample: UsageSample) {
        if !self.slots[h.0].enabled {
            return;
        }
        let budget = self.slots[h.0].desc.budget;
        let grace = budget.violation_grace;
        if let Some(cpu) = sample.cpu_us {
            let o = &mut self.slots[h.0].overruns;
            if cpu > budget.max_cpu_us_per_packet {
                o.cpu += 1;
                if o.cpu > grace {
                    return self.disable(now, h, DisableReason::CpuOverrun);
                }
            } else {
                o.cpu = 0;
            }
        }
        if let Some(mem) = sample.mem_bytes {
            let o = &mut self.slots[h.0].overruns;
            if mem > budget.max_mem_bytes {
                o.mem += 1;
                if o.mem > grace {
                    return self.disable(now, h, DisableReason::MemoryOverrun);
                }
            } else {
                o.mem = 0;
            }
        }
        if let Some(bytes) = sample.emitted_bytes {
            if bytes > 0 {
                self.slots[h.0].emitted.push_back((now, bytes));
            }
            self.check_emitted(now, h);
        }
    }

    fn check_emitted(&mut self, now: Timestamp, h: PluginHandle) {
        let cellular_only = self.slots[h.0].desc.wifi_only_export
            && self.device.connectivity == Connectivity::Cellular;
        let budget = self.slots[h.0].desc.budget;
        let total = self.slots[h.0].emitted_in_window(now);
        let o = &mut self.slots[h.0].overruns;
        if total > budget.max_emitted_bytes_per_min {
            if cellular_only {
                return self.disable(now, h, DisableReason::CellularExportOverrun);
            }
            o.emitted += 1;
            if o.emitted > budget.violation_grace {
                self.disable(now, h, DisableReason::EmittedOverrun);
            }
        } else {
            o.emitted = 0;
        }
    }

    /// Periodic governor pass: samples memory and the emitted-bytes window.
    pub fn governor_tick(&mut self, now: Timestamp) {
        for i in 0..self.slots.len() {
            let h = PluginHandle(i);
            if !self.slots[i].enabled {
                continue;
            }
            let mem = self.slots[i].plugin.memory_estimate();
            self.account(
                now,
                h,
                UsageSample {
                    mem_bytes: Some(mem),
                    emitted_bytes: Some(0),
                    ..Default::default()
                },
            );
        }
    }

    /// Applies the service calls a plugin made during one callback.
    fn settle_calls(&mut self, now: Timestamp, h: PluginHandle, calls: Vec<ServiceCall>, key: Option<FlowKey>) {
        let granted = self.effective_permissions(h);
        let mut emitted = 0u64;
        for call in calls {
            match call {
                ServiceCall::Probe { id, dst, payload, timeout } => {
                    if !granted.contains(PermissionSet::INJECT_PACKETS) {
                        self.violate(
                            now,
                            h,
                            ViolationKind::ServiceDenied,
                            None,
                            key,
                            format!("probe to {dst} without inject_packets"),
                        );
                        continue;
                    }
                    emitted += payload.len() as u64;
                    self.probe_owner.insert(id, h);
                    self.requests.push(HostRequest::Probe { plugin: h, id, dst, payload, timeout });
                }
                ServiceCall::Export { bytes } => {
                    let desc = &self.slots[h.0].desc;
                    if !desc.requested.contains(PermissionSet::EXPORT_OFF_DEVICE) {
                        self.violate(now, h, ViolationKind::ServiceDenied, None, key, format!("export of {bytes} bytes without export_off_device"));
                        continue;
                    }
                    emitted += bytes;
                    if !granted.contains(PermissionSet::EXPORT_OFF_DEVICE) {
                        self.violate(now, h, ViolationKind::ExportSuspended, None, key, format!("export of {bytes} bytes suspended on cellular"));
                        continue;
                    }
                    *self.exported_bytes.entry(self.slots[h.0].desc.id.clone()).or_default() += bytes;
                }
                ServiceCall::WakeAt(at) => self.requests.push(HostRequest::Wake { plugin: h, at }),
            }
        }
        if emitted > 0 {
            self.account(now, h, UsageSample { emitted_bytes: Some(emitted), ..Default::default() });
        }
    }

    /// Runs `f` against one plugin with metering, panic capture and service settlement.
    fn invoke<R>(
        &mut self,
        now: Timestamp,
        h: PluginHandle,
        key: Option<FlowKey>,
        f: impl FnOnce(&mut dyn Plugin, &mut Services) -> R,
    ) -> Option<R> {
        let mut services = Services { now, next_probe: self.next_probe, calls: Vec::new() };
        let slot = &mut self.slots[h.0];
        slot.invocations += 1;
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| f(slot.plugin.as_mut(), &mut services)));
        let cpu_us = match self.policy.cpu_metering {
            CpuMetering::Wall => started.elapsed().as_micros() as u64,
            CpuMetering::Reported => slot.plugin.reported_cpu_us(),
        };
        self.next_probe = services.next_probe;
        let out = match result {
            Ok(r) => Some(r),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".into());
                self.violate(now, h, ViolationKind::PluginFailure, None, key, format!("panicked: {msg}"));
                None
            }
        };
        self.settle_calls(now, h, services.calls, key);
        self.account(now, h, UsageSample { cpu_us: Some(cpu_us), ..Default::default() });
        out
    }

    /// Runs the chain over one traffic event.
    ///
    /// Modify verdicts compose in chain order; the first permitted Block or
    /// Redirect ends the chain. Verdicts the plugin is not allowed to issue
    /// are downgraded to Pass and logged.
    pub fn chain_apply(
        &mut self,
        now: Timestamp,
        meta: &EventMeta,
        packet: Option<&Packet>,
        payload: &[u8],
    ) -> EffectiveAction {
        let mut current: Option<Vec<u8>> = None;
        for i in 0..self.slots.len() {
            let h = PluginHandle(i);
            if !self.slots[i].enabled {
                continue;
            }
            let ctx = PluginContext {
                key: meta.key,
                app_label: meta.app_label.clone(),
                direction: meta.direction,
                kind: meta.kind,
                device: self.device,
                clock: now,
                throttle: self.throttled(h),
            };
            let data = current.as_deref().unwrap_or(payload);
            let event = TrafficEvent { packet, payload: data };
            let verdict = match self.invoke(now, h, Some(meta.key), |p, s| p.on_event(&ctx, &event, s)) {
                Some(Ok(v)) => v,
                Some(Err(e)) => {
                    self.violate(now, h, ViolationKind::PluginFailure, None, Some(meta.key), e.to_string());
                    Verdict::Pass
                }
                None => Verdict::Pass,
            };
            if verdict == Verdict::Pass {
                continue;
            }
            let kind = verdict.kind();
            let granted = self.effective_permissions(h);
            if !granted.contains(verdict.required_permissions()) {
                self.violate(
                    now,
                    h,
                    ViolationKind::PermissionDenied,
                    Some(kind),
                    Some(meta.key),
                    format!("{kind} on {} needs {}", meta.key, verdict.required_permissions()),
                );
                continue;
            }
            if let Some(why) = invalid_for(&verdict, meta, data.len()) {
                self.violate(
                    now,
                    h,
                    ViolationKind::InvalidVerdict,
                    Some(kind),
                    Some(meta.key),
                    format!("{kind} on {}: {why}", meta.key),
                );
                continue;
            }
            let by = self.slots[i].desc.id.clone();
            match verdict {
                Verdict::Pass => {}
                Verdict::Modify(p) => current = Some(p),
                Verdict::Block(mode) => return EffectiveAction::Block { mode, by },
                Verdict::Redirect(dst) => return EffectiveAction::Redirect { dst, by },
            }
        }
        match current {
            Some(p) if p != payload => EffectiveAction::Modify(p),
            _ => EffectiveAction::Pass,
        }
    }

    /// Delivers a probe completion to the plugin that asked for it.
    pub fn deliver_probe_result(&mut self, now: Timestamp, probe: ProbeId, outcome: ProbeOutcome) {
        let Some(h) = self.probe_owner.remove(&probe) else { return };
        if !self.slots[h.0].enabled {
            return;
        }
        self.invoke(now, h, None, |p, s| p.on_probe_result(now, probe, outcome, s));
    }

    /// End of run: lets every enabled plugin settle what it still holds.
    pub fn finalize(&mut self, now: Timestamp) {
        for i in 0..self.slots.len() {
            if self.slots[i].enabled {
                self.invoke(now, PluginHandle(i), None, |p, _| p.finalize(now));
            }
        }
    }

    pub fn deliver_wakeup(&mut self, now: Timestamp, h: PluginHandle) {
        if self.slots.get(h.0).is_some_and(|s| s.enabled) {
            self.invoke(now, h, None, |p, s| p.on_wakeup(now, s));
        }
    }
}

/// Verdicts that make no sense for the event they answer.
fn invalid_for(v: &Verdict, meta: &EventMeta, len: usize) -> Option<&'static str> {
    match (v, meta.kind, meta.direction) {
        (_, EventKind::FlowClose, _) => Some("flow already closing"),
        (Verdict::Modify(p), _, _) if meta.fixed_length && p.len() != len => {
            Some("payload length must not change")
        }
        (Verdict::Redirect(_), k, _) if k != EventKind::FlowOpen => Some("redirect is only possible at flow open"),
        (Verdict::Block(BlockMode::InjectResponse(_)), _, Direction::NetToApp) => {
            Some("inject response only answers app-originated traffic")
        }
        (Verdict::Redirect(_), _, Direction::NetToApp) => Some("redirect only applies to app-originated traffic"),
        _ => None,
    }
}
