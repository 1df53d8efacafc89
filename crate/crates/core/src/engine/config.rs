use crate::packet::DEFAULT_MTU;
use serde::{Deserialize, Serialize};
use std::time::Duration;
use thiserror::Error;

/// How the engine picks its own initial sequence number per TCP flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsnMode {
    /// Drawn from the engine's seeded RNG.
    Random,
    /// Same value for every flow.
    Fixed(u32),
}

/// Engine tunables. Times are in whole seconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub mtu: usize,
    /// Maximum simultaneous upstream handles (streams plus datagram sockets).
    pub socket_budget: usize,
    pub udp_timeout: u64,
    pub dns_timeout: u64,
    pub sweep_interval: u64,
    /// Idle limit for TCP flows that are still connecting or half-closed.
    pub tcp_linger: u64,
    pub local_isn: IsnMode,
    /// Per-direction byte buffer for each TCP flow.
    pub buffer_capacity: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            mtu: DEFAULT_MTU,
            socket_budget: 512,
            udp_timeout: 30,
            dns_timeout: 10,
            sweep_interval: 1,
            tcp_linger: 30,
            local_isn: IsnMode::Random,
            buffer_capacity: 64 * 1024,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("engine.{0} must be positive")]
    NotPositive(&'static str),
    #[error("engine.dns_timeout ({dns}) must not exceed engine.udp_timeout ({udp})")]
    DnsTimeoutTooLong { dns: u64, udp: u64 },
    #[error("engine.mtu {0} leaves no room for a TCP payload")]
    MtuTooSmall(usize),
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("socket_budget", self.socket_budget as u64),
            ("udp_timeout", self.udp_timeout),
            ("dns_timeout", self.dns_timeout),
            ("sweep_interval", self.sweep_interval),
            ("tcp_linger", self.tcp_linger),
            ("buffer_capacity", self.buffer_capacity as u64),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::NotPositive(name));
        }
        if self.mtu <= 40 || self.mtu > u16::MAX as usize {
            return Err(ConfigError::MtuTooSmall(self.mtu));
        }
        if self.dns_timeout > self.udp_timeout {
            return Err(ConfigError::DnsTimeoutTooLong {
                dns: self.dns_timeout,
                udp: self.udp_timeout,
            });
        }
        Ok(())
    }

    /// Handle count above which the sweep starts evicting UDP flows.
    pub fn pressure_threshold(&self) -> usize {
        self.socket_budget * 9 / 10
    }

    pub(crate) fn secs(v: u64) -> Duration {
        Duration::from_secs(v)
    }
}
