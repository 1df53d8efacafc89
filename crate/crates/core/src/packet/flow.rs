use super::{Packet, PacketError, Transport};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::net::SocketAddrV4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Tcp,
    Udp,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Tcp => "tcp",
            Protocol::Udp => "udp",
        })
    }
}

/// Five-tuple identifying a flow. Keys built from app-side packets are
/// oriented app → network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub protocol: Protocol,
    pub src: SocketAddrV4,
    pub dst: SocketAddrV4,
}

impl FlowKey {
    pub fn new(protocol: Protocol, src: SocketAddrV4, dst: SocketAddrV4) -> Self {
        FlowKey { protocol, src, dst }
    }

    /// Swaps source and destination.
    pub fn invert(self) -> Self {
        FlowKey {
            protocol: self.protocol,
            src: self.dst,
            dst: self.src,
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} -> {}", self.protocol, self.src, self.dst)
    }
}

pub fn flow_key_of(p: &Packet) -> Result<FlowKey, PacketError> {
    let (protocol, sp, dp) = match &p.transport {
        Transport::Tcp(t) => (Protocol::Tcp, t.src_port, t.dst_port),
        Transport::Udp(u) => (Protocol::Udp, u.src_port, u.dst_port),
        Transport::Raw => return Err(PacketError::NoTransport(p.ip.protocol)),
    };
    Ok(FlowKey {
        protocol,
        src: SocketAddrV4::new(p.ip.src_addr, sp),
        dst: SocketAddrV4::new(p.ip.dst_addr, dp),
    })
}
