//! IPv4/TCP/UDP wire formats.
//!
//! Parsing is strict about structure (lengths, version, fragmentation) and
//! lenient about checksums: a checksum mismatch comes back as
//! [`PacketError::BadChecksum`] carrying the fully parsed packet, because
//! captures routinely contain offload-zeroed checksums. Serialization always
//! recomputes lengths and checksums; the checksum fields of the input are
//! ignored.

mod checksum;
mod flow;

pub use checksum::{internet_checksum, transport_checksum};
pub use flow::{flow_key_of, FlowKey, Protocol};

use crate::time::Timestamp;
use bitflags::bitflags;
use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use thiserror::Error;

pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

pub const IPV4_MIN_HEADER: usize = 20;
pub const TCP_MIN_HEADER: usize = 20;
pub const UDP_HEADER: usize = 8;

pub const DEFAULT_MTU: usize = 1500;

const IP_FLAG_DF: u16 = 0x4000;
const IP_FLAG_MF: u16 = 0x2000;
const IP_FRAG_OFFSET: u16 = 0x1fff;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChecksumKind {
    Ip,
    Tcp,
    Udp,
}

impl fmt::Display for ChecksumKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChecksumKind::Ip => "ip",
            ChecksumKind::Tcp => "tcp",
            ChecksumKind::Udp => "udp",
        })
    }
}

#[derive(Debug, Error)]
pub enum PacketError {
    #[error("truncated packet: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unsupported IP version {0}")]
    UnsupportedVersion(u8),
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    #[error("IP fragments are not supported")]
    Fragmented,
    /// Warning class: the packet parsed fine but a checksum does not verify.
    #[error("{kind} checksum mismatch")]
    BadChecksum {
        kind: ChecksumKind,
        packet: Box<Packet>,
    },
    #[error("packet of {size} bytes exceeds MTU {mtu}")]
    OversizedPacket { size: usize, mtu: usize },
    #[error("no TCP/UDP transport (protocol {0})")]
    NoTransport(u8),
    #[error("invalid field: {0}")]
    InvalidField(&'static str),
}

impl PacketError {
    /// Checksum mismatches are reported but do not make the packet unusable.
    pub fn is_warning(&self) -> bool {
        matches!(self, PacketError::BadChecksum { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ipv4Header {
    pub version: u8,
    /// Header length in bytes, options included.
    pub header_length: u8,
    pub dscp_ecn: u8,
    pub total_length: u16,
    pub identification: u16,
    pub flags_fragment: u16,
    pub ttl: u8,
    pub protocol: u8,
    pub header_checksum: u16,
    pub src_addr: Ipv4Addr,
    pub dst_addr: Ipv4Addr,
    /// Raw IP options, carried but not interpreted.
    pub options: Vec<u8>,
}

impl Ipv4Header {
    pub fn new(src: Ipv4Addr, dst: Ipv4Addr, protocol: u8) -> Self {
        Ipv4Header {
            version: 4,
            header_length: IPV4_MIN_HEADER as u8,
            dscp_ecn: 0,
            total_length: 0,
            identification: 0,
            flags_fragment: IP_FLAG_DF,
            ttl: 64,
            protocol,
            header_checksum: 0,
            src_addr: src,
            dst_addr: dst,
            options: Vec::new(),
        }
    }

    fn encode(&self, total_length: u16, out: &mut Vec<u8>) {
        let start = out.len();
        let hlen = IPV4_MIN_HEADER + self.options.len();
        out.push(0x40 | (hlen / 4) as u8);
        out.push(self.dscp_ecn);
        out.extend_from_slice(&total_length.to_be_bytes());
        out.extend_from_slice(&self.identification.to_be_bytes());
        out.extend_from_slice(&self.flags_fragment.to_be_bytes());
        out.push(self.ttl);
        out.push(self.protocol);
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.src_addr.octets());
        out.extend_from_slice(&self.dst_addr.octets());
        out.extend_from_slice(&self.options);
        let c = internet_checksum(&out[start..]);
        out[start + 10..start + 12].copy_from_slice(&c.to_be_bytes());
    }
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct TcpFlags: u8 {
        const FIN = 0x01;
        const SYN = 0x02;
        const RST = 0x04;
        const PSH = 0x08;
        const ACK = 0x10;
        const URG = 0x20;
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [
            (TcpFlags::SYN, 'S'),
            (TcpFlags::ACK, '.'),
            (TcpFlags::FIN, 'F'),
            (TcpFlags::RST, 'R'),
            (TcpFlags::PSH, 'P'),
            (TcpFlags::URG, 'U'),
        ];
        for (flag, c) in names {
            if self.contains(flag) {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    /// Header length in bytes, options included.
    pub data_offset: u8,
    pub flags: TcpFlags,
    pub window: u16,
    pub checksum: u16,
    pub urgent_ptr: u16,
    pub options: Vec<u8>,
}

const TCP_OPT_END: u8 = 0;
const TCP_OPT_NOP: u8 = 1;
const TCP_OPT_MSS: u8 = 2;

impl TcpHeader {
    pub fn new(src_port: u16, dst_port: u16, seq: u32, ack: u32, flags: TcpFlags) -> Self {
        TcpHeader {
            src_port,
            dst_port,
            seq,
            ack,
            data_offset: TCP_MIN_HEADER as u8,
            flags,
            window: 0,
            checksum: 0,
            urgent_ptr: 0,
            options: Vec::new(),
        }
    }

    /// MSS option value, if present. Other options are skipped.
    pub fn mss(&self) -> Option<u16> {
        let mut opts = self.options.as_slice();
        while let Some(&kind) = opts.first() {
            match kind {
                TCP_OPT_END => return None,
                TCP_OPT_NOP => opts = &opts[1..],
                _ => {
                    let len = *opts.get(1)? as usize;
                    if len < 2 || len > opts.len() {
                        return None;
                    }
                    if kind == TCP_OPT_MSS && len == 4 {
                        return Some(u16::from_be_bytes([opts[2], opts[3]]));
                    }
                    opts = &opts[len..];
                }
            }
        }
        None
    }

    /// Encoded MSS option block (4 bytes).
    pub fn mss_option(mss: u16) -> Vec<u8> {
        let [hi, lo] = mss.to_be_bytes();
        vec![TCP_OPT_MSS, 4, hi, lo]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdpHeader {
    pub src_port: u16,
    pub dst_port: u16,
    /// Header plus payload, in bytes.
    pub length: u16,
    /// Zero means "not computed" on receive; always computed on send.
    pub checksum: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    Tcp(TcpHeader),
    Udp(UdpHeader),
    /// Any protocol other than TCP or UDP; the payload holds everything after the IP header.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub ip: Ipv4Header,
    pub transport: Transport,
    pub payload: Vec<u8>,
    pub captured_at: Timestamp,
}

impl Packet {
    pub fn tcp(src: SocketAddrV4, dst: SocketAddrV4, header: TcpHeader, payload: Vec<u8>) -> Self {
        let tcp = TcpHeader {
            src_port: src.port(),
            dst_port: dst.port(),
            ..header
        };
        Packet {
            ip: Ipv4Header::new(*src.ip(), *dst.ip(), PROTO_TCP),
            transport: Transport::Tcp(tcp),
            payload,
            captured_at: Timestamp::ZERO,
        }
        .normalized()
    }

    pub fn udp(src: SocketAddrV4, dst: SocketAddrV4, payload: Vec<u8>) -> Self {
        Packet {
            ip: Ipv4Header::new(*src.ip(), *dst.ip(), PROTO_UDP),
            transport: Transport::Udp(UdpHeader {
                src_port: src.port(),
                dst_port: dst.port(),
                length: 0,
                checksum: 0,
            }),
            payload,
            captured_at: Timestamp::ZERO,
        }
        .normalized()
    }

    pub fn tcp_header(&self) -> Option<&TcpHeader> {
        match &self.transport {
            Transport::Tcp(t) => Some(t),
            _ => None,
        }
    }

    pub fn udp_header(&self) -> Option<&UdpHeader> {
        match &self.transport {
            Transport::Udp(u) => Some(u),
            _ => None,
        }
    }

    pub fn src(&self) -> Option<SocketAddrV4> {
        let port = match &self.transport {
            Transport::Tcp(t) => t.src_port,
            Transport::Udp(u) => u.src_port,
            Transport::Raw => return None,
        };
        Some(SocketAddrV4::new(self.ip.src_addr, port))
    }

    pub fn dst(&self) -> Option<SocketAddrV4> {
        let port = match &self.transport {
            Transport::Tcp(t) => t.dst_port,
            Transport::Udp(u) => u.dst_port,
            Transport::Raw => return None,
        };
        Some(SocketAddrV4::new(self.ip.dst_addr, port))
    }

    /// Same packet with every derived field (lengths, checksums) recomputed,
    /// i.e. exactly what [`parse_packet`] returns for [`serialize_packet`]'s output.
    pub fn normalized(mut self) -> Self {
        let (transport_bytes, checksum) = encode_transport(&self);
        self.ip.header_length = (IPV4_MIN_HEADER + self.ip.options.len()) as u8;
        self.ip.total_length = (self.ip.header_length as usize + transport_bytes) as u16;
        self.ip.version = 4;
        match &mut self.transport {
            Transport::Tcp(t) => {
                t.data_offset = (TCP_MIN_HEADER + t.options.len()) as u8;
                t.checksum = checksum;
            }
            Transport::Udp(u) => {
                u.length = (UDP_HEADER + self.payload.len()) as u16;
                u.checksum = checksum;
            }
            Transport::Raw => {}
        }
        self.ip.protocol = match self.transport {
            Transport::Tcp(_) => PROTO_TCP,
            Transport::Udp(_) => PROTO_UDP,
            Transport::Raw => self.ip.protocol,
        };
        let mut hdr = Vec::with_capacity(60);
        self.ip.encode(self.ip.total_length, &mut hdr);
        self.ip.header_checksum = u16::from_be_bytes([hdr[10], hdr[11]]);
        self
    }
}

fn tcp_segment_bytes(ip: &Ipv4Header, t: &TcpHeader, payload: &[u8]) -> Vec<u8> {
    let doff = TCP_MIN_HEADER + t.options.len();
    let mut seg = Vec::with_capacity(doff + payload.len());
    seg.extend_from_slice(&t.src_port.to_be_bytes());
    seg.extend_from_slice(&t.dst_port.to_be_bytes());
    seg.extend_from_slice(&t.seq.to_be_bytes());
    seg.extend_from_slice(&t.ack.to_be_bytes());
    seg.push(((doff / 4) as u8) << 4);
    seg.push(t.flags.bits());
    seg.extend_from_slice(&t.window.to_be_bytes());
    seg.extend_from_slice(&[0, 0]);
    seg.extend_from_slice(&t.urgent_ptr.to_be_bytes());
    seg.extend_from_slice(&t.options);
    seg.extend_from_slice(payload);
    let c = transport_checksum(ip.src_addr, ip.dst_addr, PROTO_TCP, &seg);
    seg[16..18].copy_from_slice(&c.to_be_bytes());
    seg
}

fn udp_datagram_bytes(ip: &Ipv4Header, u: &UdpHeader, payload: &[u8]) -> Vec<u8> {
    let len = (UDP_HEADER + payload.len()) as u16;
    let mut seg = Vec::with_capacity(len as usize);
    seg.extend_from_slice(&u.src_port.to_be_bytes());
    seg.extend_from_slice(&u.dst_port.to_be_bytes());
    seg.extend_from_slice(&len.to_be_bytes());
    seg.extend_from_slice(&[0, 0]);
    seg.extend_from_slice(payload);
    let mut c = transport_checksum(ip.src_addr, ip.dst_addr, PROTO_UDP, &seg);
    if c == 0 {
        c = 0xffff;
    }
    seg[6..8].copy_from_slice(&c.to_be_bytes());
    seg
}

fn encode_transport(p: &Packet) -> (usize, u16) {
    match &p.transport {
        Transport::Tcp(t) => {
            let seg = tcp_segment_bytes(&p.ip, t, &p.payload);
            (seg.len(), u16::from_be_bytes([seg[16], seg[17]]))
        }
        Transport::Udp(u) => {
            let seg = udp_datagram_bytes(&p.ip, u, &p.payload);
            (seg.len(), u16::from_be_bytes([seg[6], seg[7]]))
        }
        Transport::Raw => (p.payload.len(), 0),
    }
}

fn need(bytes: &[u8], n: usize) -> Result<(), PacketError> {
    if bytes.len() < n {
        Err(PacketError::Truncated {
            needed: n,
            available: bytes.len(),
        })
    } else {
        Ok(())
    }
}

/// Parses one raw IPv4 packet.
///
/// Bytes beyond the IP total length (link-layer padding) are ignored.
pub fn parse_packet(bytes: &[u8]) -> Result<Packet, PacketError> {
    need(bytes, IPV4_MIN_HEADER)?;
    let version = bytes[0] >> 4;
    if version != 4 {
        return Err(PacketError::UnsupportedVersion(version));
    }
    let hlen = usize::from(bytes[0] & 0x0f) * 4;
    if hlen < IPV4_MIN_HEADER {
        return Err(PacketError::Malformed("IPv4 header length below 20"));
    }
    need(bytes, hlen)?;
    let total_length = u16::from_be_bytes([bytes[2], bytes[3]]);
    let total = usize::from(total_length);
    if total < hlen {
        return Err(PacketError::Malformed("IPv4 total length below header length"));
    }
    need(bytes, total)?;
    let flags_fragment = u16::from_be_bytes([bytes[6], bytes[7]]);
    if flags_fragment & (IP_FLAG_MF | IP_FRAG_OFFSET) != 0 {
        return Err(PacketError::Fragmented);
    }
    let ip = Ipv4Header {
        version,
        header_length: hlen as u8,
        dscp_ecn: bytes[1],
        total_length,
        identification: u16::from_be_bytes([bytes[4], bytes[5]]),
        flags_fragment,
        ttl: bytes[8],
        protocol: bytes[9],
        header_checksum: u16::from_be_bytes([bytes[10], bytes[11]]),
        src_addr: Ipv4Addr::new(bytes[12], bytes[13], bytes[14], bytes[15]),
        dst_addr: Ipv4Addr::new(bytes[16], bytes[17], bytes[18], bytes[19]),
        options: bytes[IPV4_MIN_HEADER..hlen].to_vec(),
    };
    let mut bad = None;
    if internet_checksum(&bytes[..hlen]) != 0 {
        bad = Some(ChecksumKind::Ip);
    }
    let seg = &bytes[hlen..total];
    let (transport, payload) = match ip.protocol {
        PROTO_TCP => {
            need(seg, TCP_MIN_HEADER)?;
            let doff = usize::from(seg[12] >> 4) * 4;
            if doff < TCP_MIN_HEADER {
                return Err(PacketError::Malformed("TCP data offset below 20"));
            }
            need(seg, doff)?;
            let header = TcpHeader {
                src_port: u16::from_be_bytes([seg[0], seg[1]]),
                dst_port: u16::from_be_bytes([seg[2], seg[3]]),
                seq: u32::from_be_bytes([seg[4], seg[5], seg[6], seg[7]]),
                ack: u32::from_be_bytes([seg[8], seg[9], seg[10], seg[11]]),
                data_offset: doff as u8,
                flags: TcpFlags::from_bits_retain(seg[13]),
                window: u16::from_be_bytes([seg[14], seg[15]]),
                checksum: u16::from_be_bytes([seg[16], seg[17]]),
                urgent_ptr: u16::from_be_bytes([seg[18], seg[19]]),
                options: seg[TCP_MIN_HEADER..doff].to_vec(),
            };
            if bad.is_none()
                && transport_checksum(ip.src_addr, ip.dst_addr, PROTO_TCP, seg) != 0
            {
                bad = Some(ChecksumKind::Tcp);
            }
            (Transport::Tcp(header), seg[doff..].to_vec())
        }
        PROTO_UDP => {
            need(seg, UDP_HEADER)?;
            let length = u16::from_be_bytes([seg[4], seg[5]]);
            let len = usize::from(length);
            if len < UDP_HEADER {
                return Err(PacketError::Malformed("UDP length below 8"));
            }
            need(seg, len)?;
            if len != seg.len() {
                return Err(PacketError::Malformed("UDP length disagrees with IP total length"));
            }
            let header = UdpHeader {
                src_port: u16::from_be_bytes([seg[0], seg[1]]),
                dst_port: u16::from_be_bytes([seg[2], seg[3]]),
                length,
                checksum: u16::from_be_bytes([seg[6], seg[7]]),
            };
            if bad.is_none()
                && header.checksum != 0
                && transport_checksum(ip.src_addr, ip.dst_addr, PROTO_UDP, seg) != 0
            {
                bad = Some(ChecksumKind::Udp);
            }
            (Transport::Udp(header), seg[UDP_HEADER..].to_vec())
        }
        _ => (Transport::Raw, seg.to_vec()),
    };
    let packet = Packet {
        ip,
        transport,
        payload,
        captured_at: Timestamp::ZERO,
    };
    match bad {
        Some(kind) => Err(PacketError::BadChecksum {
            kind,
            packet: Box::new(packet),
        }),
        None => Ok(packet),
    }
}

/// Serializes `p` with freshly computed lengths and checksums.
pub fn serialize_packet(p: &Packet, mtu: usize) -> Result<Vec<u8>, PacketError> {
    if p.ip.options.len() > 40 || p.ip.options.len() % 4 != 0 {
        return Err(PacketError::InvalidField("IP options must be a multiple of 4, at most 40"));
    }
    let seg = match &p.transport {
        Transport::Tcp(t) => {
            if t.options.len() > 40 || t.options.len() % 4 != 0 {
                return Err(PacketError::InvalidField(
                    "TCP options must be a multiple of 4, at most 40",
                ));
            }
            tcp_segment_bytes(&p.ip, t, &p.payload)
        }
        Transport::Udp(u) => udp_datagram_bytes(&p.ip, u, &p.payload),
        Transport::Raw => p.payload.clone(),
    };
    let hlen = IPV4_MIN_HEADER + p.ip.options.len();
    let size = hlen + seg.len();
    if size > mtu || size > usize::from(u16::MAX) {
        return Err(PacketError::OversizedPacket { size, mtu });
    }
    let mut ip = p.ip.clone();
    ip.protocol = match p.transport {
        Transport::Tcp(_) => PROTO_TCP,
        Transport::Udp(_) => PROTO_UDP,
        Transport::Raw => p.ip.protocol,
    };
    let mut out = Vec::with_capacity(size);
    ip.encode(size as u16, &mut out);
    out.extend_from_slice(&seg);
    Ok(out)
}

/// Largest transport payload that fits in one packet of `mtu` bytes.
pub fn max_payload(mtu: usize, transport_header: usize) -> usize {
    mtu.saturating_sub(IPV4_MIN_HEADER + transport_header)
}
