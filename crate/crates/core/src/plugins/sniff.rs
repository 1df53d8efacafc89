//! On-path name discovery: DNS answers, TLS SNI, QUIC long headers.

use crate::io::dns::{self, DNS_PORT};
use crate::packet::Packet;
use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use tls_parser::{parse_tls_extensions, parse_tls_plaintext, SNIType, TlsExtension, TlsMessage, TlsMessageHandshake};

/// Server name from a TLS ClientHello at the start of `payload`.
pub fn tls_sni(payload: &[u8]) -> Option<String> {
    let (_, record) = parse_tls_plaintext(payload).ok()?;
    for msg in record.msg {
        let TlsMessage::Handshake(TlsMessageHandshake::ClientHello(hello)) = msg else {
            continue;
        };
        let (_, exts) = parse_tls_extensions(hello.ext?).ok()?;
        for ext in exts {
            if let TlsExtension::SNI(names) = ext {
                return names
                    .iter()
                    .find(|(t, _)| *t == SNIType::HostName)
                    .and_then(|(_, n)| std::str::from_utf8(n).ok())
                    .map(|s| s.trim_end_matches('.').to_ascii_lowercase());
            }
        }
    }
    None
}

/// Long-header form bit set and a full 4-byte version field present.
pub fn is_quic_long_header(payload: &[u8]) -> bool {
    payload.len() >= 5 && payload[0] & 0x80 != 0
}

/// Address → name, learned from DNS answers seen on the wire.
#[derive(Debug, Default, Clone)]
pub struct DnsCache {
    names: BTreeMap<Ipv4Addr, String>,
}

impl DnsCache {
    /// Learns from `p` if it is a DNS answer coming back to the app.
    pub fn observe(&mut self, p: &Packet) {
        let Some(u) = p.udp_header() else { return };
        if u.src_port != DNS_PORT {
            return;
        }
        if let Some(ans) = dns::parse_response(&p.payload) {
            for a in ans.addrs {
                self.names.insert(a, ans.name.clone());
            }
        }
    }

    pub fn lookup(&self, addr: Ipv4Addr) -> Option<&str> {
        self.names.get(&addr).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Minimal TLS 1.2-framed ClientHello carrying only an SNI extension.
/// Used to build test traffic.
pub fn client_hello(server_name: &str) -> Vec<u8> {
    let name = server_name.as_bytes();
    let mut sni = Vec::new();
    sni.extend_from_slice(&((name.len() + 3) as u16).to_be_bytes());
    sni.push(0);
    sni.extend_from_slice(&(name.len() as u16).to_be_bytes());
    sni.extend_from_slice(name);
    let mut ext = Vec::new();
    ext.extend_from_slice(&0u16.to_be_bytes());
    ext.extend_from_slice(&(sni.len() as u16).to_be_bytes());
    ext.extend_from_slice(&sni);

    let mut body = vec![0x03, 0x03];
    body.extend_from_slice(&[0x11; 32]);
    body.push(0);
    body.extend_from_slice(&[0x00, 0x02, 0x13, 0x01]);
    body.extend_from_slice(&[0x01, 0x00]);
    body.extend_from_slice(&(ext.len() as u16).to_be_bytes());
    body.extend_from_slice(&ext);

    let mut hs = vec![0x01];
    hs.extend_from_slice(&(body.len() as u32).to_be_bytes()[1..]);
    hs.extend_from_slice(&body);

    let mut rec = vec![0x16, 0x03, 0x01];
    rec.extend_from_slice(&(hs.len() as u16).to_be_bytes());
    rec.extend_from_slice(&hs);
    rec
}

/// A QUIC Initial-shaped datagram: long header, version 1, padded.
pub fn quic_initial(len: usize) -> Vec<u8> {
    let mut p = vec![0xc3, 0x00, 0x00, 0x00, 0x01];
    p.resize(len.max(5), 0);
    p
}
