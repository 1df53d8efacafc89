//! Just enough DNS to answer, sniff and compare A-record lookups.

use simple_dns::rdata::{RData, A};
use simple_dns::{Name, Packet as DnsPacket, PacketFlag, Question, ResourceRecord, CLASS, QCLASS, QTYPE, RCODE, TYPE};
use std::net::Ipv4Addr;

pub const DNS_PORT: u16 = 53;
pub const QTYPE_A: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsQuery {
    pub id: u16,
    pub name: String,
    pub qtype: u16,
}

/// Response code subset that matters for classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DnsRcode {
    NoError,
    NxDomain,
    Other(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsAnswer {
    pub id: u16,
    pub name: String,
    pub rcode: DnsRcode,
    /// A records in the answer section, in wire order.
    pub addrs: Vec<Ipv4Addr>,
}

fn normalize(name: &str) -> String {
    name.trim_end_matches('.').to_ascii_lowercase()
}

/// Parses a DNS query (QR bit clear, at least one question).
pub fn parse_query(payload: &[u8]) -> Option<DnsQuery> {
    let p = DnsPacket::parse(payload).ok()?;
    if p.has_flags(PacketFlag::RESPONSE) {
        return None;
    }
    let q = p.questions.first()?;
    Some(DnsQuery {
        id: p.id(),
        name: normalize(&q.qname.to_string()),
        qtype: u16::from(q.qtype),
    })
}

/// Parses a DNS response (QR bit set).
pub fn parse_response(payload: &[u8]) -> Option<DnsAnswer> {
    let p = DnsPacket::parse(payload).ok()?;
    if !p.has_flags(PacketFlag::RESPONSE) {
        return None;
    }
    let name = p
        .questions
        .first()
        .map(|q| normalize(&q.qname.to_string()))
        .unwrap_or_default();
    let rcode = match p.rcode() {
        RCODE::NoError => DnsRcode::NoError,
        RCODE::NameError => DnsRcode::NxDomain,
        other => DnsRcode::Other(other as u8),
    };
    let addrs = p
        .answers
        .iter()
        .filter_map(|rr| match &rr.rdata {
            RData::A(a) => Some(Ipv4Addr::from(a.address)),
            _ => None,
        })
        .collect();
    Some(DnsAnswer {
        id: p.id(),
        name,
        rcode,
        addrs,
    })
}

/// Builds a recursive A query for `name`.
pub fn build_query(id: u16, name: &str) -> Option<Vec<u8>> {
    let mut p = DnsPacket::new_query(id);
    p.set_flags(PacketFlag::RECURSION_DESIRED);
    p.questions.push(Question::new(
        Name::new(name).ok()?,
        QTYPE::TYPE(TYPE::A),
        QCLASS::CLASS(CLASS::IN),
        false,
    ));
    p.build_bytes_vec().ok()
}

/// Builds a response to `query` carrying `addrs` as A records, or NXDOMAIN when `addrs` is `None`.
pub fn build_response(query: &DnsQuery, addrs: Option<&[Ipv4Addr]>, ttl: u32) -> Option<Vec<u8>> {
    let mut p = DnsPacket::new_reply(query.id);
    p.set_flags(PacketFlag::RECURSION_DESIRED | PacketFlag::RECURSION_AVAILABLE);
    let qname = Name::new(&query.name).ok()?;
    p.questions.push(Question::new(
        qname.clone(),
        QTYPE::try_from(query.qtype).ok()?,
        QCLASS::CLASS(CLASS::IN),
        false,
    ));
    match addrs {
        None => *p.rcode_mut() = RCODE::NameError,
        Some(addrs) => {
            if query.qtype == QTYPE_A {
                for a in addrs {
                    p.answers.push(ResourceRecord::new(
                        qname.clone(),
                        CLASS::IN,
                        ttl,
                        RData::A(A::from(*a)),
                    ));
                }
            }
        }
    }
    p.build_bytes_vec().ok()
}

/// Transaction id of a DNS message, if long enough to have one.
pub fn message_id(payload: &[u8]) -> Option<u16> {
    Some(u16::from_be_bytes([*payload.first()?, *payload.get(1)?]))
}

/// Rewrites the transaction id in place.
pub fn set_message_id(payload: &mut [u8], id: u16) {
    if payload.len() >= 2 {
        payload[..2].copy_from_slice(&id.to_be_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_answer_round_trip() {
        let q = build_query(0x1234, "Example.com").unwrap();
        let parsed = parse_query(&q).unwrap();
        assert_eq!(parsed, DnsQuery { id: 0x1234, name: "example.com".into(), qtype: QTYPE_A });
        assert!(parse_response(&q).is_none());

        let addr: Ipv4Addr = "93.184.216.34".parse().unwrap();
        let r = build_response(&parsed, Some(&[addr]), 300).unwrap();
        let ans = parse_response(&r).unwrap();
        assert_eq!(ans.id, 0x1234);
        assert_eq!(ans.rcode, DnsRcode::NoError);
        assert_eq!(ans.addrs, vec![addr]);
        assert_eq!(ans.name, "example.com");
        assert!(parse_query(&r).is_none());
    }

    #[test]
    fn nxdomain_response() {
        let q = parse_query(&build_query(7, "nope.invalid").unwrap()).unwrap();
        let ans = parse_response(&build_response(&q, None, 0).unwrap()).unwrap();
        assert_eq!(ans.rcode, DnsRcode::NxDomain);
        assert!(ans.addrs.is_empty());
    }

    #[test]
    fn garbage_is_not_dns() {
        assert!(parse_query(b"\x01").is_none());
        assert!(parse_response(&[0xff; 5]).is_none());
    }

    #[test]
    fn id_rewrite() {
        let mut q = build_query(1, "a.example").unwrap();
        set_message_id(&mut q, 0xabcd);
        assert_eq!(message_id(&q), Some(0xabcd));
        assert_eq!(parse_query(&q).unwrap().id, 0xabcd);
    }
}
