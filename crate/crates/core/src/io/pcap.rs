//! Classic libpcap files (not pcapng).
//!
//! Reading accepts both byte orders, microsecond and nanosecond magics, and
//! raw-IP or Ethernet link types. Ethernet frames are unwrapped (802.1Q tags
//! included); non-IPv4 frames are skipped. Writing always produces
//! little-endian, microsecond, LINKTYPE_RAW files.

use super::trace::{Direction, TraceEvent};
use crate::time::Timestamp;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC_US: u32 = 0xa1b2_c3d4;
const MAGIC_NS: u32 = 0xa1b2_3c4d;

pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW: u32 = 101;
pub const LINKTYPE_IPV4: u32 = 228;
/// BSD DLT_RAW values that some writers still emit.
const DLT_RAW_ALT: [u32; 2] = [12, 14];

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88a8;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("bad pcap magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
    #[error("pcap global header truncated")]
    TruncatedHeader,
    /// Record `index` is cut short; `partial` holds every event before it.
    #[error("pcap record {index} truncated")]
    TruncatedRecord {
        index: usize,
        partial: Vec<TraceEvent>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy)]
struct Format {
    swapped: bool,
    nanos: bool,
    linktype: u32,
}

impl Format {
    fn u32(&self, b: [u8; 4]) -> u32 {
        if self.swapped {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        }
    }
}

/// Reads as many bytes as available into `buf`; returns the count.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

/// Strips the Ethernet header; `None` for non-IPv4 frames.
fn unwrap_ethernet(frame: &[u8]) -> Option<&[u8]> {
    let mut off = 12;
    loop {
        let et = u16::from_be_bytes([*frame.get(off)?, *frame.get(off + 1)?]);
        match et {
            ETHERTYPE_VLAN | ETHERTYPE_QINQ => off += 4,
            ETHERTYPE_IPV4 => return frame.get(off + 2..),
            _ => return None,
        }
    }
}

pub fn read_pcap_from<R: Read>(mut r: R) -> Result<Vec<TraceEvent>, PcapError> {
    let mut gh = [0u8; 24];
    let n = read_full(&mut r, &mut gh)?;
    if n < 4 {
        return Err(PcapError::TruncatedHeader);
    }
    let le = u32::from_le_bytes([gh[0], gh[1], gh[2], gh[3]]);
    let (swapped, nanos) = match le {
        MAGIC_US => (false, false),
        MAGIC_NS => (false, true),
        _ => match u32::from_be_bytes([gh[0], gh[1], gh[2], gh[3]]) {
            MAGIC_US => (true, false),
            MAGIC_NS => (true, true),
            _ => return Err(PcapError::BadMagic(le)),
        },
    };
    if n < 24 {
        return Err(PcapError::TruncatedHeader);
    }
    let mut fmt = Format { swapped, nanos, linktype: 0 };
    fmt.linktype = fmt.u32([gh[20], gh[21], gh[22], gh[23]]) & 0x0fff_ffff;
    let raw = fmt.linktype == LINKTYPE_RAW
        || fmt.linktype == LINKTYPE_IPV4
        || DLT_RAW_ALT.contains(&fmt.linktype);
    if !raw && fmt.linktype != LINKTYPE_ETHERNET {
        return Err(PcapError::UnsupportedLinkType(fmt.linktype));
    }

    let mut events = Vec::new();
    let mut index = 0;
    loop {
        let mut rh = [0u8; 16];
        let got = read_full(&mut r, &mut rh)?;
        if got == 0 {
            break;
        }
        if got < 16 {
            return Err(PcapError::TruncatedRecord { index, partial: events });
        }
        let secs = u64::from(fmt.u32([rh[0], rh[1], rh[2], rh[3]]));
        let frac = u64::from(fmt.u32([rh[4], rh[5], rh[6], rh[7]]));
        let incl = fmt.u32([rh[8], rh[9], rh[10], rh[11]]) as usize;
        let mut data = vec![0u8; incl];
        if read_full(&mut r, &mut data)? < incl {
            return Err(PcapError::TruncatedRecord { index, partial: events });
        }
        let micros = if fmt.nanos { frac / 1000 } else { frac };
        let packet = if raw {
            Some(data)
        } else {
            unwrap_ethernet(&data).map(<[u8]>::to_vec)
        };
        if let Some(packet) = packet {
            events.push(TraceEvent {
                timestamp: Timestamp(secs * 1_000_000 + micros),
                direction: Direction::AppToNet,
                app_label: String::new(),
                packet,
            });
        }
        index += 1;
    }
    Ok(events)
}

pub fn read_pcap(path: &Path) -> Result<Vec<TraceEvent>, PcapError> {
    let f = std::fs::File::open(path)?;
    read_pcap_from(std::io::BufReader::new(f))
}

/// Writes raw-IP records; the timestamp is split into seconds and microseconds.
pub fn write_pcap_to<'a, W, I>(mut w: W, packets: I) -> Result<(), PcapError>
where
    W: Write,
    I: IntoIterator<Item = (Timestamp, &'a [u8])>,
{
    w.write_all(&MAGIC_US.to_le_bytes())?;
    w.write_all(&2u16.to_le_bytes())?;
    w.write_all(&4u16.to_le_bytes())?;
    w.write_all(&0i32.to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    w.write_all(&65535u32.to_le_bytes())?;
    w.write_all(&LINKTYPE_RAW.to_le_bytes())?;
    for (ts, bytes) in packets {
        w.write_all(&((ts.0 / 1_000_000) as u32).to_le_bytes())?;
        w.write_all(&((ts.0 % 1_000_000) as u32).to_le_bytes())?;
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pcap(path: &Path, events: &[TraceEvent]) -> Result<(), PcapError> {
    let f = std::fs::File::create(path)?;
    write_pcap_to(
        std::io::BufWriter::new(f),
        events.iter().map(|e| (e.timestamp, e.packet.as_slice())),
    )
}
