//! RFC 1071 Internet checksum.

use std::net::Ipv4Addr;

/// Adds `data` as big-endian 16-bit words to a running 32-bit sum.
/// An odd trailing octet is padded with zero.
pub(crate) fn add_words(mut sum: u32, data: &[u8]) -> u32 {
    let mut chunks = data.chunks_exact(2);
    for w in &mut chunks {
        sum = sum.wrapping_add(u32::from(u16::from_be_bytes([w[0], w[1]])));
    }
    if let [last] = chunks.remainder() {
        sum = sum.wrapping_add(u32::from(*last) << 8);
    }
    sum
}

/// Folds carries back into the low 16 bits and complements.
pub(crate) fn fold(mut sum: u32) -> u16 {
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// One's-complement of the one's-complement sum of 16-bit words.
pub fn internet_checksum(data: &[u8]) -> u16 {
    fold(add_words(0, data))
}

/// Checksum over the IPv4 pseudo-header followed by `segment`.
pub fn transport_checksum(src: Ipv4Addr, dst: Ipv4Addr, protocol: u8, segment: &[u8]) -> u16 {
    let mut sum = add_words(0, &src.octets());
    sum = add_words(sum, &dst.octets());
    sum = sum.wrapping_add(u32::from(protocol));
    sum = sum.wrapping_add(segment.len() as u32);
    fold(add_words(sum, segment))
}
