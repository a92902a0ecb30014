//! Log framing: `len:u32 | payload | crc32(payload):u32`, little-endian.

use crc32fast::hash;

pub(crate) const OVERHEAD: usize = 8;

pub(crate) fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + OVERHEAD);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&hash(payload).to_le_bytes());
    out
}

#[derive(Debug, PartialEq, Eq)]
pub(crate) enum Scan<'a> {
    /// A whole, valid record and the offset just past it.
    Record(&'a [u8], usize),
    /// The bytes from the offset on cannot be a complete valid record and
    /// nothing follows them: an interrupted append.
    TornTail,
    /// A checksum failure with more data behind it.
    Corrupt,
    End,
}

pub(crate) fn next(bytes: &[u8], at: usize) -> Scan<'_> {
    let rest = &bytes[at..];
    if rest.is_empty() {
        return Scan::End;
    }
    if rest.len() < 4 {
        return Scan::TornTail;
    }
    let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let Some(total) = len.checked_add(OVERHEAD) else {
        return Scan::Corrupt;
    };
    if rest.len() < total {
        return Scan::TornTail;
    }
    let payload = &rest[4..4 + len];
    let stored = u32::from_le_bytes(rest[4 + len..total].try_into().unwrap());
    if stored == hash(payload) {
        Scan::Record(payload, at + total)
    } else if rest.len() == total {
        Scan::TornTail
    } else {
        Scan::Corrupt
    }
}
