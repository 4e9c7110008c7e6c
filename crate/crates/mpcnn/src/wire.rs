//! Wire format shared by the in-process and TCP transports.
//!
//! Frame layout: `[4-byte BE payload length][1-byte kind][8-byte session id]`
//! `[4-byte round tag][payload]`, where the payload is a 4-byte count followed
//! by length-prefixed big-endian magnitudes. Shares are canonical residues, so
//! every transported integer is non-negative.

use crate::{Error, Result};
use num_bigint::BigUint;

pub const HEADER_LEN: usize = 4 + 1 + 8 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    Open = 1,
    Deal = 2,
    Gather = 3,
    Commit = 4,
    Reveal = 5,
    Cipher = 6,
    DecShare = 7,
    Sync = 8,
}

impl FrameKind {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => FrameKind::Open,
            2 => FrameKind::Deal,
            3 => FrameKind::Gather,
            4 => FrameKind::Commit,
            5 => FrameKind::Reveal,
            6 => FrameKind::Cipher,
            7 => FrameKind::DecShare,
            8 => FrameKind::Sync,
            other => return Err(Error::Codec(format!("unknown frame kind {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub session: u64,
    pub round: u32,
    pub ints: Vec<BigUint>,
}

impl Frame {
    pub fn new(kind: FrameKind, session: u64, round: u32, ints: Vec<BigUint>) -> Self {
        Frame { kind, session, round, ints }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = encode_ints(&self.ints);
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.session.to_be_bytes());
        out.extend_from_slice(&self.round.to_be_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Codec("frame shorter than header".into()));
        }
        let payload_len = u32::from_be_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let kind = FrameKind::from_u8(bytes[4])?;
        let session = u64::from_be_bytes(bytes[5..13].try_into().unwrap());
        let round = u32::from_be_bytes(bytes[13..17].try_into().unwrap());
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != payload_len {
            return Err(Error::Codec(format!(
                "payload length mismatch: header says {payload_len}, got {}",
                payload.len()
            )));
        }
        let ints = decode_ints(payload)?;
        Ok(Frame { kind, session, round, ints })
    }
}

/// `[4-byte count][entries: 4-byte length + big-endian magnitude]`.
pub fn encode_ints(ints: &[BigUint]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(ints.len() as u32).to_be_bytes());
    for v in ints {
        let mag = v.to_bytes_be();
        out.extend_from_slice(&(mag.len() as u32).to_be_bytes());
        out.extend_from_slice(&mag);
    }
    out
}

pub fn decode_ints(bytes: &[u8]) -> Result<Vec<BigUint>> {
    if bytes.len() < 4 {
        return Err(Error::Codec("integer list shorter than count".into()));
    }
    let count = u32::from_be_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let mut ints = Vec::with_capacity(count);
    let mut at = 4usize;
    for _ in 0..count {
        if bytes.len() < at + 4 {
            return Err(Error::Codec("truncated integer length".into()));
        }
        let len = u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        at += 4;
        if bytes.len() < at + len {
            return Err(Error::Codec("truncated integer magnitude".into()));
        }
        ints.push(BigUint::from_bytes_be(&bytes[at..at + len]));
        at += len;
    }
    if at != bytes.len() {
        return Err(Error::Codec("trailing bytes after integer list".into()));
    }
    Ok(ints)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip() {
        let f = Frame::new(
            FrameKind::Open,
            0xDEADBEEF,
            7,
            vec![BigUint::from(0u32), BigUint::from(1u32), BigUint::from(123456789012345u64)],
        );
        let bytes = f.encode();
        // header: 4-byte length, kind byte, 8-byte session, 4-byte round
        assert_eq!(bytes[4], FrameKind::Open as u8);
        let decoded = Frame::decode(&bytes).unwrap();
        assert_eq!(decoded, f);
    }

    #[test]
    fn zero_roundtrips_as_single_byte() {
        let enc = encode_ints(&[BigUint::from(0u32)]);
        // count=1, len=1, single zero magnitude byte
        assert_eq!(enc, vec![0, 0, 0, 1, 0, 0, 0, 1, 0]);
        assert_eq!(decode_ints(&enc).unwrap(), vec![BigUint::from(0u32)]);
    }

    #[test]
    fn rejects_truncated() {
        let f = Frame::new(FrameKind::Open, 1, 1, vec![BigUint::from(300u32)]);
        let mut bytes = f.encode();
        bytes.truncate(bytes.len() - 1);
        assert!(Frame::decode(&bytes).is_err());
    }
}
