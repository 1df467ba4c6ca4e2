//! Compressed ASCII form of run-length counts used by COCO and YouTube-VIS
//! tooling.
//!
//! Each count is delta-coded against the count two positions earlier (from the
//! fourth count on), then written as little-endian 5-bit groups offset by 48,
//! with bit 0x20 flagging a continuation group and bit 0x10 of the last group
//! carrying the sign.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RleStringError {
    #[error("byte {byte:#04x} at position {position} is not a valid RLE character")]
    BadByte { position: usize, byte: u8 },
    #[error("string ends inside a continued value")]
    Truncated,
    #[error("value {value} at count {index} is out of range for a run length")]
    OutOfRange { index: usize, value: i64 },
}

pub fn encode_counts(counts: &[u32]) -> String {
    let mut out = String::with_capacity(counts.len() * 2);
    for (i, &c) in counts.iter().enumerate() {
        let mut x = i64::from(c);
        if i > 2 {
            x -= i64::from(counts[i - 2]);
        }
        loop {
            let mut group = (x & 0x1f) as u8;
            x >>= 5;
            let more = if group & 0x10 != 0 { x != -1 } else { x != 0 };
            if more {
                group |= 0x20;
            }
            out.push(char::from(group + 48));
            if !more {
                break;
            }
        }
    }
    out
}

pub fn decode_counts(text: &str) -> Result<Vec<u32>, RleStringError> {
    let bytes = text.as_bytes();
    let mut counts: Vec<u32> = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let mut x: i64 = 0;
        let mut shift = 0u32;
        loop {
            let Some(&byte) = bytes.get(pos) else {
                return Err(RleStringError::Truncated);
            };
            if !(48..48 + 64).contains(&byte) {
                return Err(RleStringError::BadByte {
                    position: pos,
                    byte,
                });
            }
            if shift > 55 {
                return Err(RleStringError::OutOfRange {
                    index: counts.len(),
                    value: x,
                });
            }
            let group = i64::from(byte - 48);
            pos += 1;
            x |= (group & 0x1f) << shift;
            shift += 5;
            if group & 0x20 == 0 {
                if group & 0x10 != 0 {
                    x |= -1i64 << shift;
                }
                break;
            }
        }
        if counts.len() > 2 {
            x += i64::from(counts[counts.len() - 2]);
        }
        let value = u32::try_from(x).map_err(|_| RleStringError::OutOfRange {
            index: counts.len(),
            value: x,
        })?;
        counts.push(value);
    }
    Ok(counts)
}
