//! Packed bit strings.
//!
//! Bits are stored most-significant-bit first inside each byte and the
//! trailing pad bits of the last byte are always zero, so the backing bytes
//! are directly the wire representation.

use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum BitError {
    #[error("bit strings differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("error rate of an empty bit string is undefined")]
    Empty,
    #[error("{bits} bits need {expected} bytes, got {actual}")]
    ByteCount {
        bits: usize,
        expected: usize,
        actual: usize,
    },
    #[error("pad bits after bit {bits} are not zero")]
    NonZeroPadding { bits: usize },
    #[error("range {start}..{end} out of bounds for {len} bits")]
    OutOfRange { start: usize, end: usize, len: usize },
}

#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct BitString {
    bytes: Vec<u8>,
    len: usize,
}

/// Bytes needed to hold `bits` bits.
pub const fn byte_len(bits: usize) -> usize {
    bits.div_ceil(8)
}

impl BitString {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(bits: usize) -> Self {
        Self {
            bytes: Vec::with_capacity(byte_len(bits)),
            len: 0,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            bytes: alloc::vec![0; byte_len(len)],
            len,
        }
    }

    /// Wraps packed MSB-first bytes carrying `len` bits.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self, BitError> {
        let expected = byte_len(len);
        if bytes.len() != expected {
            return Err(BitError::ByteCount {
                bits: len,
                expected,
                actual: bytes.len(),
            });
        }
        let pad = expected * 8 - len;
        if pad > 0 && bytes[expected - 1] & ((1u8 << pad) - 1) != 0 {
            return Err(BitError::NonZeroPadding { bits: len });
        }
        Ok(Self {
            bytes: bytes.to_vec(),
            len,
        })
    }

    /// Takes the first `len` bits of `bytes`, clearing whatever follows.
    pub fn from_bytes_truncated(bytes: &[u8], len: usize) -> Result<Self, BitError> {
        let needed = byte_len(len);
        if bytes.len() < needed {
            return Err(BitError::ByteCount {
                bits: len,
                expected: needed,
                actual: bytes.len(),
            });
        }
        let mut out = Self {
            bytes: bytes[..needed].to_vec(),
            len,
        };
        out.clear_padding();
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Packed bytes, MSB-first, zero padded.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get(&self, index: usize) -> Option<bool> {
        (index < self.len).then(|| self.bit(index))
    }

    fn bit(&self, index: usize) -> bool {
        self.bytes[index / 8] & (0x80 >> (index % 8)) != 0
    }

    pub fn set(&mut self, index: usize, value: bool) {
        assert!(index < self.len, "bit index {index} out of range");
        let mask = 0x80 >> (index % 8);
        if value {
            self.bytes[index / 8] |= mask;
        } else {
            self.bytes[index / 8] &= !mask;
        }
    }

    pub fn push(&mut self, value: bool) {
        if self.len.is_multiple_of(8) {
            self.bytes.push(0);
        }
        self.len += 1;
        if value {
            let i = self.len - 1;
            self.bytes[i / 8] |= 0x80 >> (i % 8);
        }
    }

    pub fn extend_from(&mut self, other: &BitString) {
        for b in other.iter() {
            self.push(b);
        }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.bit(i))
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Copy of bits `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<BitString, BitError> {
        if start > end || end > self.len {
            return Err(BitError::OutOfRange {
                start,
                end,
                len: self.len,
            });
        }
        Ok((start..end).map(|i| self.bit(i)).collect())
    }

    /// Drops everything past the first `len` bits.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        self.len = len;
        self.bytes.truncate(byte_len(len));
        self.clear_padding();
    }

    fn clear_padding(&mut self) {
        let pad = self.bytes.len() * 8 - self.len;
        if pad > 0 {
            let last = self.bytes.len() - 1;
            self.bytes[last] &= !((1u8 << pad) - 1);
        }
    }

    pub fn xor(&self, other: &BitString) -> Result<BitString, BitError> {
        xor(self, other)
    }

    pub fn hamming_distance(&self, other: &BitString) -> Result<usize, BitError> {
        if self.len != other.len {
            return Err(BitError::LengthMismatch {
                left: self.len,
                right: other.len,
            });
        }
        Ok(self
            .bytes
            .iter()
            .zip(&other.bytes)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum())
    }
}

/// Bitwise XOR of two equal-length strings.
pub fn xor(a: &BitString, b: &BitString) -> Result<BitString, BitError> {
    if a.len != b.len {
        return Err(BitError::LengthMismatch {
            left: a.len,
            right: b.len,
        });
    }
    Ok(BitString {
        bytes: a.bytes.iter().zip(&b.bytes).map(|(x, y)| x ^ y).collect(),
        len: a.len,
    })
}

/// Fraction of positions at which `a` and `b` differ.
pub fn hamming_fraction(a: &BitString, b: &BitString) -> Result<f64, BitError> {
    let distance = a.hamming_distance(b)?;
    if a.is_empty() {
        return Err(BitError::Empty);
    }
    Ok(distance as f64 / a.len as f64)
}

impl FromIterator<bool> for BitString {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        let iter = iter.into_iter();
        let mut out = BitString::with_capacity(iter.size_hint().0);
        for b in iter {
            out.push(b);
        }
        out
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len <= 64 {
            write!(f, "BitString(\"{self}\")")
        } else {
            write!(f, "BitString({} bits, {} ones)", self.len, self.count_ones())
        }
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.iter() {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Parses a string of `0`/`1` characters. Whitespace and `_` are skipped.
impl core::str::FromStr for BitString {
    type Err = char;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars()
            .filter(|c| !c.is_whitespace() && *c != '_')
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(other),
            })
            .collect()
    }
}
