//! Canonical binary encoding.
//!
//! Integers are fixed-width little-endian, reals are the little-endian bytes
//! of their IEEE-754 binary64 representation, variable-length sequences carry
//! a `u64` element count prefix, and enum variants a one-byte tag. The same
//! conventions are used for digests, ledger storage, and consensus messages.

use thiserror::Error;

/// Upper bound on any decoded sequence length; guards allocation on corrupt input.
const MAX_SEQUENCE_LEN: u64 = 1 << 28;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("input truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid {what} tag {tag} at offset {offset}")]
    InvalidTag { what: &'static str, tag: u8, offset: usize },
    #[error("sequence length {0} exceeds limit")]
    LengthOverflow(u64),
    #[error("non-finite real at offset {0}")]
    NonFinite(usize),
    #[error("{0} trailing bytes after value")]
    TrailingBytes(usize),
    #[error("invalid value: {0}")]
    Invalid(String),
}

/// Append-only canonical writer.
#[derive(Default, Debug, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn len(&mut self, n: usize) -> &mut Self {
        self.u64(n as u64)
    }

    pub fn f64_slice(&mut self, vs: &[f64]) -> &mut Self {
        self.len(vs.len());
        for &v in vs {
            self.f64(v);
        }
        self
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.len(bytes.len());
        self.raw(bytes)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }
}

/// Cursor over canonical bytes.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    /// Reads a finite real; NaN and infinities are rejected.
    pub fn f64(&mut self) -> Result<f64, DecodeError> {
        let at = self.pos;
        let v = f64::from_bits(u64::from_le_bytes(self.array()?));
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DecodeError::NonFinite(at))
        }
    }

    pub fn bool(&mut self) -> Result<bool, DecodeError> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            tag => Err(DecodeError::InvalidTag { what: "bool", tag, offset: at }),
        }
    }

    pub fn seq_len(&mut self) -> Result<usize, DecodeError> {
        let n = self.u64()?;
        if n > MAX_SEQUENCE_LEN {
            return Err(DecodeError::LengthOverflow(n));
        }
        Ok(n as usize)
    }

    pub fn f64_vec(&mut self) -> Result<Vec<f64>, DecodeError> {
        let n = self.seq_len()?;
        if n.saturating_mul(8) > self.remaining() {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                needed: n * 8 - self.remaining(),
            });
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let n = self.seq_len()?;
        self.take(n)
    }

    pub fn tag_error(&self, what: &'static str, tag: u8) -> DecodeError {
        DecodeError::InvalidTag { what, tag, offset: self.pos.saturating_sub(1) }
    }

    /// Fails unless every byte has been consumed.
    pub fn finish(self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(DecodeError::TrailingBytes(n)),
        }
    }
}

/// Types with a canonical byte representation.
pub trait Canonical: Sized {
    fn encode(&self, enc: &mut Encoder);
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError>;

    fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(bytes);
        let v = Self::decode(&mut dec)?;
        dec.finish()?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_are_little_endian_bits() {
        let mut e = Encoder::new();
        e.f64(1.0);
        assert_eq!(e.finish(), 1.0f64.to_bits().to_le_bytes().to_vec());
    }

    #[test]
    fn rejects_non_finite_and_truncation() {
        let mut e = Encoder::new();
        e.f64(f64::NAN);
        let bytes = e.finish();
        assert_eq!(Decoder::new(&bytes).f64(), Err(DecodeError::NonFinite(0)));
        assert!(matches!(
            Decoder::new(&bytes[..3]).u64(),
            Err(DecodeError::Truncated { .. })
        ));
    }

    #[test]
    fn huge_length_prefix_is_refused() {
        let mut e = Encoder::new();
        e.u64(u64::MAX);
        let bytes = e.finish();
        assert_eq!(
            Decoder::new(&bytes).f64_vec(),
            Err(DecodeError::LengthOverflow(u64::MAX))
        );
    }
}
