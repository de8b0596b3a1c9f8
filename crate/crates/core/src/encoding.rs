//! Canonical binary encoding.
//!
//! Every structure that is hashed, signed or exported uses this format:
//! fields in declaration order, integers fixed-width big-endian, lists
//! length-prefixed with a `u32`, hashes and fixed-size keys as raw bytes,
//! options and enums tagged with a single byte. Encoding is total; decoding
//! validates and fails loudly.

use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecError {
    /// Input ended before the value was complete.
    UnexpectedEnd,
    /// Bytes remained after a whole-input decode.
    TrailingBytes,
    /// Unknown enum discriminant.
    BadTag(u8),
    /// A length prefix exceeded the remaining input.
    BadLength,
    /// Structurally valid bytes that violate a type invariant.
    Invalid(&'static str),
}

impl fmt::Display for CodecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodecError::UnexpectedEnd => write!(f, "unexpected end of input"),
            CodecError::TrailingBytes => write!(f, "trailing bytes after value"),
            CodecError::BadTag(t) => write!(f, "unknown tag {t}"),
            CodecError::BadLength => write!(f, "length prefix out of range"),
            CodecError::Invalid(what) => write!(f, "invalid value: {what}"),
        }
    }
}

pub trait Encode {
    fn encode_into(&self, out: &mut Vec<u8>);

    fn encoded(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }
}

pub trait Decode: Sized {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError>;

    /// Decode a value that must consume the entire input.
    fn decode_all(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let value = Self::decode_from(&mut r)?;
        if r.remaining() != 0 {
            return Err(CodecError::TrailingBytes);
        }
        Ok(value)
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::UnexpectedEnd);
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    /// Read a `u32` length prefix, bounded by the remaining input.
    pub fn list_len(&mut self) -> Result<usize, CodecError> {
        let n = self.u32()? as usize;
        if n > self.remaining() {
            // Every list element occupies at least one byte, so a longer
            // claim cannot be satisfied; reject before allocating.
            return Err(CodecError::BadLength);
        }
        Ok(n)
    }
}

macro_rules! impl_uint {
    ($ty:ty, $get:ident) => {
        impl Encode for $ty {
            fn encode_into(&self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_be_bytes());
            }
        }
        impl Decode for $ty {
            fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
                r.$get()
            }
        }
    };
}

impl_uint!(u8, u8);
impl_uint!(u16, u16);
impl_uint!(u32, u32);
impl_uint!(u64, u64);

impl Encode for crate::hash::Hash32 {
    fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.0);
    }
}

impl Decode for crate::hash::Hash32 {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(crate::hash::Hash32(r.array()?))
    }
}

impl<T: Encode> Encode for Vec<T> {
    fn encode_into(&self, out: &mut Vec<u8>) {
        (self.len() as u32).encode_into(out);
        for item in self {
            item.encode_into(out);
        }
    }
}

impl<T: Decode> Decode for Vec<T> {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let n = r.list_len()?;
        let mut items = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            items.push(T::decode_from(r)?);
        }
        Ok(items)
    }
}

impl<T: Encode> Encode for Option<T> {
    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            None => out.push(0),
            Some(v) => {
                out.push(1);
                v.encode_into(out);
            }
        }
    }
}

impl<T: Decode> Decode for Option<T> {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8()? {
            0 => Ok(None),
            1 => Ok(Some(T::decode_from(r)?)),
            t => Err(CodecError::BadTag(t)),
        }
    }
}

/// Encode a raw byte string with a length prefix.
pub fn encode_bytes(bytes: &[u8], out: &mut Vec<u8>) {
    (bytes.len() as u32).encode_into(out);
    out.extend_from_slice(bytes);
}

pub fn decode_bytes(r: &mut Reader<'_>) -> Result<Vec<u8>, CodecError> {
    let n = r.list_len()?;
    Ok(r.take(n)?.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn uints_round_trip() {
        let mut out = Vec::new();
        0xDEADBEEFu32.encode_into(&mut out);
        7u8.encode_into(&mut out);
        let mut r = Reader::new(&out);
        assert_eq!(u32::decode_from(&mut r).unwrap(), 0xDEADBEEF);
        assert_eq!(u8::decode_from(&mut r).unwrap(), 7);
        assert_eq!(r.remaining(), 0);
    }

    #[test]
    fn list_round_trip_and_bad_length() {
        let v = vec![1u64, 2, 3];
        let enc = v.encoded();
        assert_eq!(Vec::<u64>::decode_all(&enc).unwrap(), v);

        // A length prefix larger than the remaining input is rejected.
        let bogus = [0xFFu8, 0xFF, 0xFF, 0xFF, 0, 0];
        assert_eq!(
            Vec::<u8>::decode_all(&bogus).unwrap_err(),
            CodecError::BadLength
        );
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut enc = 5u32.encoded();
        enc.push(0);
        assert_eq!(u32::decode_all(&enc).unwrap_err(), CodecError::TrailingBytes);
    }
}
