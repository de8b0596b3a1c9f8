//! Fixed-length signer bitmaps for aggregate signatures and quorum checks.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::encoding::{CodecError, Decode, Encode, Reader};

/// A bitmap over an ordered key list. Bit `i` marks position `i` as a signer.
#[derive(Clone, PartialEq, Eq)]
pub struct Bitmap {
    bits: Vec<u8>,
    len: usize,
}

impl Bitmap {
    pub fn new(len: usize) -> Self {
        Bitmap {
            bits: vec![0u8; len.div_ceil(8)],
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn set(&mut self, i: usize) {
        assert!(i < self.len, "bit index out of range");
        self.bits[i / 8] |= 1 << (i % 8);
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.len && self.bits[i / 8] & (1 << (i % 8)) != 0
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| self.get(i))
    }

    /// Number of positions set in both bitmaps. Lengths must match.
    pub fn intersection_count(&self, other: &Bitmap) -> usize {
        debug_assert_eq!(self.len, other.len);
        self.bits
            .iter()
            .zip(other.bits.iter())
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }
}

impl fmt::Debug for Bitmap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bitmap[")?;
        for i in 0..self.len {
            write!(f, "{}", if self.get(i) { '1' } else { '0' })?;
        }
        write!(f, "]")
    }
}

impl Encode for Bitmap {
    fn encode_into(&self, out: &mut Vec<u8>) {
        (self.len as u32).encode_into(out);
        out.extend_from_slice(&self.bits);
    }
}

impl Decode for Bitmap {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        let len = r.u32()? as usize;
        let bytes = r.take(len.div_ceil(8))?;
        let bitmap = Bitmap {
            bits: bytes.to_vec(),
            len,
        };
        // Padding bits beyond `len` must be zero so encodings stay unique.
        if len % 8 != 0 {
            let last = bitmap.bits[len / 8];
            if last >> (len % 8) != 0 {
                return Err(CodecError::Invalid("nonzero bitmap padding"));
            }
        }
        Ok(bitmap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_get_count() {
        let mut b = Bitmap::new(10);
        b.set(0);
        b.set(9);
        assert!(b.get(0) && b.get(9) && !b.get(5));
        assert_eq!(b.count_ones(), 2);
        assert_eq!(b.iter_ones().collect::<Vec<_>>(), vec![0, 9]);
    }

    #[test]
    fn intersection() {
        let mut a = Bitmap::new(16);
        let mut b = Bitmap::new(16);
        for i in 0..10 {
            a.set(i);
        }
        for i in 5..16 {
            b.set(i);
        }
        assert_eq!(a.intersection_count(&b), 5);
    }

    #[test]
    fn codec_rejects_dirty_padding() {
        let mut b = Bitmap::new(9);
        b.set(8);
        let mut enc = b.encoded();
        assert_eq!(Bitmap::decode_all(&enc).unwrap(), b);
        // Flip a padding bit.
        let last = enc.len() - 1;
        enc[last] |= 0x80;
        assert!(Bitmap::decode_all(&enc).is_err());
    }
}
