//! Fixed-width index packing, least significant bit first.

use crate::error::{Error, Result};

pub const MAX_BITS: u32 = 16;

fn check_bits(bits: u32) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::InvalidArgument(format!("index width must be 1..={MAX_BITS} bits, got {bits}")));
    }
    Ok(())
}

pub fn packed_len(count: usize, bits: u32) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Pack indices at `bits` bits each. The first index occupies the lowest bits
/// of byte 0; the tail of the last byte is zero.
pub fn pack_indices(indices: &[u32], bits: u32) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let mut out = vec![0u8; packed_len(indices.len(), bits)];
    let mut acc: u32 = 0;
    let mut filled = 0u32;
    let mut pos = 0;
    for &idx in indices {
        if idx >> bits != 0 {
            return Err(Error::IndexOutOfRange { index: idx, bits });
        }
        acc |= idx << filled;
        filled += bits;
        while filled >= 8 {
            out[pos] = acc as u8;
            pos += 1;
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out[pos] = acc as u8;
    }
    Ok(out)
}

pub fn unpack_indices(bytes: &[u8], bits: u32, count: usize) -> Result<Vec<u32>> {
    check_bits(bits)?;
    let need = packed_len(count, bits);
    if bytes.len() < need {
        return Err(Error::Truncated(format!(
            "{count} indices at {bits} bits need {need} bytes, got {}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    IndexReader::new(bytes, bits).take(count).for_each(|v| out.push(v));
    Ok(out)
}

/// Streaming decoder over a packed index buffer.
pub struct IndexReader<'a> {
    bytes: &'a [u8],
    bits: u32,
    mask: u32,
    acc: u32,
    filled: u32,
    pos: usize,
}

impl<'a> IndexReader<'a> {
    pub fn new(bytes: &'a [u8], bits: u32) -> Self {
        Self {
            bytes,
            bits,
            mask: if bits >= 32 { u32::MAX } else { (1u32 << bits) - 1 },
            acc: 0,
            filled: 0,
            pos: 0,
        }
    }
}

impl Iterator for IndexReader<'_> {
    type Item = u32;

    fn next(&mut self) -> Option<u32> {
        while self.filled < self.bits {
            let b = *self.bytes.get(self.pos)?;
            self.acc |= (b as u32) << self.filled;
            self.filled += 8;
            self.pos += 1;
        }
        let v = self.acc & self.mask;
        self.acc >>= self.bits;
        self.filled -= self.bits;
        Some(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bit_example() {
        let packed = pack_indices(&[0, 1, 2, 3], 2).unwrap();
        assert_eq!(packed, vec![0xE4]);
        assert_eq!(unpack_indices(&packed, 2, 4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_and_zero_inputs() {
        assert!(pack_indices(&[], 3).unwrap().is_empty());
        for bits in 1..=16 {
            let p = pack_indices(&[0; 13], bits).unwrap();
            assert_eq!(p.len(), (13 * bits as usize).div_ceil(8));
            assert!(p.iter().all(|&b| b == 0));
        }
    }

    #[test]
    fn three_bit_layout_by_hand() {
        // 5 = 101, 3 = 011, 7 = 111 -> bits (lsb first) 101 110 111 -> 0b11_011_101, 0b0000000_1
        assert_eq!(pack_indices(&[5, 3, 7], 3).unwrap(), vec![0b1101_1101, 0b0000_0001]);
    }

    #[test]
    fn errors() {
        assert!(matches!(pack_indices(&[4], 2), Err(Error::IndexOutOfRange { index: 4, bits: 2 })));
        assert!(matches!(unpack_indices(&[0], 4, 3), Err(Error::Truncated(_))));
        assert!(pack_indices(&[0], 0).is_err());
        assert!(pack_indices(&[0], 17).is_err());
    }

    #[test]
    fn sixteen_bits_are_little_endian_u16() {
        let p = pack_indices(&[0x1234, 0xBEEF], 16).unwrap();
        assert_eq!(p, vec![0x34, 0x12, 0xEF, 0xBE]);
    }
}
