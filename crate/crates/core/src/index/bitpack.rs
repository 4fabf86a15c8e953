//! Bit-packed embedding records: `id_bits` of centroid id followed by
//! `2 · dim` bits of residual bucket codes, records laid end to end with no
//! padding. Bits are filled least-significant first within each byte.

use super::codec::RESIDUAL_BITS;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedCodes {
    id_bits: u32,
    dim: usize,
    len: usize,
    bytes: Vec<u8>,
}

impl PackedCodes {
    pub fn new(id_bits: u32, dim: usize) -> Self {
        PackedCodes {
            id_bits,
            dim,
            len: 0,
            bytes: Vec::new(),
        }
    }

    pub fn from_raw(id_bits: u32, dim: usize, len: usize, bytes: Vec<u8>) -> Result<Self> {
        let codes = PackedCodes {
            id_bits,
            dim,
            len,
            bytes,
        };
        if codes.bytes.len() != codes.byte_len_for(len) {
            return Err(Error::Format(format!(
                "packed codes: {} bytes for {len} records of {} bits",
                codes.bytes.len(),
                codes.record_bits()
            )));
        }
        Ok(codes)
    }

    /// `⌈log2 |C|⌉ + 2 · dim`.
    pub fn record_bits(&self) -> usize {
        self.id_bits as usize + RESIDUAL_BITS as usize * self.dim
    }

    pub fn id_bits(&self) -> u32 {
        self.id_bits
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn total_bits(&self) -> usize {
        self.len * self.record_bits()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    fn byte_len_for(&self, len: usize) -> usize {
        (len * self.record_bits()).div_ceil(8)
    }

    fn write_bits(&mut self, mut pos: usize, mut value: u64, mut nbits: u32) {
        while nbits > 0 {
            let byte = pos / 8;
            let offset = (pos % 8) as u32;
            let take = (8 - offset).min(nbits);
            let mask = ((1u16 << take) - 1) as u8;
            self.bytes[byte] |= ((value as u8) & mask) << offset;
            value >>= take;
            nbits -= take;
            pos += take as usize;
        }
    }

    fn read_bits(&self, mut pos: usize, nbits: u32) -> u64 {
        let mut value = 0u64;
        let mut filled = 0u32;
        while filled < nbits {
            let byte = pos / 8;
            let offset = (pos % 8) as u32;
            let take = (8 - offset).min(nbits - filled);
            let mask = ((1u16 << take) - 1) as u8;
            let chunk = (self.bytes[byte] >> offset) & mask;
            value |= (chunk as u64) << filled;
            filled += take;
            pos += take as usize;
        }
        value
    }

    pub fn push(&mut self, centroid_id: usize, code: &[u8]) -> Result<()> {
        if code.len() != self.dim {
            return Err(Error::dim(self.dim, code.len()));
        }
        if self.id_bits < 64 && (centroid_id as u64) >> self.id_bits != 0 {
            return Err(Error::OutOfRange {
                index: centroid_id,
                len: 1usize << self.id_bits,
            });
        }
        let start = self.len * self.record_bits();
        self.len += 1;
        self.bytes.resize(self.byte_len_for(self.len), 0);
        self.write_bits(start, centroid_id as u64, self.id_bits);
        let mut pos = start + self.id_bits as usize;
        for &b in code {
            if b >= 4 {
                return Err(Error::OutOfRange {
                    index: b as usize,
                    len: 4,
                });
            }
            self.write_bits(pos, b as u64, RESIDUAL_BITS);
            pos += RESIDUAL_BITS as usize;
        }
        Ok(())
    }

    pub fn centroid_id(&self, i: usize) -> usize {
        self.read_bits(i * self.record_bits(), self.id_bits) as usize
    }

    /// Reads record `i`'s residual codes into `out` and returns its centroid id.
    pub fn read_into(&self, i: usize, out: &mut [u8]) -> usize {
        let start = i * self.record_bits();
        let id = self.read_bits(start, self.id_bits) as usize;
        let mut pos = start + self.id_bits as usize;
        for o in out.iter_mut().take(self.dim) {
            *o = self.read_bits(pos, RESIDUAL_BITS) as u8;
            pos += RESIDUAL_BITS as usize;
        }
        id
    }

    pub fn get(&self, i: usize) -> Result<(usize, Vec<u8>)> {
        if i >= self.len {
            return Err(Error::OutOfRange {
                index: i,
                len: self.len,
            });
        }
        let mut code = vec![0u8; self.dim];
        let id = self.read_into(i, &mut code);
        Ok((id, code))
    }
}
