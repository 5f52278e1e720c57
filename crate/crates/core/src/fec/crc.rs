//! Bit-level 24-bit CRCs with the NR generator polynomials.

/// Generator for transport-block CRCs (CRC24A).
pub const CRC24A: u32 = 0x86_4CFB;
/// Generator for code-block CRCs (CRC24B).
pub const CRC24B: u32 = 0x80_0063;
pub const CRC_LEN: usize = 24;

const MASK: u32 = 0xFF_FFFF;

/// A 24-bit CRC over MSB-first bit sequences, zero init, no final xor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crc24 {
    poly: u32,
}

impl Crc24 {
    pub const fn new(poly: u32) -> Self {
        Self { poly: poly & MASK }
    }

    pub const fn tb() -> Self {
        Self::new(CRC24A)
    }

    pub const fn cb() -> Self {
        Self::new(CRC24B)
    }

    /// Remainder of `bits(x) * x^24` modulo the generator.
    pub fn remainder(&self, bits: &[u8]) -> u32 {
        let mut reg = 0u32;
        for &b in bits {
            let top = ((reg >> 23) & 1) ^ u32::from(b & 1);
            reg = (reg << 1) & MASK;
            if top == 1 {
                reg ^= self.poly;
            }
        }
        reg
    }

    pub fn compute(&self, bits: &[u8]) -> [u8; CRC_LEN] {
        let r = self.remainder(bits);
        let mut out = [0u8; CRC_LEN];
        for (k, o) in out.iter_mut().enumerate() {
            *o = ((r >> (23 - k)) & 1) as u8;
        }
        out
    }

    pub fn attach(&self, bits: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(bits.len() + CRC_LEN);
        out.extend_from_slice(bits);
        out.extend_from_slice(&self.compute(bits));
        out
    }

    /// True iff `bits` (data followed by its CRC) divides evenly.
    pub fn check(&self, bits: &[u8]) -> bool {
        if bits.len() < CRC_LEN {
            return false;
        }
        let (data, crc) = bits.split_at(bits.len() - CRC_LEN);
        self.compute(data)[..] == crc[..]
    }
}

/// Code-block CRC check.
pub fn crc_check(bits: &[u8]) -> bool {
    Crc24::cb().check(bits)
}

pub fn attach_crc(bits: &[u8]) -> Vec<u8> {
    Crc24::cb().attach(bits)
}
