//! Bit sequences are plain `Vec<u8>` holding 0/1 values, MSB-first when
//! converted to and from integers or bytes.

use rand::Rng;

pub type Bits = Vec<u8>;

/// Appends the `width` low bits of `value`, most significant first.
pub fn push_uint(out: &mut Bits, value: u64, width: usize) {
    for k in (0..width).rev() {
        out.push(((value >> k) & 1) as u8);
    }
}

/// Reads `width` bits starting at `pos` as an unsigned integer.
///
/// Panics if the range is out of bounds; callers check lengths first.
pub fn read_uint(bits: &[u8], pos: usize, width: usize) -> u64 {
    bits[pos..pos + width]
        .iter()
        .fold(0u64, |acc, &b| (acc << 1) | u64::from(b & 1))
}

pub fn from_bytes(bytes: &[u8]) -> Bits {
    let mut out = Vec::with_capacity(bytes.len() * 8);
    for &b in bytes {
        push_uint(&mut out, u64::from(b), 8);
    }
    out
}

/// Packs bits into bytes; a trailing partial byte is zero-padded.
pub fn to_bytes(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| {
            let mut v = 0u8;
            for (k, &b) in c.iter().enumerate() {
                v |= (b & 1) << (7 - k);
            }
            v
        })
        .collect()
}

pub fn random_bits<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Bits {
    (0..len).map(|_| rng.gen::<bool>() as u8).collect()
}
