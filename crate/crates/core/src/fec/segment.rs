use super::crc::{Crc24, CRC_LEN};
use crate::{Error, Result};

/// Default maximum code block size (payload + CRC) in bits.
pub const MAX_CB_BITS: usize = 8448;

/// One segmentation unit of a transport block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBlock {
    /// Payload bits including any trailing zero filler.
    pub payload_bits: Vec<u8>,
    pub crc_bits: Vec<u8>,
    pub index: usize,
    pub tb_id: u64,
    /// Number of zero filler bits at the end of `payload_bits`.
    pub filler: usize,
}

impl CodeBlock {
    pub fn len(&self) -> usize {
        self.payload_bits.len() + self.crc_bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Payload without filler.
    pub fn data(&self) -> &[u8] {
        &self.payload_bits[..self.payload_bits.len() - self.filler]
    }
}

/// Payload capacity of each code block for a given maximum block size.
pub fn payload_per_block(max_cb: usize) -> usize {
    max_cb - CRC_LEN
}

pub fn num_blocks(tb_len: usize, max_cb: usize) -> usize {
    tb_len.div_ceil(payload_per_block(max_cb))
}

/// Splits a transport block into code blocks of `max_cb` bits each.
///
/// Every block carries a CB CRC; the last block is zero-filled so all blocks
/// share the encoder's information length.
pub fn segment_transport_block(tb_bits: &[u8], max_cb: usize, tb_id: u64) -> Result<Vec<CodeBlock>> {
    if tb_bits.is_empty() {
        return Err(Error::InvalidArgument("empty transport block".into()));
    }
    if max_cb < 64 {
        return Err(Error::InvalidArgument(format!("max_cb {max_cb} < 64")));
    }
    let per = payload_per_block(max_cb);
    let crc = Crc24::cb();
    Ok(tb_bits
        .chunks(per)
        .enumerate()
        .map(|(index, chunk)| {
            let mut payload_bits = chunk.to_vec();
            let filler = per - chunk.len();
            payload_bits.resize(per, 0);
            let crc_bits = crc.compute(&payload_bits).to_vec();
            CodeBlock { payload_bits, crc_bits, index, tb_id, filler }
        })
        .collect())
}

/// Concatenates block payloads back into the transport block.
pub fn desegment(blocks: &[CodeBlock]) -> Vec<u8> {
    blocks.iter().flat_map(|b| b.data().iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::random_bits;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn below_threshold_is_single_block() {
        let blocks = segment_transport_block(&vec![1; 8000], MAX_CB_BITS, 0).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].filler, 424);
    }

    #[test]
    fn nine_thousand_bits_split_in_two() {
        let blocks = segment_transport_block(&vec![0; 9000], MAX_CB_BITS, 0).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].data().len(), 8424);
        assert_eq!(blocks[1].data().len(), 576);
        assert!(blocks.iter().all(|b| b.len() == MAX_CB_BITS));
    }

    #[test]
    fn empty_and_tiny_limits_are_rejected() {
        assert!(segment_transport_block(&[], MAX_CB_BITS, 0).is_err());
        assert!(segment_transport_block(&[1], 63, 0).is_err());
    }

    #[test]
    fn round_trip_random_tbs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let len = rng.gen_range(1..50_000);
            let max_cb = [648usize, 1000, MAX_CB_BITS][rng.gen_range(0..3)];
            let tb = random_bits(&mut rng, len);
            let blocks = segment_transport_block(&tb, max_cb, 1).unwrap();
            assert_eq!(blocks.len(), num_blocks(len, max_cb));
            assert!(blocks.iter().all(|b| b.len() <= max_cb));
            assert!(blocks.iter().all(|b| super::super::crc::crc_check(
                &[b.payload_bits.clone(), b.crc_bits.clone()].concat()
            )));
            assert_eq!(desegment(&blocks), tb);
        }
    }
}
