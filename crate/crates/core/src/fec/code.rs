//! Systematic encoder derived from the parity-check matrix by Gaussian
//! elimination over GF(2).

use super::matrix::ParityCheckMatrix;
use super::segment::CodeBlock;
use crate::{Error, Result};

/// An LDPC code ready for encoding and decoding.
#[derive(Debug, Clone)]
pub struct LdpcCode {
    h: ParityCheckMatrix,
    info_pos: Vec<usize>,
    /// (parity column, mask over info indices) per independent check.
    parity_eqs: Vec<(usize, Vec<u64>)>,
    // Check-major edge layout used by the decoder.
    pub(crate) edge_var: Vec<u32>,
    pub(crate) check_start: Vec<u32>,
}

impl LdpcCode {
    pub fn new(h: ParityCheckMatrix) -> Self {
        let n = h.cols();
        let words = n.div_ceil(64);
        let mut rows: Vec<Vec<u64>> = (0..h.rows())
            .map(|c| {
                let mut r = vec![0u64; words];
                for &v in h.check_neighbors(c) {
                    r[v as usize / 64] |= 1 << (v % 64);
                }
                r
            })
            .collect();
        let get = |r: &[u64], col: usize| (r[col / 64] >> (col % 64)) & 1 == 1;

        // Pivot from the rightmost column so the systematic part leads.
        let mut pivots: Vec<(usize, usize)> = Vec::new();
        let mut next_row = 0;
        for col in (0..n).rev() {
            if next_row == rows.len() {
                break;
            }
            let Some(found) = (next_row..rows.len()).find(|&r| get(&rows[r], col)) else {
                continue;
            };
            rows.swap(next_row, found);
            let pivot = rows[next_row].clone();
            for (r, row) in rows.iter_mut().enumerate() {
                if r != next_row && get(row, col) {
                    row.iter_mut().zip(&pivot).for_each(|(a, b)| *a ^= b);
                }
            }
            pivots.push((next_row, col));
            next_row += 1;
        }

        let mut is_parity = vec![false; n];
        for &(_, c) in &pivots {
            is_parity[c] = true;
        }
        let info_pos: Vec<usize> = (0..n).filter(|&c| !is_parity[c]).collect();
        let k = info_pos.len();
        let iw = k.div_ceil(64);
        let parity_eqs = pivots
            .iter()
            .map(|&(r, col)| {
                let mut mask = vec![0u64; iw];
                for (i, &p) in info_pos.iter().enumerate() {
                    if get(&rows[r], p) {
                        mask[i / 64] |= 1 << (i % 64);
                    }
                }
                (col, mask)
            })
            .collect();

        let mut edge_var = Vec::with_capacity(h.num_edges());
        let mut check_start = Vec::with_capacity(h.rows() + 1);
        for c in 0..h.rows() {
            check_start.push(edge_var.len() as u32);
            edge_var.extend_from_slice(h.check_neighbors(c));
        }
        check_start.push(edge_var.len() as u32);

        Self { h, info_pos, parity_eqs, edge_var, check_start }
    }

    pub fn default_code() -> Self {
        Self::new(ParityCheckMatrix::default_code())
    }

    pub fn h(&self) -> &ParityCheckMatrix {
        &self.h
    }

    /// Codeword length n.
    pub fn n(&self) -> usize {
        self.h.cols()
    }

    /// Information length k (payload + CRC per code block).
    pub fn k(&self) -> usize {
        self.info_pos.len()
    }

    /// Codeword positions carrying the information bits, in order.
    pub fn info_positions(&self) -> &[usize] {
        &self.info_pos
    }

    pub fn encode_bits(&self, info: &[u8]) -> Result<Vec<u8>> {
        if info.len() != self.k() {
            return Err(Error::InvalidArgument(format!(
                "information length {} != code k {}",
                info.len(),
                self.k()
            )));
        }
        let mut packed = vec![0u64; self.k().div_ceil(64)];
        for (i, &b) in info.iter().enumerate() {
            packed[i / 64] |= u64::from(b & 1) << (i % 64);
        }
        let mut cw = vec![0u8; self.n()];
        for (&p, &b) in self.info_pos.iter().zip(info) {
            cw[p] = b & 1;
        }
        for (col, mask) in &self.parity_eqs {
            let ones: u32 = mask.iter().zip(&packed).map(|(m, x)| (m & x).count_ones()).sum();
            cw[*col] = (ones & 1) as u8;
        }
        Ok(cw)
    }

    /// Extracts the information bits from a (hard-decision) codeword.
    pub fn extract_info(&self, word: &[u8]) -> Vec<u8> {
        self.info_pos.iter().map(|&p| word[p]).collect()
    }
}

/// Encodes a code block's payload and CRC into a codeword with H·c = 0.
pub fn encode_codeblock(cb: &CodeBlock, code: &LdpcCode) -> Result<Vec<u8>> {
    let mut info = Vec::with_capacity(code.k());
    info.extend_from_slice(&cb.payload_bits);
    info.extend_from_slice(&cb.crc_bits);
    code.encode_bits(&info)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::random_bits;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn default_code_is_full_rank_half_rate() {
        let code = LdpcCode::default_code();
        assert_eq!(code.n(), 1296);
        assert!(code.k() >= 648);
    }

    #[test]
    fn zero_payload_gives_zero_codeword() {
        let code = LdpcCode::default_code();
        let cw = code.encode_bits(&vec![0; code.k()]).unwrap();
        assert!(cw.iter().all(|&b| b == 0));
    }

    #[test]
    fn random_payloads_satisfy_parity_and_are_distinct() {
        let code = LdpcCode::default_code();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = HashSet::new();
        for _ in 0..1000 {
            let info = random_bits(&mut rng, code.k());
            let cw = code.encode_bits(&info).unwrap();
            assert!(code.h().is_codeword(&cw));
            assert_eq!(code.extract_info(&cw), info);
            seen.insert(cw);
        }
        assert_eq!(seen.len(), 1000);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let code = LdpcCode::default_code();
        assert!(matches!(code.encode_bits(&[0; 10]), Err(Error::InvalidArgument(_))));
    }
}
