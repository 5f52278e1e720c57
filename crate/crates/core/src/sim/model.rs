//! Per-code-block decoding work in either decode mode, and the trajectory
//! library that backs the cost model.

use crate::channel::{random_codeword, transmit_at};
use crate::early::{Decodability, PayloadMap, PredictionThresholds, SoftPdu, Statistic};
use crate::fec::{DecoderConfig, DecoderState, LdpcCode};
use crate::Result;
use rand::Rng;
use std::sync::Arc;

/// Recorded decoding run of one code block.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Prediction statistic after iterations 1..=i_max.
    pub stat: Vec<f32>,
    pub crc_iter: Option<u8>,
    /// Per payload bit, the iteration from which its |LLR| stays above l_t.
    /// `u8::MAX` when it never does.
    pub conf_from: Vec<u8>,
}

impl Trajectory {
    pub fn record(
        llr: Vec<f32>,
        code: &LdpcCode,
        dcfg: &DecoderConfig,
        statistic: Statistic,
        l_t: f64,
        payload: usize,
    ) -> Result<Self> {
        let mut st = DecoderState::new(llr, code);
        let info = &code.info_positions()[..payload];
        let mut stat = Vec::with_capacity(dcfg.i_max);
        let mut conf_from = vec![u8::MAX; payload];
        while st.iteration < dcfg.i_max && !st.crc_passed {
            st.iterate(code, dcfg)?;
            stat.push(statistic.of(&st.llr) as f32);
            let it = st.iteration as u8;
            for (c, &p) in conf_from.iter_mut().zip(info) {
                if f64::from(st.llr[p].abs()) > l_t {
                    if *c == u8::MAX {
                        *c = it;
                    }
                } else {
                    *c = u8::MAX;
                }
            }
        }
        let crc_iter = st.crc_passed.then_some(st.iteration as u8);
        if let Some(c) = crc_iter {
            conf_from.iter_mut().for_each(|x| *x = (*x).min(c));
        }
        let last = stat.last().copied().unwrap_or(0.0);
        stat.resize(dcfg.i_max, last);
        Ok(Self { stat, crc_iter, conf_from })
    }
}

/// Trajectories binned by per-bit SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLibrary {
    pub snr_lo_db: f64,
    pub step_db: f64,
    pub bins: Vec<Vec<Trajectory>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LibrarySpec {
    pub snr_lo_db: f64,
    pub snr_hi_db: f64,
    pub step_db: f64,
    pub per_bin: usize,
    pub seed: u64,
}

impl TrajectoryLibrary {
    pub fn build(
        code: &LdpcCode,
        dcfg: &DecoderConfig,
        statistic: Statistic,
        l_t: f64,
        spec: &LibrarySpec,
    ) -> Result<Self> {
        let payload = PayloadMap::for_code(code).payload_per_cb;
        let n_bins = ((spec.snr_hi_db - spec.snr_lo_db) / spec.step_db).round() as usize + 1;
        let mut bins = Vec::with_capacity(n_bins);
        for b in 0..n_bins {
            let snr = spec.snr_lo_db + b as f64 * spec.step_db;
            let mut v = Vec::with_capacity(spec.per_bin);
            for j in 0..spec.per_bin {
                let seed = spec.seed ^ ((b as u64) << 32) ^ j as u64;
                let (_, cw) = random_codeword(code, seed);
                let llr = transmit_at(&cw, snr, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                v.push(Trajectory::record(llr, code, dcfg, statistic, l_t, payload)?);
            }
            bins.push(v);
        }
        Ok(Self { snr_lo_db: spec.snr_lo_db, step_db: spec.step_db, bins })
    }

    /// Picks a trajectory for a block at `snr_db`, mixing the two nearest bins.
    pub fn sample(&self, snr_db: f64, rng: &mut impl Rng) -> (u16, u16) {
        let x = ((snr_db - self.snr_lo_db) / self.step_db).clamp(0.0, (self.bins.len() - 1) as f64);
        let lo = x.floor() as usize;
        let bin = if lo + 1 < self.bins.len() && rng.gen::<f64>() < x - lo as f64 { lo + 1 } else { lo };
        let idx = rng.gen_range(0..self.bins[bin].len());
        (bin as u16, idx as u16)
    }

    pub fn get(&self, bin: u16, idx: u16) -> &Trajectory {
        &self.bins[bin as usize][idx as usize]
    }

    /// Fraction of a bin's trajectories that never pass CRC.
    pub fn bler(&self, bin: usize) -> f64 {
        let v = &self.bins[bin];
        v.iter().filter(|t| t.crc_iter.is_none()).count() as f64 / v.len() as f64
    }
}

/// Shared read-only decoding context of one run.
#[derive(Debug, Clone)]
pub struct DecodeCtx {
    pub code: Arc<LdpcCode>,
    pub dcfg: DecoderConfig,
    pub th: PredictionThresholds,
    pub l_t: f64,
    pub map: PayloadMap,
    pub lib: Option<Arc<TrajectoryLibrary>>,
}

impl DecodeCtx {
    /// Virtual cost of one iteration of one code block.
    pub fn block_cost_us(&self) -> f64 {
        self.dcfg.iteration_cost_us(self.code.k())
    }

    fn lib(&self) -> &TrajectoryLibrary {
        self.lib.as_deref().expect("cost-model block without a trajectory library")
    }
}

/// One code block under decoding.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Real(DecoderState),
    Model { bin: u16, idx: u16, iteration: u8 },
}

impl Block {
    pub fn iteration(&self) -> usize {
        match self {
            Block::Real(s) => s.iteration,
            Block::Model { iteration, .. } => usize::from(*iteration),
        }
    }

    pub fn iterate(&mut self, ctx: &DecodeCtx) -> Result<()> {
        match self {
            Block::Real(s) => s.iterate(&ctx.code, &ctx.dcfg),
            Block::Model { iteration, .. } => {
                if usize::from(*iteration) >= ctx.dcfg.i_max {
                    return Err(crate::Error::Precondition(format!("iteration {} at cap", iteration)));
                }
                *iteration += 1;
                Ok(())
            }
        }
    }

    pub fn crc_passed(&self, ctx: &DecodeCtx) -> bool {
        match self {
            Block::Real(s) => s.crc_passed,
            Block::Model { bin, idx, iteration } => {
                ctx.lib().get(*bin, *idx).crc_iter.is_some_and(|c| *iteration >= c)
            }
        }
    }

    pub fn at_cap(&self, ctx: &DecodeCtx) -> bool {
        self.iteration() >= ctx.dcfg.i_max
    }

    /// Finished: CRC passed or nothing left to iterate.
    pub fn settled(&self, ctx: &DecodeCtx) -> bool {
        self.crc_passed(ctx) || self.at_cap(ctx)
    }

    /// Threshold decision at the current iteration; CRC pass decides at once.
    pub fn classify(&self, ctx: &DecodeCtx) -> Option<Decodability> {
        match self {
            Block::Real(s) => ctx.th.classify_state(s),
            Block::Model { bin, idx, iteration } => {
                let t = ctx.lib().get(*bin, *idx);
                if t.crc_iter.is_some_and(|c| *iteration >= c) {
                    return Some(Decodability::Decodable);
                }
                let i = usize::from(*iteration);
                if i == 0 {
                    return None;
                }
                ctx.th.classify(i, f64::from(t.stat[i - 1]))
            }
        }
    }

    /// Iterations a fresh run-to-completion from here would still need, and
    /// whether it ends in a CRC pass (cost-model only).
    pub fn model_remaining(&self, ctx: &DecodeCtx) -> Option<(usize, bool)> {
        match self {
            Block::Real(_) => None,
            Block::Model { bin, idx, iteration } => {
                let t = ctx.lib().get(*bin, *idx);
                let i = usize::from(*iteration);
                Some(match t.crc_iter {
                    Some(c) => (usize::from(c).saturating_sub(i), true),
                    None => (ctx.dcfg.i_max.saturating_sub(i), false),
                })
            }
        }
    }

    fn confident(&self, ctx: &DecodeCtx, idx: usize) -> Option<u8> {
        match self {
            Block::Real(s) => {
                let l = s.llr[ctx.code.info_positions()[idx]];
                (s.crc_passed || f64::from(l.abs()) > ctx.l_t).then_some(u8::from(l < 0.0))
            }
            Block::Model { .. } => unreachable!("model blocks read bits from the layout"),
        }
    }
}

/// [`SoftPdu`] view of a transport block's blocks. In cost-model mode bit
/// values come from `truth`, confidence from the trajectories.
pub struct TbSoft<'a> {
    pub blocks: &'a mut [Block],
    pub ctx: &'a DecodeCtx,
    pub truth: &'a [u8],
    pub pdu_bits: usize,
    /// Block iterations spent through [`SoftPdu::advance_at`].
    pub iterations: usize,
}

impl SoftPdu for TbSoft<'_> {
    fn len(&self) -> usize {
        self.pdu_bits
    }

    fn iteration(&self) -> usize {
        self.blocks.iter().map(Block::iteration).max().unwrap_or(0)
    }

    fn iteration_at(&self, b: usize) -> usize {
        self.blocks[self.ctx.map.locate(b).0].iteration()
    }

    fn confident_bit(&self, b: usize, _l_t: f64) -> Option<u8> {
        let (cb, idx) = self.ctx.map.locate(b);
        match &self.blocks[cb] {
            blk @ Block::Real(_) => blk.confident(self.ctx, idx),
            blk @ Block::Model { bin, idx: ti, iteration } => {
                let t = self.ctx.lib().get(*bin, *ti);
                (blk.crc_passed(self.ctx) || *iteration >= t.conf_from[idx]).then(|| self.truth[b])
            }
        }
    }

    fn crc_passed(&self) -> bool {
        self.blocks.iter().all(|b| b.crc_passed(self.ctx))
    }

    fn advance_at(&mut self, b: usize) -> Result<()> {
        let cb = self.ctx.map.locate(b).0;
        self.blocks[cb].iterate(self.ctx)?;
        self.iterations += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::early::PreParseConfig;

    fn ctx(lib: Option<Arc<TrajectoryLibrary>>) -> DecodeCtx {
        let code = Arc::new(LdpcCode::default_code());
        let dcfg = DecoderConfig::default();
        let th = PredictionThresholds::new(vec![5.0; 20], vec![1.0; 20], 20).unwrap();
        let map = PayloadMap::for_code(&code);
        DecodeCtx { code, dcfg, th, l_t: 6.0, map, lib }
    }

    #[test]
    fn noiseless_trajectory_passes_at_once() {
        let c = ctx(None);
        let (_, cw) = random_codeword(&c.code, 1);
        let llr = transmit_at(&cw, f64::INFINITY, 0);
        let t = Trajectory::record(llr, &c.code, &c.dcfg, Statistic::MeanAbs, 6.0, c.map.payload_per_cb).unwrap();
        assert_eq!(t.crc_iter, Some(1));
        assert!(t.conf_from.iter().all(|&x| x == 1));
        assert_eq!(t.stat.len(), 20);
    }

    #[test]
    fn model_blocks_follow_their_trajectory() {
        let base = ctx(None);
        let spec = LibrarySpec { snr_lo_db: 1.0, snr_hi_db: 3.0, step_db: 0.5, per_bin: 20, seed: 3 };
        let lib = Arc::new(TrajectoryLibrary::build(&base.code, &base.dcfg, Statistic::MeanAbs, 6.0, &spec).unwrap());
        assert_eq!(lib.bins.len(), 5);
        assert!(lib.bler(0) >= lib.bler(4));
        let c = ctx(Some(lib.clone()));
        let mut rng = rand::thread_rng();
        let (bin, idx) = lib.sample(2.6, &mut rng);
        assert!(bin == 3 || bin == 4);
        let mut b = Block::Model { bin, idx, iteration: 0 };
        let t = lib.get(bin, idx).clone();
        while !b.settled(&c) {
            b.iterate(&c).unwrap();
        }
        match t.crc_iter {
            Some(k) => assert_eq!(b.iteration(), usize::from(k)),
            None => assert_eq!(b.iteration(), 20),
        }
    }

    #[test]
    fn model_preparse_reads_layout_bits() {
        let base = ctx(None);
        let spec = LibrarySpec { snr_lo_db: 30.0, snr_hi_db: 30.0, step_db: 1.0, per_bin: 2, seed: 1 };
        let lib = Arc::new(TrajectoryLibrary::build(&base.code, &base.dcfg, Statistic::MeanAbs, 6.0, &spec).unwrap());
        let c = ctx(Some(lib));
        let sdus = vec![(5u8, crate::bits::random_bits(&mut rand::thread_rng(), 400))];
        let pdu = crate::mac::build_pdu(&sdus, &[], 1200).unwrap();
        let bits = pdu.to_bits();
        let mut blocks: Vec<Block> = (0..c.map.blocks_for(1200)).map(|_| Block::Model { bin: 0, idx: 0, iteration: 0 }).collect();
        let mut src = TbSoft { blocks: &mut blocks, ctx: &c, truth: &bits, pdu_bits: 1200, iterations: 0 };
        let r = crate::early::pre_parse(&mut src, &PreParseConfig { l_t: 6.0, i_max: 20 }).unwrap();
        assert!(r.complete);
        assert_eq!(r.subheaders.len(), 1);
        assert_eq!(src.iterations, 1);
    }
}
