//! Early decoding: decodability prediction from per-iteration LLR statistics
//! and confident pre-parsing of MAC subheaders before decoding converges.

use crate::channel::{random_codeword, transmit_at};
use crate::fec::{segment, DecoderConfig, DecoderState, LdpcCode, CRC_LEN};
use crate::mac::{decode_subheader, has_length_field, lcid_kind, LcidKind, MacCe, Subheader, BASE_HEADER_BITS};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Per-block statistic compared against the thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    #[default]
    MeanAbs,
    /// The given quantile of per-bit |LLR|.
    AbsQuantile(f64),
}

impl Statistic {
    pub fn of(&self, llr: &[f32]) -> f64 {
        match *self {
            Statistic::MeanAbs => llr.iter().map(|l| f64::from(l.abs())).sum::<f64>() / llr.len() as f64,
            Statistic::AbsQuantile(q) => {
                let mut v: Vec<f32> = llr.iter().map(|l| l.abs()).collect();
                let i = ((q.clamp(0.0, 1.0) * (v.len() - 1) as f64).round() as usize).min(v.len() - 1);
                let (_, x, _) = v.select_nth_unstable_by(i, f32::total_cmp);
                f64::from(*x)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decodability {
    Decodable,
    NotDecodable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionThresholds {
    /// `a_vec[i - 1]` applies after iteration `i`.
    pub a_vec: Vec<f64>,
    pub n_vec: Vec<f64>,
    pub i_max: usize,
    #[serde(default)]
    pub statistic: Statistic,
}

impl PredictionThresholds {
    pub fn new(a_vec: Vec<f64>, n_vec: Vec<f64>, i_max: usize) -> Result<Self> {
        let th = Self { a_vec, n_vec, i_max, statistic: Statistic::MeanAbs };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a_vec.len() != self.i_max || self.n_vec.len() != self.i_max {
            return Err(Error::Config(format!(
                "threshold vectors have {} and {} entries, expected {}",
                self.a_vec.len(),
                self.n_vec.len(),
                self.i_max
            )));
        }
        if let Some(i) = (0..self.i_max).find(|&i| !(self.a_vec[i] > self.n_vec[i])) {
            return Err(Error::Config(format!("a_{} does not exceed n_{}", i + 1, i + 1)));
        }
        Ok(())
    }

    /// Verdict after `iteration` (1-based) given the block statistic `m`.
    pub fn classify(&self, iteration: usize, m: f64) -> Option<Decodability> {
        let i = iteration.checked_sub(1)?;
        if i >= self.a_vec.len() {
            return None;
        }
        if m > self.a_vec[i] {
            Some(Decodability::Decodable)
        } else if m < self.n_vec[i] {
            Some(Decodability::NotDecodable)
        } else {
            None
        }
    }

    /// Verdict for one block, treating a passed CRC as decodable.
    pub fn classify_state(&self, state: &DecoderState) -> Option<Decodability> {
        if state.crc_passed {
            return Some(Decodability::Decodable);
        }
        self.classify(state.iteration, self.statistic.of(&state.llr))
    }

    pub fn write_csv(&self, path: &Path, summary: &CalibrationSummary) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(
            f,
            "# l_t={} false_ack={} false_nack={} mean_i_prediction={}",
            summary.l_t, summary.false_ack, summary.false_nack, summary.mean_i_prediction
        )?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["iter", "a_i", "n_i"])?;
        for i in 0..self.i_max {
            w.write_record([(i + 1).to_string(), self.a_vec[i].to_string(), self.n_vec[i].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a file written by [`PredictionThresholds::write_csv`].
    pub fn load_csv(path: &Path) -> Result<(Self, CalibrationSummary)> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }

    pub fn parse_csv(text: &str) -> Result<(Self, CalibrationSummary)> {
        let mut summary = CalibrationSummary::default();
        let mut a_vec = Vec::new();
        let mut n_vec = Vec::new();
        let mut header_seen = false;
        for (ln, line) in text.lines().enumerate() {
            let line_no = ln + 1;
            let perr = |reason: String| Error::Parse { line: line_no, reason };
            if let Some(rest) = line.strip_prefix('#') {
                for kv in rest.split_whitespace() {
                    let (k, v) = kv.split_once('=').ok_or_else(|| perr(format!("bad summary item {kv:?}")))?;
                    let v: f64 = v.parse().map_err(|_| perr(format!("bad number {v:?}")))?;
                    match k {
                        "l_t" => summary.l_t = v,
                        "false_ack" => summary.false_ack = v,
                        "false_nack" => summary.false_nack = v,
                        "mean_i_prediction" => summary.mean_i_prediction = v,
                        _ => {}
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !header_seen {
                if line.trim() != "iter,a_i,n_i" {
                    return Err(perr(format!("unexpected header {line:?}")));
                }
                header_seen = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(perr(format!("expected 3 columns, got {}", cols.len())));
            }
            let iter: usize = cols[0].trim().parse().map_err(|_| perr("bad iter".into()))?;
            if iter != a_vec.len() + 1 {
                return Err(perr(format!("iteration {iter} out of sequence")));
            }
            a_vec.push(cols[1].trim().parse().map_err(|_| perr("bad a_i".into()))?);
            n_vec.push(cols[2].trim().parse().map_err(|_| perr("bad n_i".into()))?);
        }
        let i_max = a_vec.len();
        let th = Self::new(a_vec, n_vec, i_max)?;
        Ok((th, summary))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub status: Decodability,
    pub i_prediction: usize,
    pub mean_abs_llr_trace: Vec<f64>,
}

/// Runs decoding iterations on one fresh block until the thresholds decide.
pub fn predict_decodability(
    state: &mut DecoderState,
    code: &LdpcCode,
    dcfg: &DecoderConfig,
    th: &PredictionThresholds,
) -> Result<PredictionOutcome> {
    predict_blocks(std::slice::from_mut(state), code, dcfg, th)
}

/// Prediction over the code blocks of one transport block.
///
/// Undecided blocks iterate together; the TB is decodable once every block
/// is and not decodable as soon as one block is.
pub fn predict_blocks(
    states: &mut [DecoderState],
    code: &LdpcCode,
    dcfg: &DecoderConfig,
    th: &PredictionThresholds,
) -> Result<PredictionOutcome> {
    if th.a_vec.len() < dcfg.i_max || th.n_vec.len() < dcfg.i_max {
        return Err(Error::Config(format!(
            "threshold vectors shorter than the iteration cap {}",
            dcfg.i_max
        )));
    }
    if let Some(s) = states.iter().find(|s| s.iteration != 0) {
        return Err(Error::Precondition(format!("prediction must start at iteration 0, not {}", s.iteration)));
    }
    let mut decided = vec![false; states.len()];
    let mut trace = Vec::new();
    let mut round = 0;
    while round < dcfg.i_max {
        round += 1;
        let mut sum = 0.0;
        for (s, d) in states.iter_mut().zip(&mut decided) {
            if *d {
                continue;
            }
            s.iterate(code, dcfg)?;
            sum += s.mean_abs_llr();
            match th.classify_state(s) {
                Some(Decodability::NotDecodable) => {
                    trace.push(sum);
                    return Ok(PredictionOutcome {
                        status: Decodability::NotDecodable,
                        i_prediction: round,
                        mean_abs_llr_trace: trace,
                    });
                }
                Some(Decodability::Decodable) => *d = true,
                None => {}
            }
        }
        let active = decided.len().max(1);
        trace.push(sum / active as f64);
        if decided.iter().all(|&d| d) {
            return Ok(PredictionOutcome { status: Decodability::Decodable, i_prediction: round, mean_abs_llr_trace: trace });
        }
    }
    Ok(PredictionOutcome { status: Decodability::NotDecodable, i_prediction: round, mean_abs_llr_trace: trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreParseConfig {
    /// Confidence threshold on |LLR|.
    pub l_t: f64,
    pub i_max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StopReason {
    LowConfidence,
    Malformed,
    End,
    CrcPass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreParseResult {
    pub subheaders: Vec<Subheader>,
    pub ces: Vec<MacCe>,
    pub complete: bool,
    pub stop_reason: StopReason,
    /// Decoder iteration reached when scanning stopped.
    pub iteration: usize,
}

impl PreParseResult {
    /// LCIDs of the identified SDU subheaders.
    pub fn sdu_lcids(&self) -> impl Iterator<Item = u8> + '_ {
        self.subheaders.iter().filter(|h| lcid_kind(h.lcid) == LcidKind::Sdu).map(|h| h.lcid)
    }
}

/// Soft view of a PDU that is still being decoded.
pub trait SoftPdu {
    /// PDU length in bits.
    fn len(&self) -> usize;
    /// Highest decoder iteration over all blocks.
    fn iteration(&self) -> usize;
    /// Iteration of the block carrying PDU bit `b`.
    fn iteration_at(&self, b: usize) -> usize;
    /// Hard decision of PDU bit `b` if it clears the confidence threshold
    /// or its block already passed CRC.
    fn confident_bit(&self, b: usize, l_t: f64) -> Option<u8>;
    fn crc_passed(&self) -> bool;
    /// One more iteration on the block carrying PDU bit `b`.
    fn advance_at(&mut self, b: usize) -> Result<()>;
}

/// Where each PDU bit lives once the TB is segmented into code blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadMap {
    pub payload_per_cb: usize,
}

impl PayloadMap {
    pub fn for_code(code: &LdpcCode) -> Self {
        Self { payload_per_cb: segment::payload_per_block(code.k()) }
    }

    /// (code block, information index) of PDU bit `b`.
    pub fn locate(&self, b: usize) -> (usize, usize) {
        (b / self.payload_per_cb, b % self.payload_per_cb)
    }

    /// Code blocks of a TB carrying a PDU of `pdu_bits` plus the TB CRC.
    pub fn blocks_for(&self, pdu_bits: usize) -> usize {
        (pdu_bits + CRC_LEN).div_ceil(self.payload_per_cb)
    }
}

/// [`SoftPdu`] over real decoder states.
pub struct LdpcPdu<'a> {
    pub states: &'a mut [DecoderState],
    pub code: &'a LdpcCode,
    pub dcfg: &'a DecoderConfig,
    pub map: PayloadMap,
    pub pdu_bits: usize,
}

impl SoftPdu for LdpcPdu<'_> {
    fn len(&self) -> usize {
        self.pdu_bits
    }

    fn iteration(&self) -> usize {
        self.states.iter().map(|s| s.iteration).max().unwrap_or(0)
    }

    fn iteration_at(&self, b: usize) -> usize {
        self.states[self.map.locate(b).0].iteration
    }

    fn confident_bit(&self, b: usize, l_t: f64) -> Option<u8> {
        let (cb, idx) = self.map.locate(b);
        let st = &self.states[cb];
        let l = st.llr[self.code.info_positions()[idx]];
        (st.crc_passed || f64::from(l.abs()) > l_t).then_some(u8::from(l < 0.0))
    }

    fn crc_passed(&self) -> bool {
        self.states.iter().all(|s| s.crc_passed)
    }

    fn advance_at(&mut self, b: usize) -> Result<()> {
        let cb = self.map.locate(b).0;
        self.states[cb].iterate(self.code, self.dcfg)
    }
}

enum ScanStop {
    /// First bit that failed the confidence test.
    LowConfidence(usize),
    Malformed,
    End,
}

/// Outcome of one [`PreParser::step`].
#[derive(Debug, Clone, PartialEq)]
pub enum PreParseStep {
    Done(PreParseResult),
    /// Scanning is blocked on this PDU bit; iterate its block and step again.
    NeedIteration(usize),
}

/// Resumable subheader scanner. Accepted subheaders are never revisited.
#[derive(Debug, Clone, Default)]
pub struct PreParser {
    pos: usize,
    seen_ce: bool,
    subheaders: Vec<Subheader>,
    ces: Vec<MacCe>,
}

impl PreParser {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bits accepted so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    fn confident_run(src: &dyn SoftPdu, from: usize, len: usize, l_t: f64) -> std::result::Result<Vec<u8>, usize> {
        (from..from + len).map(|b| src.confident_bit(b, l_t).ok_or(b)).collect()
    }

    fn scan(&mut self, src: &dyn SoftPdu, l_t: f64) -> ScanStop {
        let total = src.len();
        loop {
            if self.pos >= total {
                return ScanStop::End;
            }
            if self.pos + BASE_HEADER_BITS > total {
                return ScanStop::Malformed;
            }
            let mut window = match Self::confident_run(src, self.pos, BASE_HEADER_BITS, l_t) {
                Ok(w) => w,
                Err(b) => return ScanStop::LowConfidence(b),
            };
            let lcid = crate::bits::read_uint(&window, 2, 6) as u8;
            if has_length_field(lcid) {
                let width = if window[1] == 1 { 16 } else { 8 };
                if self.pos + BASE_HEADER_BITS + width > total {
                    return ScanStop::Malformed;
                }
                match Self::confident_run(src, self.pos + BASE_HEADER_BITS, width, l_t) {
                    Ok(l) => window.extend(l),
                    Err(b) => return ScanStop::LowConfidence(b),
                }
            }
            let (header, next) = match decode_subheader(&window, self.pos, total) {
                Ok(x) => x,
                Err(_) => return ScanStop::Malformed,
            };
            match lcid_kind(header.lcid) {
                LcidKind::Padding => return ScanStop::End,
                LcidKind::Ce(kind) => {
                    let start = self.pos + header.header_bits();
                    let payload = match Self::confident_run(src, start, next - start, l_t) {
                        Ok(p) => p,
                        Err(b) => return ScanStop::LowConfidence(b),
                    };
                    self.seen_ce = true;
                    self.ces.push(MacCe { kind, payload });
                }
                LcidKind::Sdu if self.seen_ce => return ScanStop::Malformed,
                _ => {}
            }
            self.subheaders.push(header);
            self.pos = next;
        }
    }

    fn finish(&mut self, src: &dyn SoftPdu, stop_reason: StopReason) -> PreParseStep {
        PreParseStep::Done(self.result(src, stop_reason))
    }

    fn result(&mut self, src: &dyn SoftPdu, stop_reason: StopReason) -> PreParseResult {
        PreParseResult {
            subheaders: std::mem::take(&mut self.subheaders),
            ces: std::mem::take(&mut self.ces),
            complete: stop_reason == StopReason::End,
            stop_reason,
            iteration: src.iteration(),
        }
    }

    /// Gives up with whatever has been accepted so far.
    pub fn abort(&mut self, src: &dyn SoftPdu) -> PreParseResult {
        self.result(src, StopReason::LowConfidence)
    }

    /// Rescans from the first unaccepted bit without iterating the decoder.
    pub fn step(&mut self, src: &dyn SoftPdu, cfg: &PreParseConfig) -> Result<PreParseStep> {
        if !(cfg.l_t > 0.0) {
            return Err(Error::Config(format!("l_t must be positive, got {}", cfg.l_t)));
        }
        Ok(match self.scan(src, cfg.l_t) {
            ScanStop::End => self.finish(src, StopReason::End),
            ScanStop::Malformed => self.finish(src, StopReason::Malformed),
            ScanStop::LowConfidence(_) if src.crc_passed() => self.finish(src, StopReason::CrcPass),
            ScanStop::LowConfidence(b) if src.iteration_at(b) >= cfg.i_max => {
                self.finish(src, StopReason::LowConfidence)
            }
            ScanStop::LowConfidence(b) => PreParseStep::NeedIteration(b),
        })
    }
}

/// Walks subheaders from the PDU start, accepting only confident bits and
/// iterating the block that holds the first unconfident bit until scanning
/// ends, its block reaches the cap, or CRC passes.
pub fn pre_parse(src: &mut dyn SoftPdu, cfg: &PreParseConfig) -> Result<PreParseResult> {
    let mut p = PreParser::new();
    loop {
        match p.step(src, cfg)? {
            PreParseStep::Done(r) => return Ok(r),
            PreParseStep::NeedIteration(b) => src.advance_at(b)?,
        }
    }
}

/// Pre-parse of a single-code-block PDU held in `state`.
pub fn pre_parse_block(
    state: &mut DecoderState,
    code: &LdpcCode,
    dcfg: &DecoderConfig,
    cfg: &PreParseConfig,
    pdu_bits: usize,
) -> Result<PreParseResult> {
    let map = PayloadMap::for_code(code);
    if pdu_bits > map.payload_per_cb {
        return Err(Error::InvalidArgument(format!(
            "PDU of {pdu_bits} bits does not fit one code block of {} payload bits",
            map.payload_per_cb
        )));
    }
    let mut src = LdpcPdu { states: std::slice::from_mut(state), code, dcfg, map, pdu_bits };
    pre_parse(&mut src, cfg)
}

/// Labeled per-iteration statistics for calibration.
#[derive(Debug, Clone, Default)]
pub struct Ensemble {
    /// Statistic after each iteration 1..=i_max.
    pub traces: Vec<Vec<f64>>,
    /// Iteration at which CRC first passed, if it did within the cap.
    pub crc_iter: Vec<Option<usize>>,
    pub llr_hist: LlrHistogram,
}

impl Ensemble {
    /// Decodes `blocks` random codewords per SNR point for the full `i_max`.
    pub fn generate(
        code: &LdpcCode,
        dcfg: &DecoderConfig,
        statistic: Statistic,
        snr_points: &[f64],
        blocks: usize,
        seed: u64,
    ) -> Self {
        let mut e = Ensemble::default();
        let info = code.info_positions();
        for (pi, &snr) in snr_points.iter().enumerate() {
            for b in 0..blocks {
                let s = seed.wrapping_add((pi * blocks + b) as u64);
                let (_, cw) = random_codeword(code, s);
                let mut st = DecoderState::new(transmit_at(&cw, snr, s), code);
                let mut trace = Vec::with_capacity(dcfg.i_max);
                let mut crc = None;
                let mut seen: Vec<(f32, u8)> = Vec::new();
                while st.iteration < dcfg.i_max {
                    st.iterate(code, dcfg).expect("below cap");
                    trace.push(statistic.of(&st.llr));
                    if crc.is_none() {
                        seen.extend(info.iter().map(|&p| (st.llr[p], cw[p])));
                        if st.crc_passed {
                            crc = Some(st.iteration);
                        }
                    }
                }
                // Confidence is only ever consulted on blocks that end up decoding.
                if crc.is_some() {
                    for (l, b) in seen {
                        e.llr_hist.add(l, b);
                    }
                }
                e.traces.push(trace);
                e.crc_iter.push(crc);
            }
        }
        e
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Joint (false-ACK, false-NACK, mean i_prediction) over the ensemble.
    pub fn evaluate(&self, th: &PredictionThresholds) -> (f64, f64, f64) {
        let (mut fa, mut fnack, mut iters) = (0usize, 0usize, 0usize);
        for (trace, crc) in self.traces.iter().zip(&self.crc_iter) {
            let (verdict, at) = decide(trace, *crc, th);
            iters += at;
            match (verdict, crc.is_some()) {
                (Decodability::Decodable, false) => fa += 1,
                (Decodability::NotDecodable, true) => fnack += 1,
                _ => {}
            }
        }
        let n = self.len().max(1) as f64;
        (fa as f64 / n, fnack as f64 / n, iters as f64 / n)
    }
}

/// Replays the prediction rule on a recorded trace.
pub fn decide(trace: &[f64], crc_iter: Option<usize>, th: &PredictionThresholds) -> (Decodability, usize) {
    for (i, &m) in trace.iter().enumerate() {
        let it = i + 1;
        if crc_iter.is_some_and(|c| c <= it) {
            return (Decodability::Decodable, it);
        }
        if let Some(d) = th.classify(it, m) {
            return (d, it);
        }
    }
    (Decodability::NotDecodable, trace.len())
}

/// Counts of (|LLR| bin, correct/incorrect sign).
#[derive(Debug, Clone)]
pub struct LlrHistogram {
    pub bin_width: f64,
    pub total: Vec<u64>,
    pub errors: Vec<u64>,
}

impl Default for LlrHistogram {
    fn default() -> Self {
        Self { bin_width: 0.05, total: vec![0; 4001], errors: vec![0; 4001] }
    }
}

impl LlrHistogram {
    pub fn add(&mut self, llr: f32, bit: u8) {
        let a = f64::from(llr.abs());
        let i = ((a / self.bin_width) as usize).min(self.total.len() - 1);
        self.total[i] += 1;
        if u8::from(llr < 0.0) != bit {
            self.errors[i] += 1;
        }
    }

    /// Smallest bin edge t with P(error | |LLR| > t) at or below `target`.
    pub fn threshold_for(&self, target: f64) -> Option<f64> {
        let (mut tot, mut err) = (0u64, 0u64);
        let mut best = None;
        for i in (0..self.total.len()).rev() {
            tot += self.total[i];
            err += self.errors[i];
            if tot > 0 && (err as f64) <= target * tot as f64 {
                best = Some(i);
            }
        }
        best.map(|i| (i as f64 * self.bin_width).max(self.bin_width))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub snr_points: Vec<f64>,
    pub blocks_per_point: usize,
    pub seed: u64,
    pub target_false_ack: f64,
    pub target_false_nack: f64,
    /// Fraction of each target the calibration set may use.
    pub safety: f64,
    /// Relative headroom added above the selected A quantile.
    pub margin: f64,
    pub bit_error_target: f64,
    pub statistic: Statistic,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            snr_points: vec![crate::channel::DEFAULT_BASE_OPERATING_SNR_DB],
            blocks_per_point: 10_000,
            seed: 0xCA11,
            target_false_ack: 0.001,
            target_false_nack: 0.01,
            safety: 0.5,
            margin: 0.0,
            bit_error_target: 1e-4,
            statistic: Statistic::MeanAbs,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub l_t: f64,
    pub false_ack: f64,
    pub false_nack: f64,
    pub mean_i_prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub thresholds: PredictionThresholds,
    pub summary: CalibrationSummary,
    pub blocks: usize,
    pub undecodable: usize,
    pub level_ack: f64,
    pub level_nack: f64,
}

pub fn calibrate_thresholds(code: &LdpcCode, dcfg: &DecoderConfig, cfg: &CalibrationConfig) -> Result<CalibrationReport> {
    check_target(cfg.target_false_ack)?;
    check_target(cfg.target_false_nack)?;
    if cfg.snr_points.is_empty() || cfg.blocks_per_point == 0 {
        return Err(Error::InvalidArgument("calibration needs SNR points and a block budget".into()));
    }
    let ens = Ensemble::generate(code, dcfg, cfg.statistic, &cfg.snr_points, cfg.blocks_per_point, cfg.seed);
    calibrate_from_ensemble(&ens, dcfg.i_max, cfg)
}

fn check_target(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("target rate {t} outside (0, 1]")))
    }
}

fn sorted_column(traces: &[&Vec<f64>], i: usize) -> Vec<f64> {
    let mut v: Vec<f64> = traces.iter().map(|t| t[i]).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Upper quantile: the value with a fraction `s` of samples at or above it.
fn upper_quantile(sorted: &[f64], s: f64) -> f64 {
    let n = sorted.len();
    let idx = ((1.0 - s) * (n - 1) as f64).ceil() as usize;
    sorted[idx.min(n - 1)]
}

fn lower_quantile(sorted: &[f64], u: f64) -> f64 {
    let n = sorted.len();
    let idx = (u * (n - 1) as f64).floor() as usize;
    sorted[idx.min(n - 1)]
}

const LEVELS: [f64; 25] = [
    0.0, 1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 3e-3, 5e-3, 7e-3, 0.01, 0.015, 0.02, 0.03, 0.05, 0.07, 0.1, 0.15, 0.2, 0.3, 0.4,
    0.5, 0.6, 0.7, 0.85, 1.0,
];

/// Quantile sweep over a labeled ensemble.
///
/// A is picked first from the undecodable population at a common upper
/// quantile level, N then from the decodable population at a common lower
/// level; each level is the loosest meeting its share of the target.
pub fn calibrate_from_ensemble(ens: &Ensemble, i_max: usize, cfg: &CalibrationConfig) -> Result<CalibrationReport> {
    check_target(cfg.target_false_ack)?;
    check_target(cfg.target_false_nack)?;
    if ens.is_empty() || ens.traces.iter().any(|t| t.len() < i_max) {
        return Err(Error::Calibration("ensemble traces shorter than the iteration cap".into()));
    }
    let bad: Vec<&Vec<f64>> = ens.traces.iter().zip(&ens.crc_iter).filter(|(_, c)| c.is_none()).map(|(t, _)| t).collect();
    let good: Vec<&Vec<f64>> = ens.traces.iter().zip(&ens.crc_iter).filter(|(_, c)| c.is_some()).map(|(t, _)| t).collect();
    let all: Vec<&Vec<f64>> = ens.traces.iter().collect();
    let floor: Vec<f64> = (0..i_max).map(|i| sorted_column(&all, i)[0]).collect();
    let bad_cols: Vec<Vec<f64>> = (0..i_max).map(|i| sorted_column(&bad, i)).collect();
    let good_cols: Vec<Vec<f64>> = (0..i_max).map(|i| sorted_column(&good, i)).collect();
    let n = ens.len() as f64;

    let a_for = |s: f64| -> Vec<f64> {
        (0..i_max)
            .map(|i| {
                if s >= 1.0 || bad_cols[i].is_empty() {
                    floor[i]
                } else {
                    upper_quantile(&bad_cols[i], s) * (1.0 + cfg.margin)
                }
            })
            .collect()
    };
    let ack_rate = |a: &[f64]| -> f64 {
        bad.iter().filter(|t| (0..i_max).any(|i| t[i] > a[i])).count() as f64 / n
    };
    let ack_budget = if cfg.target_false_ack >= 1.0 { 1.0 } else { cfg.target_false_ack * cfg.safety };
    let level_ack = LEVELS.iter().copied().filter(|&s| ack_rate(&a_for(s)) <= ack_budget).fold(None, |_, s| Some(s));
    let Some(level_ack) = level_ack else {
        let a = a_for(0.0);
        return Err(Error::Calibration(format!(
            "false-ACK target {} unreachable: strictest thresholds give {:.5}",
            cfg.target_false_ack,
            ack_rate(&a)
        )));
    };
    let a_vec = a_for(level_ack);

    let n_for = |u: f64| -> Vec<f64> {
        (0..i_max)
            .map(|i| {
                let raw = if u <= 0.0 || good_cols[i].is_empty() { f64::NEG_INFINITY } else { lower_quantile(&good_cols[i], u) };
                let cap = a_vec[i] - 1e-9 * a_vec[i].abs().max(1.0);
                raw.min(cap)
            })
            .collect()
    };
    let build = |nv: Vec<f64>| PredictionThresholds { a_vec: a_vec.clone(), n_vec: nv, i_max, statistic: cfg.statistic };
    let nack_budget = cfg.target_false_nack * cfg.safety;
    let mut level_nack = None;
    for &u in &LEVELS {
        if ens.evaluate(&build(n_for(u))).1 <= nack_budget {
            level_nack = Some(u);
        }
    }
    let Some(level_nack) = level_nack else {
        let (_, fnack, _) = ens.evaluate(&build(n_for(0.0)));
        return Err(Error::Calibration(format!(
            "false-NACK target {} unreachable: loosest thresholds give {fnack:.5}",
            cfg.target_false_nack
        )));
    };
    let mut n_vec = n_for(level_nack);
    // -inf is not representable in the calibration file.
    for (nv, av) in n_vec.iter_mut().zip(&a_vec) {
        if !nv.is_finite() {
            *nv = av.min(0.0) - 1.0;
        }
    }
    let thresholds = build(n_vec);
    thresholds.validate()?;
    let (fa, fnack, mean_i) = ens.evaluate(&thresholds);
    let l_t = ens
        .llr_hist
        .threshold_for(cfg.bit_error_target)
        .ok_or_else(|| Error::Calibration("no |LLR| threshold meets the bit error target".into()))?;
    Ok(CalibrationReport {
        thresholds,
        summary: CalibrationSummary { l_t, false_ack: fa, false_nack: fnack, mean_i_prediction: mean_i },
        blocks: ens.len(),
        undecodable: bad.len(),
        level_ack,
        level_nack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::random_bits;
    use crate::fec::{attach_crc, segment_transport_block};
    use crate::mac::{build_pdu, parse_pdu, CeKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat(v: f64, i_max: usize) -> Vec<f64> {
        vec![v; i_max]
    }

    #[test]
    fn threshold_validation() {
        assert!(PredictionThresholds::new(flat(5.0, 20), flat(1.0, 20), 20).is_ok());
        assert!(matches!(PredictionThresholds::new(flat(5.0, 19), flat(1.0, 19), 20), Err(Error::Config(_))));
        assert!(matches!(PredictionThresholds::new(flat(1.0, 20), flat(1.0, 20), 20), Err(Error::Config(_))));
    }

    #[test]
    fn short_thresholds_are_a_config_error() {
        let code = LdpcCode::default_code();
        let dcfg = DecoderConfig::default();
        let th = PredictionThresholds { a_vec: flat(5.0, 5), n_vec: flat(1.0, 5), i_max: 5, statistic: Statistic::MeanAbs };
        let mut st = DecoderState::new(vec![1.0; code.n()], &code);
        assert!(matches!(predict_decodability(&mut st, &code, &dcfg, &th), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_is_decodable_at_first_iteration() {
        let code = LdpcCode::default_code();
        let dcfg = DecoderConfig::default();
        let th = PredictionThresholds::new(flat(30.0, 20), flat(0.5, 20), 20).unwrap();
        let (_, cw) = random_codeword(&code, 1);
        let mut st = DecoderState::new(transmit_at(&cw, f64::INFINITY, 1), &code);
        let out = predict_decodability(&mut st, &code, &dcfg, &th).unwrap();
        assert_eq!((out.status, out.i_prediction), (Decodability::Decodable, 1));
        assert_eq!(st.iteration, 1);
    }

    #[test]
    fn zero_llrs_run_to_cap() {
        let code = LdpcCode::default_code();
        let dcfg = DecoderConfig::default();
        let th = PredictionThresholds::new(flat(3.0, 20), flat(-1.0, 20), 20).unwrap();
        let mut st = DecoderState::new(vec![0.0; code.n()], &code);
        let out = predict_decodability(&mut st, &code, &dcfg, &th).unwrap();
        assert_eq!((out.status, out.i_prediction), (Decodability::NotDecodable, 20));
        assert_eq!(out.mean_abs_llr_trace.len(), 20);
    }

    #[test]
    fn quantile_statistic() {
        let llr = [1.0f32, -2.0, 3.0, -4.0, 5.0];
        assert_eq!(Statistic::AbsQuantile(0.0).of(&llr), 1.0);
        assert_eq!(Statistic::AbsQuantile(0.5).of(&llr), 3.0);
        assert_eq!(Statistic::MeanAbs.of(&llr), 3.0);
    }

    fn encode_pdu(code: &LdpcCode, bits: &[u8], snr: f64, seed: u64) -> Vec<DecoderState> {
        let tb = attach_crc(bits);
        let cbs = segment_transport_block(&tb, code.k(), seed).unwrap();
        cbs.iter()
            .enumerate()
            .map(|(i, cb)| {
                let cw = crate::fec::encode_codeblock(cb, code).unwrap();
                DecoderState::new(transmit_at(&cw, snr, seed * 131 + i as u64), code)
            })
            .collect()
    }

    fn sample_pdu(rng: &mut ChaCha8Rng, target: usize) -> crate::mac::MacPdu {
        let mut sdus = Vec::new();
        let mut used = 8 + 16;
        loop {
            let bytes = rng.gen_range(4..40);
            if used + 16 + 8 * bytes > target - 8 {
                break;
            }
            used += 16 + 8 * bytes;
            sdus.push((rng.gen_range(4..=6u8), random_bits(rng, 8 * bytes)));
        }
        let bsr = MacCe::new(CeKind::ShortBsr, random_bits(rng, 8)).unwrap();
        build_pdu(&sdus, &[bsr], target).unwrap()
    }

    #[test]
    fn noiseless_pre_parse_matches_parser() {
        let code = LdpcCode::default_code();
        let dcfg = DecoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for target in [600, 2000] {
            let pdu = sample_pdu(&mut rng, target);
            let bits = pdu.to_bits();
            let mut states = encode_pdu(&code, &bits, f64::INFINITY, 9);
            let cfg = PreParseConfig { l_t: 4.0, i_max: 20 };
            let map = PayloadMap::for_code(&code);
            assert_eq!(states.len(), map.blocks_for(bits.len()));
            let mut src = LdpcPdu { states: &mut states, code: &code, dcfg: &dcfg, map, pdu_bits: bits.len() };
            let res = pre_parse(&mut src, &cfg).unwrap();
            let truth = parse_pdu(&bits).unwrap();
            assert!(res.complete);
            assert_eq!(res.stop_reason, StopReason::End);
            assert_eq!(res.subheaders, truth.subpdus.iter().map(|s| s.header).collect::<Vec<_>>());
            assert_eq!(res.ces, truth.ces());
        }
    }

    #[test]
    fn zero_llrs_give_no_subheaders() {
        let code = LdpcCode::default_code();
        let dcfg = DecoderConfig::default();
        let mut st = DecoderState::new(vec![0.0; code.n()], &code);
        let res = pre_parse_block(&mut st, &code, &dcfg, &PreParseConfig { l_t: 2.0, i_max: 20 }, 500).unwrap();
        assert!(res.subheaders.is_empty());
        assert_eq!(res.stop_reason, StopReason::LowConfidence);
        assert!(!res.complete);
    }

    #[test]
    fn histogram_threshold() {
        let mut h = LlrHistogram::default();
        for i in 0..1000 {
            h.add(0.5, u8::from(i % 2 == 0));
            h.add(3.0, 0);
        }
        h.add(-3.0, 0);
        assert_eq!(h.threshold_for(2e-3), Some(0.55));
        assert_eq!(h.threshold_for(0.3), Some(0.05));
        assert_eq!(h.threshold_for(1e-4), None);
    }

    fn synthetic_ensemble(seed: u64) -> Ensemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = Ensemble::default();
        for _ in 0..4000 {
            let decodable = rng.gen_bool(0.9);
            let base: f64 = rng.gen_range(3.0..5.0);
            let trace: Vec<f64> = (1..=10)
                .map(|i| if decodable { base * 1.3f64.powi(i) } else { base + 0.2 * i as f64 + rng.gen_range(0.0..1.0) })
                .collect();
            e.traces.push(trace);
            e.crc_iter.push(decodable.then_some(10));
        }
        e
    }

    #[test]
    fn degenerate_ack_target_accepts_everything() {
        let e = synthetic_ensemble(1);
        let cfg = CalibrationConfig { target_false_ack: 1.0, ..Default::default() };
        let r = calibrate_from_ensemble(&e, 10, &cfg);
        // l_t cannot be derived from an empty histogram.
        assert!(matches!(r, Err(Error::Calibration(_))));
        let mut e = e;
        e.llr_hist.add(10.0, 0);
        let r = calibrate_from_ensemble(&e, 10, &cfg).unwrap();
        for i in 0..10 {
            let min = e.traces.iter().map(|t| t[i]).fold(f64::INFINITY, f64::min);
            assert_eq!(r.thresholds.a_vec[i], min);
        }
    }

    #[test]
    fn tighter_ack_target_never_lowers_a() {
        let mut e = synthetic_ensemble(2);
        e.llr_hist.add(10.0, 0);
        let mut prev: Option<Vec<f64>> = None;
        for t in [0.05, 0.02, 0.01, 0.005, 0.002] {
            let cfg = CalibrationConfig { target_false_ack: t, target_false_nack: 0.05, ..Default::default() };
            let r = calibrate_from_ensemble(&e, 10, &cfg).unwrap();
            assert!(r.summary.false_ack <= t * cfg.safety);
            if let Some(p) = &prev {
                assert!(r.thresholds.a_vec.iter().zip(p).all(|(a, b)| a >= b));
            }
            prev = Some(r.thresholds.a_vec);
        }
    }

    #[test]
    fn calibration_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("th.csv");
        let th = PredictionThresholds::new(vec![5.0, 6.5, 7.25], vec![1.0, 2.0, -3.0], 3).unwrap();
        let s = CalibrationSummary { l_t: 3.5, false_ack: 0.0004, false_nack: 0.003, mean_i_prediction: 4.2 };
        th.write_csv(&p, &s).unwrap();
        let (th2, s2) = PredictionThresholds::load_csv(&p).unwrap();
        assert_eq!(th, th2);
        assert_eq!(s, s2);
        std::fs::write(&p, "iter,a_i,n_i\n1,5,1\n3,6,2\n").unwrap();
        assert!(matches!(PredictionThresholds::load_csv(&p), Err(Error::Parse { line: 3, .. })));
    }
}
