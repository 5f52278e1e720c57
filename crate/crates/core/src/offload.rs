//! Offload plane: midhaul link, offload records, the offload decision rule,
//! RTT estimation and the remote completion pool.

use crate::fec::{DecoderConfig, DecoderState, LdpcCode};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// FIFO serializing link with fixed propagation delay.
#[derive(Debug, Clone, PartialEq)]
pub struct MhLinkModel {
    pub one_way_latency_us: f64,
    /// Capacity in bits per microsecond; infinite disables serialization delay.
    pub bandwidth_bits_per_us: f64,
    busy_until_us: f64,
    in_flight: VecDeque<(f64, u64)>,
    sent_bits: u64,
    busy_us: f64,
}

/// Timing of one transmission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transmission {
    pub start_us: f64,
    pub end_us: f64,
    pub deliver_us: f64,
}

impl MhLinkModel {
    pub fn new(one_way_latency_us: f64, bandwidth_bits_per_us: f64) -> Self {
        Self {
            one_way_latency_us,
            bandwidth_bits_per_us,
            busy_until_us: 0.0,
            in_flight: VecDeque::new(),
            sent_bits: 0,
            busy_us: 0.0,
        }
    }

    pub fn serialization_us(&self, size_bits: u64) -> f64 {
        if self.bandwidth_bits_per_us.is_infinite() {
            0.0
        } else {
            size_bits as f64 / self.bandwidth_bits_per_us
        }
    }

    /// Time the next transmission could start.
    pub fn busy_until_us(&self) -> f64 {
        self.busy_until_us
    }

    /// Queues `size_bits` behind earlier sends.
    pub fn send(&mut self, now_us: f64, id: u64, size_bits: u64) -> Transmission {
        let start_us = now_us.max(self.busy_until_us);
        let ser = self.serialization_us(size_bits);
        let end_us = start_us + ser;
        self.busy_until_us = end_us;
        self.busy_us += ser;
        self.sent_bits += size_bits;
        let deliver_us = end_us + self.one_way_latency_us;
        self.in_flight.push_back((deliver_us, id));
        Transmission { start_us, end_us, deliver_us }
    }

    /// Removes and returns ids delivered by `now_us`, in send order.
    pub fn deliver_until(&mut self, now_us: f64) -> Vec<u64> {
        let mut out = Vec::new();
        while let Some(&(t, id)) = self.in_flight.front() {
            if t > now_us {
                break;
            }
            self.in_flight.pop_front();
            out.push(id);
        }
        out
    }

    pub fn sent_bits(&self) -> u64 {
        self.sent_bits
    }

    /// Total time the link spent serializing.
    pub fn busy_us(&self) -> f64 {
        self.busy_us
    }
}

/// Symmetric saturating LLR quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Quantizer {
    pub q_bits: u8,
    /// |LLR| mapped to the largest code.
    pub clip: f32,
}

impl Default for Quantizer {
    fn default() -> Self {
        Self { q_bits: 8, clip: 24.0 }
    }
}

impl Quantizer {
    fn max_code(&self) -> i32 {
        (1 << (self.q_bits - 1)) - 1
    }

    fn step(&self) -> f32 {
        self.clip / self.max_code() as f32
    }

    pub fn quantize(&self, llr: &[f32]) -> Vec<i16> {
        let m = self.max_code();
        let step = self.step();
        llr.iter().map(|&l| ((l / step).round() as i32).clamp(-m, m) as i16).collect()
    }

    pub fn dequantize(&self, q: &[i16]) -> Vec<f32> {
        let step = self.step();
        q.iter().map(|&c| f32::from(c) * step).collect()
    }
}

/// Decoding context carried with offloaded LLRs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadContext {
    pub code_id: u32,
    pub iteration: u16,
    pub budget_us: u32,
    /// Bit l set when LCID l was identified.
    pub content_map: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadRecord {
    pub tb_id: u64,
    pub context: OffloadContext,
    pub sent_us: f64,
    pub quantizer: Quantizer,
    /// Codeword length of each block.
    pub n: u32,
    /// Quantized LLRs, one vector of `n` per code block.
    pub llrs: Vec<Vec<i16>>,
}

pub const RECORD_MAGIC: [u8; 3] = *b"SRO";
pub const RECORD_VERSION: u8 = 1;
/// Bytes before the packed LLR block.
pub const RECORD_HEADER_BYTES: usize = 3 + 1 + 8 + 4 + 2 + 4 + 8 + 8 + 1 + 4 + 4 + 2;
pub const RECORD_HEADER_BITS: u64 = 8 * RECORD_HEADER_BYTES as u64;

impl OffloadRecord {
    pub fn from_states(
        tb_id: u64,
        states: &[DecoderState],
        context: OffloadContext,
        quantizer: Quantizer,
        sent_us: f64,
    ) -> Self {
        let n = states.first().map_or(0, |s| s.llr.len()) as u32;
        let llrs = states.iter().map(|s| quantizer.quantize(&s.llr)).collect();
        Self { tb_id, context, sent_us, quantizer, n, llrs }
    }

    /// Wire size in bits for `blocks` code blocks of length `n`.
    pub fn size_for(n: usize, blocks: usize, q_bits: u8) -> u64 {
        (n * blocks * q_bits as usize) as u64 + RECORD_HEADER_BITS
    }

    pub fn size_bits(&self) -> u64 {
        Self::size_for(self.n as usize, self.llrs.len(), self.quantizer.q_bits)
    }

    /// Versioned byte layout, all integers big-endian:
    ///
    /// ```text
    /// "SRO" version:u8 tb_id:u64 code_id:u32 iteration:u16 budget_us:u32
    /// content_map:u64 sent_us:f64 q_bits:u8 clip:f32 n:u32 blocks:u16
    /// then blocks*n two's-complement values of q_bits each, MSB first,
    /// zero-padded to a whole byte.
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RECORD_HEADER_BYTES + self.llrs.len() * self.n as usize);
        out.extend_from_slice(&RECORD_MAGIC);
        out.push(RECORD_VERSION);
        out.extend_from_slice(&self.tb_id.to_be_bytes());
        out.extend_from_slice(&self.context.code_id.to_be_bytes());
        out.extend_from_slice(&self.context.iteration.to_be_bytes());
        out.extend_from_slice(&self.context.budget_us.to_be_bytes());
        out.extend_from_slice(&self.context.content_map.to_be_bytes());
        out.extend_from_slice(&self.sent_us.to_be_bytes());
        out.push(self.quantizer.q_bits);
        out.extend_from_slice(&self.quantizer.clip.to_be_bytes());
        out.extend_from_slice(&self.n.to_be_bytes());
        out.extend_from_slice(&(self.llrs.len() as u16).to_be_bytes());
        let q = u32::from(self.quantizer.q_bits);
        let mask = (1u64 << q) - 1;
        let (mut acc, mut nacc) = (0u64, 0u32);
        for v in self.llrs.iter().flatten() {
            acc = (acc << q) | (*v as i64 as u64 & mask);
            nacc += q;
            while nacc >= 8 {
                nacc -= 8;
                out.push((acc >> nacc) as u8);
            }
        }
        if nacc > 0 {
            out.push((acc << (8 - nacc)) as u8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::InvalidArgument(format!("offload record: {why}"));
        if bytes.len() < RECORD_HEADER_BYTES {
            return Err(bad("truncated header"));
        }
        if bytes[..3] != RECORD_MAGIC {
            return Err(bad("bad magic"));
        }
        if bytes[3] != RECORD_VERSION {
            return Err(bad(&format!("unsupported version {}", bytes[3])));
        }
        let mut at = 4;
        let mut take = |k: usize| {
            let s = &bytes[at..at + k];
            at += k;
            s
        };
        let tb_id = u64::from_be_bytes(take(8).try_into().unwrap());
        let code_id = u32::from_be_bytes(take(4).try_into().unwrap());
        let iteration = u16::from_be_bytes(take(2).try_into().unwrap());
        let budget_us = u32::from_be_bytes(take(4).try_into().unwrap());
        let content_map = u64::from_be_bytes(take(8).try_into().unwrap());
        let sent_us = f64::from_be_bytes(take(8).try_into().unwrap());
        let q_bits = take(1)[0];
        let clip = f32::from_be_bytes(take(4).try_into().unwrap());
        let n = u32::from_be_bytes(take(4).try_into().unwrap());
        let blocks = u16::from_be_bytes(take(2).try_into().unwrap()) as usize;
        if !(2..=16).contains(&q_bits) {
            return Err(bad("q_bits outside 2..=16"));
        }
        let q = u32::from(q_bits);
        let count = blocks * n as usize;
        let need = (count * q as usize).div_ceil(8);
        let body = &bytes[RECORD_HEADER_BYTES..];
        if body.len() != need {
            return Err(bad("LLR block length mismatch"));
        }
        let mut vals = Vec::with_capacity(count);
        let (mut acc, mut nacc) = (0u64, 0u32);
        let mut it = body.iter();
        for _ in 0..count {
            while nacc < q {
                acc = (acc << 8) | u64::from(*it.next().expect("length checked"));
                nacc += 8;
            }
            nacc -= q;
            let raw = (acc >> nacc) & ((1u64 << q) - 1);
            let v = if raw >> (q - 1) == 1 { raw as i64 - (1i64 << q) } else { raw as i64 };
            vals.push(v as i16);
        }
        let llrs = if n == 0 { vec![Vec::new(); blocks] } else { vals.chunks(n as usize).map(<[i16]>::to_vec).collect() };
        Ok(Self {
            tb_id,
            context: OffloadContext { code_id, iteration, budget_us, content_map },
            sent_us,
            quantizer: Quantizer { q_bits, clip },
            n,
            llrs,
        })
    }
}

/// Offload rule: move when `l_o - l_mh < l_q`.
pub fn offload_decision(l_o_us: f64, l_mh_us: f64, l_q_us: f64) -> bool {
    l_o_us - l_mh_us < l_q_us
}

/// One evaluated decision, as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub period: u64,
    pub worker: usize,
    pub queue_budget_us: f64,
    pub l_o_us: f64,
    pub l_mh_us: f64,
    pub l_q_us: f64,
    pub rule: bool,
    pub guard: bool,
    pub offloaded: bool,
}

impl DecisionRecord {
    /// Whether the logged outcome is what the rule gives on the logged inputs.
    pub fn replays(&self) -> bool {
        self.rule == offload_decision(self.l_o_us, self.l_mh_us, self.l_q_us) && self.offloaded == (self.rule && self.guard)
    }
}

/// The single edge offload queue: records waiting for the link.
#[derive(Debug, Clone, Default)]
pub struct OffloadQueueState {
    /// (task arrival, transmission start) of queued records.
    waiting: VecDeque<(f64, f64)>,
}

impl OffloadQueueState {
    pub fn push(&mut self, arrival_us: f64, tx_start_us: f64) {
        self.waiting.push_back((arrival_us, tx_start_us));
    }

    fn settle(&mut self, now_us: f64) {
        while self.waiting.front().is_some_and(|&(_, s)| s <= now_us) {
            self.waiting.pop_front();
        }
    }

    /// Age of the oldest record still waiting for the link, zero if none.
    pub fn head_latency_us(&mut self, now_us: f64) -> f64 {
        self.settle(now_us);
        self.waiting.front().map_or(0.0, |&(a, _)| now_us - a)
    }

    pub fn len(&mut self, now_us: f64) -> usize {
        self.settle(now_us);
        self.waiting.len()
    }

    pub fn is_empty(&mut self, now_us: f64) -> bool {
        self.len(now_us) == 0
    }
}

/// EWMA of observed offload round trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttEstimator {
    pub alpha: f64,
    pub bootstrap_rtt_us: f64,
    estimate: Option<f64>,
    samples: u64,
}

impl RttEstimator {
    pub fn new(alpha: f64, bootstrap_rtt_us: f64) -> Self {
        Self { alpha, bootstrap_rtt_us, estimate: None, samples: 0 }
    }

    pub fn observe(&mut self, rtt_us: f64) {
        self.samples += 1;
        self.estimate = Some(match self.estimate {
            None => rtt_us,
            Some(e) => e + self.alpha * (rtt_us - e),
        });
    }

    pub fn rtt_us(&self) -> f64 {
        self.estimate.unwrap_or(self.bootstrap_rtt_us)
    }

    /// One-way latency assuming a symmetric path.
    pub fn one_way_us(&self) -> f64 {
        self.rtt_us() / 2.0
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }
}

/// Remote cores; `None` means unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct RemotePool {
    free_at: Option<Vec<f64>>,
    pub busy_us: f64,
}

impl RemotePool {
    pub fn new(cores: Option<usize>) -> Self {
        Self { free_at: cores.map(|c| vec![0.0; c.max(1)]), busy_us: 0.0 }
    }

    /// Start time for `work_us` of decoding that becomes ready at `ready_us`.
    pub fn reserve(&mut self, ready_us: f64, work_us: f64) -> f64 {
        self.busy_us += work_us;
        match &mut self.free_at {
            None => ready_us,
            Some(cores) => {
                let (i, &t) = cores
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
                    .expect("at least one core");
                let start = ready_us.max(t);
                cores[i] = start + work_us;
                start
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemoteStatus {
    Decoded,
    ResidualError,
    DeadlineDrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteResult {
    pub tb_id: u64,
    pub status: RemoteStatus,
    pub finish_us: f64,
    /// Arrival of the feedback event back at the edge.
    pub feedback_us: f64,
    pub iterations: usize,
    /// Decoded information bits per block, empty unless decoded.
    pub info_bits: Vec<Vec<u8>>,
}

/// Finishes an offloaded TB at the remote site.
///
/// `delivered_us` is when the record reached the remote side and
/// `deadline_us` the completion deadline of its content.
pub fn remote_complete(
    rec: &OffloadRecord,
    delivered_us: f64,
    deadline_us: f64,
    pool: &mut RemotePool,
    code: &LdpcCode,
    dcfg: &DecoderConfig,
    feedback_latency_us: f64,
) -> RemoteResult {
    let drop = |t: f64| RemoteResult {
        tb_id: rec.tb_id,
        status: RemoteStatus::DeadlineDrop,
        finish_us: t,
        feedback_us: t + feedback_latency_us,
        iterations: 0,
        info_bits: Vec::new(),
    };
    if delivered_us > deadline_us {
        return drop(delivered_us);
    }
    let start_iter = usize::from(rec.context.iteration);
    let mut states: Vec<DecoderState> = rec
        .llrs
        .iter()
        .map(|q| DecoderState::resume(rec.quantizer.dequantize(q), start_iter, 0.0, code))
        .collect();
    let mut ok = true;
    let mut work = 0.0;
    let mut max_iter = 0;
    for s in &mut states {
        ok &= s.run_to_completion(code, dcfg);
        work += s.cumulative_cost_us;
        max_iter = max_iter.max(s.iteration - start_iter);
    }
    let start = pool.reserve(delivered_us, work);
    let finish_us = start + work;
    if finish_us > deadline_us {
        return RemoteResult { iterations: max_iter, ..drop(finish_us) };
    }
    RemoteResult {
        tb_id: rec.tb_id,
        status: if ok { RemoteStatus::Decoded } else { RemoteStatus::ResidualError },
        finish_us,
        feedback_us: finish_us + feedback_latency_us,
        iterations: max_iter,
        info_bits: if ok { states.iter().map(|s| s.info_bits(code)).collect() } else { Vec::new() },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{random_codeword, transmit_at};
    use proptest::prelude::*;

    #[test]
    fn rule_examples() {
        assert!(offload_decision(12000.0, 10000.0, 3000.0));
        assert!(!offload_decision(15000.0, 10000.0, 5000.0));
        assert!(offload_decision(0.0, 10000.0, 500.0));
    }

    #[test]
    fn link_is_fifo_with_serialization() {
        let mut l = MhLinkModel::new(10000.0, 100.0);
        let a = l.send(0.0, 1, 1000);
        let b = l.send(5.0, 2, 500);
        assert_eq!((a.start_us, a.end_us, a.deliver_us), (0.0, 10.0, 10010.0));
        assert_eq!((b.start_us, b.end_us, b.deliver_us), (10.0, 15.0, 10015.0));
        assert_eq!(l.deliver_until(10012.0), vec![1]);
        assert_eq!(l.deliver_until(20000.0), vec![2]);
        assert_eq!(l.sent_bits(), 1500);
    }

    #[test]
    fn rtt_constant_and_bootstrap() {
        let mut e = RttEstimator::new(0.1, 7777.0);
        assert_eq!(e.rtt_us(), 7777.0);
        for _ in 0..10 {
            e.observe(20000.0);
        }
        assert!((e.rtt_us() - 20000.0).abs() <= 200.0);
        assert_eq!(e.one_way_us(), e.rtt_us() / 2.0);
    }

    #[test]
    fn rtt_step_tracks_within_50_samples() {
        let mut e = RttEstimator::new(0.1, 20000.0);
        for _ in 0..200 {
            e.observe(20000.0);
        }
        let mut k = 0;
        while (e.one_way_us() - 15000.0).abs() > 0.05 * 15000.0 {
            e.observe(30000.0);
            k += 1;
        }
        // 5 ms * 0.9^k <= 0.75 ms gives k = 19.
        let analytic = ((0.75f64 / 5.0).ln() / 0.9f64.ln()).ceil() as usize;
        assert_eq!(k, analytic);
        assert!(k <= 50);
    }

    #[test]
    fn offload_queue_head_latency() {
        let mut q = OffloadQueueState::default();
        assert_eq!(q.head_latency_us(100.0), 0.0);
        q.push(50.0, 200.0);
        q.push(80.0, 300.0);
        assert_eq!(q.head_latency_us(150.0), 100.0);
        assert_eq!(q.head_latency_us(250.0), 170.0);
        assert_eq!(q.head_latency_us(400.0), 0.0);
    }

    #[test]
    fn record_round_trip_and_size() {
        let rec = OffloadRecord {
            tb_id: 42,
            context: OffloadContext { code_id: 1, iteration: 3, budget_us: 20000, content_map: 0b110000 },
            sent_us: 1234.5,
            quantizer: Quantizer::default(),
            n: 5,
            llrs: vec![vec![-127, -1, 0, 1, 127], vec![3, -3, 64, -64, 0]],
        };
        let bytes = rec.to_bytes();
        assert_eq!(bytes.len() as u64 * 8, rec.size_bits());
        assert_eq!(OffloadRecord::from_bytes(&bytes).unwrap(), rec);
        let mut bad = bytes.clone();
        bad[3] = 9;
        assert!(OffloadRecord::from_bytes(&bad).is_err());
        assert!(OffloadRecord::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn noiseless_record_decodes_on_first_resumed_iteration() {
        let code = LdpcCode::default_code();
        let dcfg = DecoderConfig::default();
        let (info, cw) = random_codeword(&code, 4);
        let mut st = DecoderState::new(transmit_at(&cw, f64::INFINITY, 4), &code);
        st.iterate(&code, &dcfg).unwrap();
        let ctx = OffloadContext { code_id: 0, iteration: 1, budget_us: 20000, content_map: 0 };
        let rec = OffloadRecord::from_states(9, &[st], ctx, Quantizer::default(), 0.0);
        let mut pool = RemotePool::new(None);
        let r = remote_complete(&rec, 10000.0, 20000.0, &mut pool, &code, &dcfg, 10000.0);
        assert_eq!(r.status, RemoteStatus::Decoded);
        assert!(r.iterations <= 1);
        assert_eq!(r.info_bits[0], info);
    }

    #[test]
    fn expired_record_is_dropped() {
        let code = LdpcCode::default_code();
        let rec = OffloadRecord {
            tb_id: 1,
            context: OffloadContext { code_id: 0, iteration: 2, budget_us: 5000, content_map: 0 },
            sent_us: 0.0,
            quantizer: Quantizer::default(),
            n: code.n() as u32,
            llrs: vec![vec![10; code.n()]],
        };
        let mut pool = RemotePool::new(Some(2));
        let r = remote_complete(&rec, 10000.0, 5000.0, &mut pool, &code, &DecoderConfig::default(), 10000.0);
        assert_eq!(r.status, RemoteStatus::DeadlineDrop);
    }

    #[test]
    fn constrained_pool_queues_work() {
        let mut p = RemotePool::new(Some(1));
        assert_eq!(p.reserve(0.0, 10.0), 0.0);
        assert_eq!(p.reserve(5.0, 10.0), 10.0);
        let mut p = RemotePool::new(None);
        assert_eq!(p.reserve(5.0, 10.0), 5.0);
    }

    proptest! {
        #[test]
        fn quantizer_saturates_and_keeps_sign(l in -1000.0f32..1000.0) {
            let q = Quantizer::default();
            let c = q.quantize(&[l])[0];
            prop_assert!(c.abs() <= 127);
            if l.abs() > q.clip / 127.0 {
                prop_assert_eq!(c.signum(), l.signum() as i16);
            }
            let back = q.dequantize(&[c])[0];
            prop_assert!((back - l.clamp(-q.clip, q.clip)).abs() <= q.clip / 254.0 + 1e-4);
        }

        #[test]
        fn link_delivery_time(sizes in proptest::collection::vec((0u64..5000, 0.0f64..50.0), 1..50)) {
            let mut l = MhLinkModel::new(1000.0, 10.0);
            let mut now = 0.0;
            let mut last_deliver = 0.0;
            for (i, (size, gap)) in sizes.iter().enumerate() {
                now += gap;
                let t = l.send(now, i as u64, *size);
                prop_assert!(t.start_us >= now);
                prop_assert!((t.deliver_us - (t.start_us + *size as f64 / 10.0 + 1000.0)).abs() < 1e-6);
                prop_assert!(t.deliver_us >= last_deliver);
                last_deliver = t.deliver_us;
            }
            prop_assert!(l.busy_us() <= last_deliver - 1000.0 + 1e-6);
        }
    }
}
