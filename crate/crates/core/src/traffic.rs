//! Multi-cell uplink workload: per-TTI grants filled with MAC PDUs whose
//! content follows configured flow shares, plus CSV trace save/replay.

use crate::bits::{push_uint, random_bits, Bits};
use crate::channel::NUM_MCS;
use crate::mac::{build_pdu, sdu_header_bits, CeKind, MacCe, MacPdu, Subheader, BASE_HEADER_BITS, LCID_PADDING};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

/// Truncated lognormal SDU size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeDist {
    pub median_bytes: f64,
    pub sigma: f64,
    pub min_bytes: usize,
    pub max_bytes: usize,
}

impl SizeDist {
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let d = LogNormal::new(self.median_bytes.ln(), self.sigma).expect("validated");
        (d.sample(rng).round() as usize).clamp(self.min_bytes, self.max_bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub lcid: u8,
    pub budget_us: f64,
    /// Fraction of offered bits.
    pub share: f64,
    pub sizes: SizeDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficProfile {
    pub cells: usize,
    pub cell_bw_mhz: f64,
    pub tti_us: f64,
    pub prbs_per_cell: usize,
    /// Bits per TTI of a fully granted cell at the top MCS.
    pub cell_capacity_bits: u64,
    pub ues_per_cell: usize,
    /// UE SNRs are spread evenly over this range (dB).
    pub ue_snr_db: (f64, f64),
    pub flows: Vec<FlowSpec>,
    /// Target subheader share of PDU bits; 0 draws SDU sizes from the flows.
    pub preparse_bit_ratio: f64,
    /// Mean TTIs a UE stays on one flow before redrawing.
    pub flow_hold_tti: f64,
    pub bsr_period_tti: u64,
    pub phr_period_tti: u64,
}

impl Default for TrafficProfile {
    fn default() -> Self {
        let sizes = SizeDist { median_bytes: 300.0, sigma: 1.0, min_bytes: 20, max_bytes: 1500 };
        Self {
            cells: 1,
            cell_bw_mhz: 20.0,
            tti_us: 1000.0,
            prbs_per_cell: 100,
            cell_capacity_bits: 850_000,
            ues_per_cell: 4,
            ue_snr_db: (12.0, 20.0),
            flows: vec![FlowSpec { lcid: 5, budget_us: 20000.0, share: 1.0, sizes }],
            preparse_bit_ratio: 0.05,
            flow_hold_tti: 20.0,
            bsr_period_tti: 5,
            phr_period_tti: 50,
        }
    }
}

impl TrafficProfile {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(1..=10).contains(&self.cells) {
            return fail(format!("cells must be 1..=10, got {}", self.cells));
        }
        if self.flows.is_empty() {
            return fail("at least one flow is required".into());
        }
        let total: f64 = self.flows.iter().map(|f| f.share).sum();
        if (total - 1.0).abs() > 1e-6 || self.flows.iter().any(|f| f.share < 0.0) {
            return fail(format!("flow shares must be non-negative and sum to 1, got {total}"));
        }
        if !(0.0..=0.2).contains(&self.preparse_bit_ratio) {
            return fail(format!("preparse_bit_ratio {} outside [0, 0.2]", self.preparse_bit_ratio));
        }
        for f in &self.flows {
            if !(1..=32).contains(&f.lcid) || f.budget_us <= 0.0 {
                return fail(format!("flow lcid {} / budget {} invalid", f.lcid, f.budget_us));
            }
            let s = &f.sizes;
            if !(s.median_bytes > 0.0 && s.sigma >= 0.0 && s.min_bytes >= 1 && s.min_bytes <= s.max_bytes && s.max_bytes <= 65535) {
                return fail(format!("flow {} size distribution invalid", f.lcid));
            }
        }
        if self.ues_per_cell == 0 || self.prbs_per_cell < self.ues_per_cell || self.tti_us <= 0.0 {
            return fail("need at least one UE and one PRB per UE per cell".into());
        }
        if self.cell_capacity_bits < 8 * self.prbs_per_cell as u64 {
            return fail("cell capacity too small".into());
        }
        if self.bsr_period_tti == 0 || self.phr_period_tti == 0 {
            return fail("CE periods must be positive".into());
        }
        Ok(())
    }

    /// Bits per PRB at `mcs`, a whole number of bytes.
    pub fn bits_per_prb(&self, mcs: usize) -> u64 {
        let top = self.cell_capacity_bits as f64 / self.prbs_per_cell as f64;
        let b = top * (mcs.min(NUM_MCS - 1) + 1) as f64 / NUM_MCS as f64;
        ((b / 8.0).floor() as u64).max(1) * 8
    }

    /// SNR of UE `ue` of a cell.
    pub fn ue_snr(&self, ue: usize) -> f64 {
        let (lo, hi) = self.ue_snr_db;
        if self.ues_per_cell <= 1 {
            return 0.5 * (lo + hi);
        }
        lo + (hi - lo) * ue as f64 / (self.ues_per_cell - 1) as f64
    }
}

/// Content of one PDU, before payload bits are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PduSpec {
    /// (lcid, payload bytes) in PDU order.
    pub sdus: Vec<(u8, usize)>,
    pub ces: Vec<MacCe>,
    pub total_bits: usize,
}

impl PduSpec {
    /// Subheaders exactly as [`build_pdu`] would lay them out.
    pub fn subheaders(&self) -> Vec<Subheader> {
        let mut out = Vec::with_capacity(self.sdus.len() + self.ces.len());
        let mut pos = 0;
        for &(lcid, bytes) in &self.sdus {
            let h = Subheader { lcid, f_flag: bytes > 255, length: Some(bytes as u16), bit_offset: pos };
            pos += h.header_bits() + 8 * bytes;
            out.push(h);
        }
        for ce in &self.ces {
            let length = ce.kind.fixed_bits().is_none().then_some((ce.payload.len() / 8) as u16);
            let h = Subheader { lcid: ce.kind.lcid(), f_flag: length.is_some_and(|l| l > 255), length, bit_offset: pos };
            pos += h.header_bits() + ce.payload.len();
            out.push(h);
        }
        out
    }

    fn used_bits(&self) -> usize {
        self.sdus.iter().map(|&(_, b)| sdu_header_bits(b) + 8 * b).sum::<usize>()
            + self.ces.iter().map(|c| c.payload.len() + if c.kind.fixed_bits().is_some() { 8 } else { 16 }).sum::<usize>()
    }

    /// Subheader bits including the padding header.
    pub fn header_bits(&self) -> usize {
        let pad = usize::from(self.used_bits() < self.total_bits) * BASE_HEADER_BITS;
        self.subheaders().iter().map(Subheader::header_bits).sum::<usize>() + pad
    }

    /// Full PDU with random SDU payloads.
    pub fn build(&self, rng: &mut impl Rng) -> Result<MacPdu> {
        let sdus: Vec<(u8, Bits)> = self.sdus.iter().map(|&(l, b)| (l, random_bits(rng, 8 * b))).collect();
        build_pdu(&sdus, &self.ces, self.total_bits)
    }

    /// Bits whose values are fixed by the layout (subheaders, CE payloads,
    /// padding header), as (start, bits) runs in PDU order.
    pub fn known_runs(&self) -> Vec<(usize, Bits)> {
        let mut runs = Vec::new();
        let headers = self.subheaders();
        let mut ce_iter = self.ces.iter();
        let mut end = 0;
        for h in &headers {
            let mut bits = Vec::with_capacity(32);
            push_uint(&mut bits, 0, 1);
            push_uint(&mut bits, u64::from(h.f_flag), 1);
            push_uint(&mut bits, u64::from(h.lcid), 6);
            if let Some(l) = h.length {
                push_uint(&mut bits, u64::from(l), if h.f_flag { 16 } else { 8 });
            }
            if h.is_ce() {
                bits.extend_from_slice(&ce_iter.next().expect("one CE per CE header").payload);
            }
            end = h.bit_offset + h.header_bits() + h.payload_bits().unwrap_or(0);
            runs.push((h.bit_offset, bits));
        }
        if end < self.total_bits {
            let mut bits = Vec::new();
            push_uint(&mut bits, u64::from(LCID_PADDING), BASE_HEADER_BITS);
            runs.push((end, bits));
        }
        runs
    }
}

/// One UE grant for a TTI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grant {
    pub cell: usize,
    pub ue: usize,
    pub mcs: usize,
    pub prbs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TbArrival {
    pub t_us: f64,
    pub cell: usize,
    pub ue: usize,
    pub tb_bits: u64,
    pub mcs: usize,
    /// Distinct delay budgets present, CE class included, ascending.
    pub classes: Vec<u32>,
    pub pdu: PduSpec,
}

/// CE handling budget recorded in trace class lists.
pub const CE_CLASS_US: u32 = 1000;

#[derive(Debug, Clone)]
struct UeFlow {
    flow: usize,
    hold_left: u64,
}

/// Seeded workload synthesizer.
#[derive(Debug, Clone)]
pub struct TrafficGenerator {
    pub profile: TrafficProfile,
    rng: ChaCha8Rng,
    ues: Vec<UeFlow>,
    residue: f64,
}

impl TrafficGenerator {
    pub fn new(profile: TrafficProfile, seed: u64) -> Result<Self> {
        profile.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = profile.cells * profile.ues_per_cell;
        let ues = (0..n).map(|_| UeFlow { flow: pick_flow(&profile.flows, &mut rng), hold_left: 0 }).collect();
        Ok(Self { profile, rng, ues, residue: 0.0 })
    }

    /// Every UE granted an equal PRB share at its MCS.
    pub fn full_load_grants(&self, prb_fraction: &[f64], mcs_of: impl Fn(usize, usize) -> usize) -> Vec<Grant> {
        let p = &self.profile;
        let mut out = Vec::with_capacity(p.cells * p.ues_per_cell);
        for cell in 0..p.cells {
            let frac = prb_fraction.get(cell).copied().unwrap_or(1.0).clamp(0.0, 1.0);
            let prbs = (p.prbs_per_cell as f64 * frac).round() as usize;
            let base = prbs / p.ues_per_cell;
            let extra = prbs % p.ues_per_cell;
            for ue in 0..p.ues_per_cell {
                let n = base + usize::from(ue < extra);
                if n > 0 {
                    out.push(Grant { cell, ue, mcs: mcs_of(cell, ue), prbs: n });
                }
            }
        }
        out
    }

    /// TBs for the TTI starting at `now_us`, one per grant.
    pub fn generate_slot_arrivals(&mut self, tti: u64, now_us: f64, grants: &[Grant]) -> Vec<TbArrival> {
        grants
            .iter()
            .map(|g| {
                let tb_bits = g.prbs as u64 * self.profile.bits_per_prb(g.mcs);
                let idx = g.cell * self.profile.ues_per_cell + g.ue;
                let flow = self.advance_flow(idx);
                let pdu = self.fill_pdu(tti, idx, flow, tb_bits as usize);
                let mut classes = BTreeSet::new();
                if !pdu.sdus.is_empty() {
                    classes.insert(self.profile.flows[flow].budget_us.round() as u32);
                }
                if !pdu.ces.is_empty() {
                    classes.insert(CE_CLASS_US);
                }
                TbArrival {
                    t_us: now_us,
                    cell: g.cell,
                    ue: g.ue,
                    tb_bits,
                    mcs: g.mcs,
                    classes: classes.into_iter().collect(),
                    pdu,
                }
            })
            .collect()
    }

    /// Rebuilds a TB from a trace row, drawing content for the recorded classes.
    pub fn replay_row(&mut self, tti: u64, row: &TraceRow) -> Result<TbArrival> {
        let idx = row.cell * self.profile.ues_per_cell + row.ue;
        if row.cell >= self.profile.cells || row.ue >= self.profile.ues_per_cell {
            return Err(Error::Config(format!("trace row for cell {} ue {} outside the profile", row.cell, row.ue)));
        }
        let flow = row
            .classes
            .iter()
            .find_map(|&c| self.profile.flows.iter().position(|f| f.budget_us.round() as u32 == c))
            .unwrap_or_else(|| self.advance_flow(idx));
        let pdu = self.fill_pdu(tti, idx, flow, row.tb_bits as usize);
        Ok(TbArrival {
            t_us: row.t_us,
            cell: row.cell,
            ue: row.ue,
            tb_bits: row.tb_bits,
            mcs: row.mcs,
            classes: row.classes.clone(),
            pdu,
        })
    }

    fn advance_flow(&mut self, idx: usize) -> usize {
        let u = &mut self.ues[idx];
        if u.hold_left == 0 {
            u.flow = pick_flow(&self.profile.flows, &mut self.rng);
            let p = 1.0 / self.profile.flow_hold_tti.max(1.0);
            let mut n = 1;
            while !self.rng.gen_bool(p) {
                n += 1;
            }
            u.hold_left = n;
        }
        u.hold_left -= 1;
        u.flow
    }

    fn sdu_bytes(&mut self, flow: usize) -> usize {
        let r = self.profile.preparse_bit_ratio;
        if r <= 0.0 {
            return self.profile.flows[flow].sizes.sample(&mut self.rng);
        }
        let short = 2.0 / r - 2.0;
        let exact = if short <= 255.0 { short } else { 3.0 / r - 3.0 };
        let exact = exact.clamp(1.0, 65535.0);
        let lo = exact.floor();
        // Carry the fractional part so the mean matches exactly.
        self.residue += exact - lo;
        if self.residue >= 1.0 {
            self.residue -= 1.0;
            lo as usize + 1
        } else {
            lo as usize
        }
    }

    fn fill_pdu(&mut self, tti: u64, idx: usize, flow: usize, total_bits: usize) -> PduSpec {
        let mut ces = Vec::new();
        let phase = tti + idx as u64;
        let mut ce_bits = 0;
        if phase % self.profile.bsr_period_tti == 0 && total_bits >= 64 {
            ces.push(MacCe { kind: CeKind::ShortBsr, payload: random_bits(&mut self.rng, 8) });
            ce_bits += 16;
        }
        if phase % self.profile.phr_period_tti == 0 && total_bits >= 64 {
            ces.push(MacCe { kind: CeKind::Phr, payload: random_bits(&mut self.rng, 8) });
            ce_bits += 16;
        }
        let lcid = self.profile.flows[flow].lcid;
        let mut sdus = Vec::new();
        let mut rem = total_bits.saturating_sub(ce_bits);
        loop {
            let bytes = self.sdu_bytes(flow);
            let need = sdu_header_bits(bytes) + 8 * bytes;
            if need + 24 <= rem {
                sdus.push((lcid, bytes));
                rem -= need;
                continue;
            }
            // Last SDU takes what is left.
            if rem >= 24 {
                let bytes = if rem - 16 <= 8 * 255 { (rem - 16) / 8 } else { ((rem - 24) / 8).min(65535) };
                sdus.push((lcid, bytes));
                rem -= sdu_header_bits(bytes) + 8 * bytes;
            }
            break;
        }
        let _ = rem;
        PduSpec { sdus, ces, total_bits }
    }
}

fn pick_flow(flows: &[FlowSpec], rng: &mut ChaCha8Rng) -> usize {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, f) in flows.iter().enumerate() {
        acc += f.share;
        if x < acc {
            return i;
        }
    }
    flows.len() - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t_us: f64,
    pub cell: usize,
    pub ue: usize,
    pub tb_bits: u64,
    pub mcs: usize,
    pub classes: Vec<u32>,
}

impl From<&TbArrival> for TraceRow {
    fn from(a: &TbArrival) -> Self {
        Self { t_us: a.t_us, cell: a.cell, ue: a.ue, tb_bits: a.tb_bits, mcs: a.mcs, classes: a.classes.clone() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellTrace {
    pub rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str = "t_us,cell,ue,tb_bits,mcs,classes";

impl CellTrace {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{TRACE_HEADER}")?;
        for r in &self.rows {
            let classes: Vec<String> = r.classes.iter().map(u32::to_string).collect();
            writeln!(f, "{},{},{},{},{},{}", r.t_us, r.cell, r.ue, r.tb_bits, r.mcs, classes.join(";"))?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: Vec<TraceRow> = Vec::new();
        let mut last_t: Vec<f64> = Vec::new();
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            None => return Ok(Self::default()),
            Some((_, h)) if h.trim() == TRACE_HEADER => {}
            Some((i, h)) => return Err(Error::Parse { line: i + 1, reason: format!("expected header {TRACE_HEADER:?}, got {h:?}") }),
        }
        for (i, line) in lines {
            let line_no = i + 1;
            let perr = |reason: String| Error::Parse { line: line_no, reason };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 6 {
                return Err(perr(format!("expected 6 columns, got {}", cols.len())));
            }
            let t_us: f64 = cols[0].parse().map_err(|_| perr(format!("bad t_us {:?}", cols[0])))?;
            let cell: usize = cols[1].parse().map_err(|_| perr(format!("bad cell {:?}", cols[1])))?;
            let ue: usize = cols[2].parse().map_err(|_| perr(format!("bad ue {:?}", cols[2])))?;
            let tb_bits: u64 = cols[3].parse().map_err(|_| perr(format!("bad tb_bits {:?}", cols[3])))?;
            let mcs: usize = cols[4].parse().map_err(|_| perr(format!("bad mcs {:?}", cols[4])))?;
            let classes: Vec<u32> = if cols[5].is_empty() {
                Vec::new()
            } else {
                cols[5].split(';').map(|c| c.trim().parse().map_err(|_| perr(format!("bad class {c:?}")))).collect::<Result<_>>()?
            };
            if !t_us.is_finite() || t_us < 0.0 {
                return Err(perr("t_us must be a non-negative number".into()));
            }
            if mcs >= NUM_MCS {
                return Err(perr(format!("mcs {mcs} outside the table")));
            }
            if tb_bits == 0 || tb_bits % 8 != 0 {
                return Err(perr(format!("tb_bits {tb_bits} must be a positive multiple of 8")));
            }
            if last_t.len() <= cell {
                last_t.resize(cell + 1, f64::NEG_INFINITY);
            }
            if t_us < last_t[cell] {
                return Err(perr(format!("timestamp {t_us} goes backwards for cell {cell}")));
            }
            last_t[cell] = t_us;
            rows.push(TraceRow { t_us, cell, ue, tb_bits, mcs, classes });
        }
        Ok(Self { rows })
    }
}
