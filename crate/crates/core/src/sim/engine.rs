use super::metrics::{LogEvent, MetricsAccumulator, TerminalStatus, LOG_VERSION};
use super::model::{Block, DecodeCtx, LibrarySpec, TbSoft, TrajectoryLibrary};
use super::{DecodeMode, LogSink, RunOutput, SimConfig, StrategyKind};
use crate::channel::{mcs_penalty_db, transmit_at, McsTable};
use crate::early::{Decodability, PayloadMap, PreParseConfig, PreParseResult, PreParseStep, PreParser, SoftPdu};
use crate::fec::{attach_crc, encode_codeblock, segment_transport_block, DecoderConfig, DecoderState, LdpcCode};
use crate::link_adapt::LinkAdapter;
use crate::offload::{
    offload_decision, remote_complete, MhLinkModel, OffloadContext, OffloadQueueState, OffloadRecord, RemotePool,
    RemoteStatus, RttEstimator,
};
use crate::sched::{
    assign_worker, classify_and_enqueue, edf_pick, DeadlineQueue, EarlyOutcome, FeedbackLedger, HeadKey, Phase,
    Verdict,
};
use crate::traffic::{CellTrace, PduSpec, TrafficGenerator, TrafficProfile};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::sync::{Arc, Mutex, OnceLock};

fn shared_code() -> Arc<LdpcCode> {
    static CODE: OnceLock<Arc<LdpcCode>> = OnceLock::new();
    CODE.get_or_init(|| Arc::new(LdpcCode::default_code())).clone()
}

type LibCache = Mutex<Vec<(String, Arc<TrajectoryLibrary>)>>;

fn shared_library(code: &LdpcCode, dcfg: &DecoderConfig, ctx_key: String, build: impl FnOnce() -> Result<TrajectoryLibrary>) -> Result<Arc<TrajectoryLibrary>> {
    static CACHE: OnceLock<LibCache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(Vec::new()));
    let key = format!("{}|{:?}|{}", code.n(), dcfg, ctx_key);
    let mut guard = cache.lock().map_err(|_| Error::Consistency("library cache poisoned".into()))?;
    if let Some((_, lib)) = guard.iter().find(|(k, _)| *k == key) {
        return Ok(lib.clone());
    }
    let lib = Arc::new(build()?);
    guard.push((key, lib.clone()));
    Ok(lib)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    WorkerDone(usize),
    LinkDeliver(u64),
    RemoteFinish(u64),
    RemoteFeedback(u64),
    Harq(u64),
    Tti(u64),
}

impl Kind {
    fn prio(self) -> u8 {
        match self {
            Kind::WorkerDone(_) => 0,
            Kind::LinkDeliver(_) => 1,
            Kind::RemoteFinish(_) => 2,
            Kind::RemoteFeedback(_) => 3,
            Kind::Harq(_) => 4,
            Kind::Tti(_) => 5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ev {
    t: f64,
    seq: u64,
    kind: Kind,
}

impl PartialEq for Ev {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Ev {}
impl PartialOrd for Ev {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Ev {
    // reversed: BinaryHeap pops the earliest
    fn cmp(&self, o: &Self) -> Ordering {
        o.t.total_cmp(&self.t).then(o.kind.prio().cmp(&self.kind.prio())).then(o.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Early,
    PreParse,
    Completion,
    Remote,
    Done,
}

#[derive(Debug)]
enum Outcome {
    Continue,
    Ack,
    Nack,
    Miss,
    PassiveAck,
    RunDone(bool),
    PreParsed(PreParseResult),
    CompletionDone(bool),
    CompletionDrop,
}

struct Task {
    origin: u64,
    attempt: u32,
    cell: usize,
    ue: usize,
    arrival_us: f64,
    harq_us: f64,
    bits: u64,
    mcs: usize,
    class_us: f64,
    pdu: Arc<PduSpec>,
    blocks: Vec<Block>,
    decided: Vec<bool>,
    truth: Vec<u8>,
    parser: PreParser,
    stage: Stage,
    worker: Option<usize>,
    verdict: Option<(EarlyOutcome, f64)>,
    feedback_sent: bool,
    deadline_us: f64,
    budget_us: f64,
    remote: Option<RemoteLeg>,
}

#[derive(Debug, Clone, Copy)]
struct RemoteLeg {
    end_us: f64,
    deliver_us: f64,
    finish_us: f64,
    status: Option<RemoteStatus>,
    feedback_due: bool,
}

struct Worker {
    queues: Vec<DeadlineQueue<u64>>,
    running: Option<(u64, usize, HeadKey, Outcome)>,
}

struct Retx {
    due_tti: u64,
    origin: u64,
    attempt: u32,
    bits: u64,
    mcs: usize,
    pdu: Arc<PduSpec>,
}

#[derive(Default, Clone, Copy)]
struct CellWindow {
    feedbacks: u64,
    misses: u64,
}

struct Admission {
    cell: usize,
    ue: usize,
    bits: u64,
    mcs: usize,
    pdu: Arc<PduSpec>,
    origin: Option<u64>,
    attempt: u32,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    profile: TrafficProfile,
    ctx: DecodeCtx,
    cost: f64,
    pp_cfg: PreParseConfig,
    gen: TrafficGenerator,
    trace: Option<(CellTrace, usize)>,
    rng: ChaCha8Rng,
    heap: BinaryHeap<Ev>,
    seq: u64,
    now: f64,
    workers: Vec<Worker>,
    classes: Vec<f64>,
    rr_next: usize,
    tasks: HashMap<u64, Task>,
    next_id: u64,
    ue_snr: Vec<f64>,
    ue_mcs: Vec<usize>,
    adapters: Vec<LinkAdapter>,
    retx: Vec<VecDeque<Retx>>,
    prb_frac: Vec<f64>,
    windows: Vec<CellWindow>,
    link: MhLinkModel,
    offq: OffloadQueueState,
    rtt: RttEstimator,
    pool: RemotePool,
    ledger: FeedbackLedger,
    acc: MetricsAccumulator,
    file: Option<BufWriter<File>>,
    events: Option<Vec<LogEvent>>,
    admissions: u64,
    terminals: u64,
    duration_tti: u64,
}

/// Runs one replication.
pub fn run_simulation(cfg: &SimConfig, sink: LogSink) -> Result<RunOutput> {
    cfg.validate()?;
    let mut eng = Engine::new(cfg, sink)?;
    eng.run()?;
    eng.finish()
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig, sink: LogSink) -> Result<Self> {
        let mut profile = cfg.traffic.clone();
        profile.cell_capacity_bits = ((profile.cell_capacity_bits as f64 * cfg.desk_scale).round() as u64).max(8);
        let (th, summary) = cfg.thresholds()?;
        if !(summary.l_t > 0.0) {
            return Err(Error::Config("thresholds file carries no positive l_t".into()));
        }
        let table: McsTable = cfg.mcs_table()?;
        let mut dcfg = cfg.decoder;
        dcfg.per_core_rate *= cfg.desk_scale;
        let code = shared_code();
        let map = PayloadMap::for_code(&code);
        let lib = match cfg.decode_mode {
            DecodeMode::RealLdpc => None,
            DecodeMode::CostModel => {
                let op = table.mcs_snr_operating_point(0)?;
                let l = &cfg.library;
                let spec = LibrarySpec {
                    snr_lo_db: op - l.below_op_db,
                    snr_hi_db: op + l.above_op_db,
                    step_db: l.step_db,
                    per_bin: l.per_bin,
                    seed: l.seed,
                };
                let key = format!("{:?}|{:?}|{}", spec, th.statistic, summary.l_t);
                Some(shared_library(&code, &cfg.decoder, key, || {
                    TrajectoryLibrary::build(&code, &cfg.decoder, th.statistic, summary.l_t, &spec)
                })?)
            }
        };
        let ctx = DecodeCtx { code, dcfg, th, l_t: summary.l_t, map, lib };
        let cost = ctx.block_cost_us();
        let gen = TrafficGenerator::new(profile.clone(), cfg.seed)?;
        let trace = match &cfg.trace_path {
            Some(p) => Some((CellTrace::load(p)?, 0)),
            None => None,
        };
        let n_ues = profile.cells * profile.ues_per_cell;
        let ue_snr: Vec<f64> = (0..n_ues).map(|g| profile.ue_snr(g % profile.ues_per_cell)).collect();
        let ue_mcs: Vec<usize> = ue_snr.iter().map(|&s| table.mcs_for_snr(s, cfg.mcs_margin_db)).collect();
        let adapters = ue_mcs.iter().map(|&m| LinkAdapter::new(m, &cfg.link_adapt)).collect();
        let mut classes = cfg.budgets.classes_us();
        classes.push(cfg.budgets.ce_us);
        classes.push(cfg.nuberu.budget_us);
        classes.sort_by(f64::total_cmp);
        classes.dedup();
        let workers = (0..cfg.cores)
            .map(|_| {
                let mut queues = vec![DeadlineQueue::new(cfg.harq.early_budget_us, Phase::Early)];
                queues.extend(classes.iter().map(|&c| DeadlineQueue::new(c, Phase::Completion)));
                Worker { queues, running: None }
            })
            .collect();
        let bw = cfg.mh.bandwidth_gbps * 1000.0 * cfg.desk_scale;
        let bootstrap = cfg.mh.bootstrap_rtt_us.unwrap_or(2.0 * cfg.mh.one_way_latency_us);
        let (file, events) = match sink {
            LogSink::None => (None, None),
            LogSink::File(p) => (Some(BufWriter::new(File::create(p)?)), None),
            LogSink::Memory => (None, Some(Vec::new())),
        };
        Ok(Self {
            cfg,
            pp_cfg: PreParseConfig { l_t: summary.l_t, i_max: dcfg.i_max },
            profile: profile.clone(),
            ctx,
            cost,
            gen,
            trace,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC4A7_7E11_0000_0001),
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            workers,
            classes,
            rr_next: 0,
            tasks: HashMap::new(),
            next_id: 0,
            ue_snr,
            ue_mcs,
            adapters,
            retx: (0..n_ues).map(|_| VecDeque::new()).collect(),
            prb_frac: vec![1.0; profile.cells],
            windows: vec![CellWindow::default(); profile.cells],
            link: MhLinkModel::new(cfg.mh.one_way_latency_us, bw),
            offq: OffloadQueueState::default(),
            rtt: RttEstimator::new(cfg.mh.rtt_alpha, bootstrap),
            pool: RemotePool::new(cfg.mh.remote_cores),
            ledger: FeedbackLedger::default(),
            acc: MetricsAccumulator::new(),
            file,
            events,
            admissions: 0,
            terminals: 0,
            duration_tti: cfg.duration_tti,
        })
    }

    fn tti_us(&self) -> f64 {
        self.profile.tti_us
    }

    fn schedule(&mut self, t: f64, kind: Kind) {
        self.seq += 1;
        self.heap.push(Ev { t, seq: self.seq, kind });
    }

    fn log(&mut self, ev: LogEvent) -> Result<()> {
        self.acc.apply(&ev)?;
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &ev)?;
            f.write_all(b"\n")?;
        }
        if let Some(v) = &mut self.events {
            v.push(ev);
        }
        Ok(())
    }

    fn run(&mut self) -> Result<()> {
        let tti = self.tti_us();
        self.log(LogEvent::Start {
            version: LOG_VERSION,
            strategy: self.cfg.strategy.name().to_string(),
            cells: self.profile.cells,
            cores: self.cfg.cores,
            tti_us: tti,
            warmup_us: self.cfg.warmup_tti as f64 * tti,
            end_us: self.duration_tti as f64 * tti,
            capacity_bits_per_tti: self.profile.cell_capacity_bits,
        })?;
        self.schedule(0.0, Kind::Tti(0));
        while let Some(ev) = self.heap.pop() {
            self.now = ev.t;
            match ev.kind {
                Kind::Tti(k) => self.on_tti(k)?,
                Kind::WorkerDone(w) => self.on_worker_done(w)?,
                Kind::Harq(id) => self.on_harq(id)?,
                Kind::LinkDeliver(id) => self.on_deliver(id)?,
                Kind::RemoteFinish(id) => self.on_remote_finish(id)?,
                Kind::RemoteFeedback(id) => self.on_remote_feedback(id)?,
            }
        }
        if !self.tasks.is_empty() {
            return Err(Error::Consistency(format!("{} tasks left after the event queue drained", self.tasks.len())));
        }
        let (admissions, terminals) = (self.admissions, self.terminals);
        self.log(LogEvent::End { t: self.now, admissions, terminals })
    }

    fn finish(mut self) -> Result<RunOutput> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        let report = self.acc.finish()?;
        Ok(RunOutput { report, events: self.events.unwrap_or_default() })
    }

    // ---- TTI boundary ----

    fn on_tti(&mut self, k: u64) -> Result<()> {
        let strategy = self.cfg.strategy;
        if strategy == StrategyKind::NuberuLike && k > 0 && k % self.cfg.nuberu.window_tti == 0 && k <= self.duration_tti {
            self.update_prb_caps()?;
        }
        if strategy == StrategyKind::Hades && self.cfg.edge_completion {
            self.offload_period(k)?;
        }
        if k < self.duration_tti {
            let adm = self.arrivals(k)?;
            for a in adm {
                self.admit(a)?;
            }
        }
        if k + 1 < self.duration_tti || !self.tasks.is_empty() {
            self.schedule((k + 1) as f64 * self.tti_us(), Kind::Tti(k + 1));
        }
        for w in 0..self.workers.len() {
            self.dispatch(w)?;
        }
        Ok(())
    }

    fn arrivals(&mut self, k: u64) -> Result<Vec<Admission>> {
        let now = self.now;
        let tti = self.tti_us();
        if let Some((trace, pos)) = &mut self.trace {
            let mut out = Vec::new();
            while *pos < trace.rows.len() && trace.rows[*pos].t_us < now + tti {
                let row = trace.rows[*pos].clone();
                *pos += 1;
                if row.t_us < now {
                    continue;
                }
                let a = self.gen.replay_row(k, &row)?;
                out.push(Admission {
                    cell: a.cell,
                    ue: a.ue,
                    bits: a.tb_bits,
                    mcs: a.mcs,
                    pdu: Arc::new(a.pdu),
                    origin: None,
                    attempt: 0,
                });
            }
            return Ok(out);
        }
        let upc = self.profile.ues_per_cell;
        let mut due: Vec<Option<Retx>> = Vec::with_capacity(self.retx.len());
        for q in &mut self.retx {
            due.push(if q.front().is_some_and(|r| r.due_tti <= k) { q.pop_front() } else { None });
        }
        let mcs = &self.ue_mcs;
        let grants: Vec<_> = self
            .gen
            .full_load_grants(&self.prb_frac, |c, u| mcs[c * upc + u])
            .into_iter()
            .filter(|g| due[g.cell * upc + g.ue].is_none())
            .collect();
        let fresh = self.gen.generate_slot_arrivals(k, now, &grants);
        let mut out: Vec<Admission> = fresh
            .into_iter()
            .map(|a| Admission {
                cell: a.cell,
                ue: a.ue,
                bits: a.tb_bits,
                mcs: a.mcs,
                pdu: Arc::new(a.pdu),
                origin: None,
                attempt: 0,
            })
            .collect();
        for (g, r) in due.into_iter().enumerate() {
            if let Some(r) = r {
                out.push(Admission {
                    cell: g / upc,
                    ue: g % upc,
                    bits: r.bits,
                    mcs: r.mcs,
                    pdu: r.pdu,
                    origin: Some(r.origin),
                    attempt: r.attempt,
                });
            }
        }
        out.sort_by_key(|a| (a.cell, a.ue));
        Ok(out)
    }

    fn content_class(&self, pdu: &PduSpec) -> f64 {
        let b = &self.cfg.budgets;
        let sdu = pdu.sdus.iter().map(|&(l, _)| b.budget_for(l)).fold(f64::INFINITY, f64::min);
        if sdu.is_finite() {
            sdu
        } else if !pdu.ces.is_empty() {
            b.ce_us
        } else {
            b.smallest_us()
        }
    }

    fn build_blocks(&mut self, id: u64, pdu: &PduSpec, snr_db: f64) -> Result<Vec<Block>> {
        let n = self.ctx.map.blocks_for(pdu.total_bits);
        match &self.ctx.lib {
            Some(lib) => Ok((0..n)
                .map(|_| {
                    let (bin, idx) = lib.sample(snr_db, &mut self.rng);
                    Block::Model { bin, idx, iteration: 0 }
                })
                .collect()),
            None => {
                let bits = pdu.build(&mut self.rng)?.to_bits();
                let tb = attach_crc(&bits);
                let cbs = segment_transport_block(&tb, self.ctx.code.k(), id)?;
                if cbs.len() != n {
                    return Err(Error::Consistency(format!("TB {id}: {} code blocks, expected {n}", cbs.len())));
                }
                cbs.iter()
                    .map(|cb| {
                        let cw = encode_codeblock(cb, &self.ctx.code)?;
                        let llr = transmit_at(&cw, snr_db, self.rng.gen());
                        Ok(Block::Real(DecoderState::new(llr, &self.ctx.code)))
                    })
                    .collect()
            }
        }
    }

    fn admit(&mut self, a: Admission) -> Result<()> {
        let id = self.next_id;
        self.next_id += 1;
        let g = a.cell * self.profile.ues_per_cell + a.ue;
        let snr = self.ue_snr[g] - mcs_penalty_db(a.mcs);
        let blocks = self.build_blocks(id, &a.pdu, snr)?;
        let class_us = self.content_class(&a.pdu);
        let arrival_us = self.now;
        let harq_us = arrival_us + self.cfg.harq.deadline_us;
        let origin = a.origin.unwrap_or(id);
        self.log(LogEvent::Admit {
            t: arrival_us,
            tb_id: id,
            origin,
            attempt: a.attempt,
            cell: a.cell,
            ue: a.ue,
            bits: a.bits,
            mcs: a.mcs,
            blocks: blocks.len(),
            class_us,
        })?;
        self.admissions += 1;
        let loads: Vec<u64> = self.workers.iter().map(|w| w.queues.iter().map(|q| q.queued_bits()).sum()).collect();
        let worker = assign_worker(self.cfg.assignment, &loads, &mut self.rr_next);
        let key_deadline = match self.cfg.strategy {
            StrategyKind::Hades => arrival_us + self.cfg.harq.early_budget_us,
            _ => harq_us,
        };
        let n = blocks.len();
        let task = Task {
            origin,
            attempt: a.attempt,
            cell: a.cell,
            ue: a.ue,
            arrival_us,
            harq_us,
            bits: a.bits,
            mcs: a.mcs,
            class_us,
            pdu: a.pdu,
            blocks,
            decided: vec![false; n],
            truth: Vec::new(),
            parser: PreParser::new(),
            stage: Stage::Early,
            worker,
            verdict: None,
            feedback_sent: false,
            deadline_us: key_deadline,
            budget_us: self.cfg.harq.early_budget_us,
            remote: None,
        };
        self.tasks.insert(id, task);
        if let Some(w) = worker {
            self.seq += 1;
            let seq = self.seq;
            self.workers[w].queues[0].push(key_deadline, arrival_us, seq, a.bits, id);
        }
        self.schedule(harq_us, Kind::Harq(id));
        Ok(())
    }

    // ---- workers ----

    fn dispatch(&mut self, w: usize) -> Result<()> {
        while self.workers[w].running.is_none() {
            let Some(qi) = edf_pick(&self.workers[w].queues) else {
                return Ok(());
            };
            let (key, id) = self.workers[w].queues[qi].pop().expect("picked queue has a head");
            let (cost, outcome) = self.round(id)?;
            if cost > 0.0 {
                let queued_min = self.workers[w]
                    .queues
                    .iter()
                    .filter_map(|q| q.head_key())
                    .map(|k| k.deadline_us())
                    .min_by(f64::total_cmp);
                self.log(LogEvent::Dispatch {
                    t: self.now,
                    worker: w,
                    tb_id: id,
                    phase: key.phase,
                    deadline_us: key.deadline_us(),
                    queued_min_deadline_us: queued_min,
                    cost_us: cost,
                })?;
                self.workers[w].running = Some((id, qi, key, outcome));
                self.schedule(self.now + cost, Kind::WorkerDone(w));
            } else {
                if matches!(outcome, Outcome::Continue) {
                    return Err(Error::Consistency(format!("TB {id}: zero-cost round without progress")));
                }
                self.apply(id, qi, key, outcome)?;
            }
        }
        Ok(())
    }

    fn on_worker_done(&mut self, w: usize) -> Result<()> {
        let (id, qi, key, outcome) = self.workers[w].running.take().expect("worker was busy");
        self.apply(id, qi, key, outcome)?;
        self.dispatch(w)
    }

    /// Work for one dispatch of `id`, performed now and accounted as cost.
    fn round(&mut self, id: u64) -> Result<(f64, Outcome)> {
        let strategy = self.cfg.strategy;
        let stage = self.tasks[&id].stage;
        match (stage, strategy) {
            (Stage::Early, StrategyKind::Hades) => self.predict_round(id),
            (Stage::Early, _) => self.run_round(id),
            (Stage::PreParse, _) => self.preparse_round(id),
            (Stage::Completion, _) => self.completion_round(id),
            (s, _) => Err(Error::Consistency(format!("TB {id} dispatched in stage {s:?}"))),
        }
    }

    fn predict_round(&mut self, id: u64) -> Result<(f64, Outcome)> {
        let c = self.cost;
        let now = self.now;
        let ctx = &self.ctx;
        let t = self.tasks.get_mut(&id).expect("task");
        let active: Vec<usize> = (0..t.blocks.len()).filter(|&b| !t.decided[b]).collect();
        if now + active.len() as f64 * c > t.harq_us {
            return Ok((0.0, Outcome::Miss));
        }
        let mut spent = 0.0;
        for b in active {
            if !t.blocks[b].at_cap(ctx) {
                t.blocks[b].iterate(ctx)?;
                spent += c;
            }
            match t.blocks[b].classify(ctx) {
                Some(Decodability::Decodable) => t.decided[b] = true,
                Some(Decodability::NotDecodable) => return Ok((spent, Outcome::Nack)),
                None if t.blocks[b].at_cap(ctx) => return Ok((spent, Outcome::Nack)),
                None => {}
            }
        }
        let out = if t.decided.iter().all(|&d| d) { Outcome::Ack } else { Outcome::Continue };
        Ok((spent, out))
    }

    fn run_round(&mut self, id: u64) -> Result<(f64, Outcome)> {
        let c = self.cost;
        let now = self.now;
        let nuberu = self.cfg.strategy == StrategyKind::NuberuLike;
        let trigger = self.cfg.nuberu.trigger_rounds.max(1.0);
        let ctx = &self.ctx;
        let t = self.tasks.get_mut(&id).expect("task");
        let active: Vec<usize> = (0..t.blocks.len()).filter(|&b| !t.blocks[b].settled(ctx)).collect();
        let round = active.len() as f64 * c;
        let slack = t.harq_us - now;
        if nuberu && slack < trigger * round {
            if t.blocks.iter().all(|b| b.iteration() == 0) {
                return Ok((0.0, Outcome::Miss));
            }
            let ok = t.blocks.iter().all(|b| b.classify(ctx) == Some(Decodability::Decodable));
            return Ok((0.0, if ok { Outcome::PassiveAck } else { Outcome::Nack }));
        }
        if now + round > t.harq_us {
            return Ok((0.0, Outcome::Miss));
        }
        for &b in &active {
            t.blocks[b].iterate(ctx)?;
        }
        let out = if t.blocks.iter().all(|b| b.settled(ctx)) {
            Outcome::RunDone(t.blocks.iter().all(|b| b.crc_passed(ctx)))
        } else {
            Outcome::Continue
        };
        Ok((round, out))
    }

    fn preparse_round(&mut self, id: u64) -> Result<(f64, Outcome)> {
        let c = self.cost;
        let now = self.now;
        let quantum = self.cfg.preparse_quantum_us.max(c);
        let ctx = &self.ctx;
        let pp_cfg = self.pp_cfg;
        let t = self.tasks.get_mut(&id).expect("task");
        if ctx.lib.is_some() && t.truth.is_empty() {
            let mut truth = vec![0u8; t.pdu.total_bits];
            for (start, bits) in t.pdu.known_runs() {
                truth[start..start + bits.len()].copy_from_slice(&bits);
            }
            t.truth = truth;
        }
        let mut src = TbSoft { blocks: &mut t.blocks, ctx, truth: &t.truth, pdu_bits: t.pdu.total_bits, iterations: 0 };
        let mut spent = 0.0;
        loop {
            match t.parser.step(&src, &pp_cfg)? {
                PreParseStep::Done(r) => return Ok((spent, Outcome::PreParsed(r))),
                PreParseStep::NeedIteration(b) => {
                    if spent > 0.0 && spent + c > quantum {
                        return Ok((spent, Outcome::Continue));
                    }
                    if now + spent + c > t.harq_us {
                        let r = t.parser.abort(&src);
                        return Ok((spent, Outcome::PreParsed(r)));
                    }
                    src.advance_at(b)?;
                    spent += c;
                }
            }
        }
    }

    fn completion_round(&mut self, id: u64) -> Result<(f64, Outcome)> {
        let c = self.cost;
        let now = self.now;
        let ctx = &self.ctx;
        let t = self.tasks.get_mut(&id).expect("task");
        let active: Vec<usize> = (0..t.blocks.len()).filter(|&b| !t.blocks[b].settled(ctx)).collect();
        let round = active.len() as f64 * c;
        if now + round > t.deadline_us {
            return Ok((0.0, Outcome::CompletionDrop));
        }
        for &b in &active {
            t.blocks[b].iterate(ctx)?;
        }
        let out = if t.blocks.iter().all(|b| b.settled(ctx)) {
            Outcome::CompletionDone(t.blocks.iter().all(|b| b.crc_passed(ctx)))
        } else {
            Outcome::Continue
        };
        Ok((round, out))
    }

    fn decide(&mut self, id: u64, outcome: EarlyOutcome) {
        let now = self.now;
        let t = self.tasks.get_mut(&id).expect("task");
        t.verdict = Some((outcome, now));
    }

    fn requeue(&mut self, id: u64, qi: usize, key: HeadKey) {
        let t = &self.tasks[&id];
        let (w, arrival, bits) = (t.worker.expect("queued task has a worker"), t.arrival_us, t.bits);
        self.workers[w].queues[qi].push(key.deadline_us(), arrival, key.seq, bits, id);
    }

    fn all_crc(&self, id: u64) -> bool {
        self.tasks[&id].blocks.iter().all(|b| b.crc_passed(&self.ctx))
    }

    fn apply(&mut self, id: u64, qi: usize, key: HeadKey, outcome: Outcome) -> Result<()> {
        match outcome {
            Outcome::Continue => self.requeue(id, qi, key),
            Outcome::Ack => {
                self.decide(id, EarlyOutcome::Predicted(Decodability::Decodable));
                self.tasks.get_mut(&id).expect("task").stage = Stage::PreParse;
                self.requeue(id, qi, key);
            }
            Outcome::Nack => {
                self.decide(id, EarlyOutcome::Predicted(Decodability::NotDecodable));
                self.terminal(id, TerminalStatus::CrcFailure, false)?;
            }
            Outcome::Miss => {
                self.decide(id, EarlyOutcome::Miss);
                self.terminal(id, TerminalStatus::DeadlineDrop, false)?;
            }
            Outcome::PassiveAck => {
                self.decide(id, EarlyOutcome::Predicted(Decodability::Decodable));
                let budget = self.cfg.nuberu.budget_us;
                self.to_completion(id, budget)?;
            }
            Outcome::RunDone(ok) => {
                self.decide(id, EarlyOutcome::Decoded(ok));
                let status = if ok { TerminalStatus::DecodedEdge } else { TerminalStatus::CrcFailure };
                self.terminal(id, status, false)?;
            }
            Outcome::PreParsed(r) => {
                let qa = classify_and_enqueue(&r, &self.cfg.budgets);
                let arrival = self.tasks[&id].arrival_us;
                self.log(LogEvent::Preparse {
                    t: self.now,
                    tb_id: id,
                    complete: r.complete,
                    budget_us: qa.budget_us,
                    ces: r.ces.len(),
                })?;
                if !qa.fast_path_ces.is_empty() {
                    self.log(LogEvent::CeDelivered {
                        t: self.now,
                        tb_id: id,
                        arrival_us: arrival,
                        count: qa.fast_path_ces.len(),
                    })?;
                }
                self.to_completion(id, qa.budget_us)?;
            }
            Outcome::CompletionDone(ok) => {
                let status = if ok { TerminalStatus::DecodedEdge } else { TerminalStatus::CrcFailure };
                self.terminal(id, status, !ok)?;
            }
            Outcome::CompletionDrop => self.terminal(id, TerminalStatus::DeadlineDrop, true)?,
        }
        Ok(())
    }

    fn to_completion(&mut self, id: u64, budget_us: f64) -> Result<()> {
        if self.all_crc(id) {
            return self.terminal(id, TerminalStatus::DecodedEdge, false);
        }
        let qi = self.class_queue(budget_us);
        let t = self.tasks.get_mut(&id).expect("task");
        t.stage = Stage::Completion;
        t.budget_us = budget_us;
        t.deadline_us = t.arrival_us + budget_us;
        if self.cfg.strategy == StrategyKind::Hades && !self.cfg.edge_completion {
            return self.offload(id, true);
        }
        let (w, deadline, arrival, bits) = (t.worker.expect("task has a worker"), t.deadline_us, t.arrival_us, t.bits);
        self.seq += 1;
        let seq = self.seq;
        self.workers[w].queues[qi].push(deadline, arrival, seq, bits, id);
        Ok(())
    }

    fn class_queue(&self, budget_us: f64) -> usize {
        let i = self.classes.iter().position(|&c| c >= budget_us).unwrap_or(self.classes.len() - 1);
        i + 1
    }

    fn terminal(&mut self, id: u64, status: TerminalStatus, residual: bool) -> Result<()> {
        let t = self.tasks.get_mut(&id).expect("task");
        if t.stage == Stage::Done {
            return Err(Error::Consistency(format!("TB {id} terminated twice")));
        }
        t.stage = Stage::Done;
        t.blocks = Vec::new();
        t.truth = Vec::new();
        let ev = LogEvent::Terminal {
            t: self.now,
            tb_id: id,
            arrival_us: t.arrival_us,
            status,
            bits: t.bits,
            class_us: t.class_us,
            residual,
        };
        let cell = t.cell;
        self.terminals += 1;
        if matches!(status, TerminalStatus::DeadlineDrop) && residual {
            self.windows[cell].misses += 1;
        }
        self.log(ev)?;
        self.maybe_forget(id);
        Ok(())
    }

    fn maybe_forget(&mut self, id: u64) {
        let t = &self.tasks[&id];
        if t.stage == Stage::Done && t.feedback_sent && t.remote.map_or(true, |r| !r.feedback_due) {
            self.tasks.remove(&id);
        }
    }

    // ---- HARQ ----

    fn on_harq(&mut self, id: u64) -> Result<()> {
        if self.tasks[&id].verdict.is_none() {
            let t = &self.tasks[&id];
            if let Some(w) = t.worker {
                if t.stage != Stage::Done {
                    self.workers[w].queues[0].drain_where(|_, &x| x == id);
                }
            }
            self.decide(id, EarlyOutcome::Miss);
            if self.tasks[&id].stage != Stage::Done {
                self.terminal(id, TerminalStatus::DeadlineDrop, false)?;
            }
        }
        let (outcome, decided) = self.tasks[&id].verdict.expect("verdict set");
        let fb = self.ledger.emit_id(id, outcome, self.now)?;
        let t = self.tasks.get_mut(&id).expect("task");
        t.feedback_sent = true;
        let (ue, cell, arrival, origin, attempt, bits, mcs, pdu) =
            (t.ue, t.cell, t.arrival_us, t.origin, t.attempt, t.bits, t.mcs, t.pdu.clone());
        self.log(LogEvent::Feedback {
            t: self.now,
            tb_id: id,
            ue: cell * self.profile.ues_per_cell + ue,
            arrival_us: arrival,
            decided_us: decided,
            verdict: fb.verdict,
            cause: fb.cause,
        })?;
        let nack = fb.verdict == Verdict::Nack;
        let g = cell * self.profile.ues_per_cell + ue;
        self.windows[cell].feedbacks += 1;
        if matches!(outcome, EarlyOutcome::Miss) {
            self.windows[cell].misses += 1;
        }
        if self.cfg.strategy == StrategyKind::Hades && self.trace.is_none() {
            let old = self.ue_mcs[g];
            let new = self.adapters[g].on_feedback(nack, &self.cfg.link_adapt);
            if new != old {
                self.ue_mcs[g] = new;
                self.log(LogEvent::Mcs { t: self.now, ue: g, mcs: new })?;
            }
        }
        if nack && self.trace.is_none() && attempt + 1 < self.cfg.harq.max_attempts {
            let tti = self.tti_us();
            let due_tti = (arrival / tti).round() as u64 + self.cfg.harq.rtt_tti;
            if due_tti < self.duration_tti {
                self.retx[g].push_back(Retx { due_tti, origin, attempt: attempt + 1, bits, mcs, pdu });
            }
        }
        self.maybe_forget(id);
        Ok(())
    }

    fn update_prb_caps(&mut self) -> Result<()> {
        let n = &self.cfg.nuberu;
        for cell in 0..self.prb_frac.len() {
            let w = std::mem::take(&mut self.windows[cell]);
            let rate = if w.feedbacks == 0 { 0.0 } else { w.misses as f64 / w.feedbacks as f64 };
            let old = self.prb_frac[cell];
            let new = (old + n.gain * (n.target_miss_rate - rate)).clamp(n.min_fraction, 1.0);
            if new != old {
                self.prb_frac[cell] = new;
                self.log(LogEvent::PrbCap { t: self.now, cell, fraction: new })?;
            }
        }
        Ok(())
    }

    // ---- offload ----

    fn offload_period(&mut self, k: u64) -> Result<()> {
        let c = self.cost;
        let max_moves = self.cfg.offload.max_per_queue_per_period;
        let q_bits = self.cfg.offload.quantizer.q_bits;
        let n = self.ctx.code.n();
        for w in 0..self.workers.len() {
            for qi in 1..self.workers[w].queues.len() {
                let mut moved = 0;
                while moved < max_moves {
                    let Some(&id) = self.workers[w].queues[qi].head() else { break };
                    let now = self.now;
                    let l_q = self.workers[w].queues[qi].head_latency_us(now);
                    let l_o = self.offq.head_latency_us(now);
                    let l_mh = self.rtt.one_way_us();
                    let rule = offload_decision(l_o, l_mh, l_q);
                    let t = &self.tasks[&id];
                    let unsettled = t.blocks.iter().filter(|b| !b.settled(&self.ctx)).count();
                    let size = OffloadRecord::size_for(n, t.blocks.len(), q_bits);
                    let backlog = (self.link.busy_until_us() - now).max(0.0);
                    let service = unsettled as f64 * self.cfg.offload.guard_iterations * c;
                    let guard = t.deadline_us - now > l_mh + backlog + self.link.serialization_us(size) + service;
                    let offloaded = rule && guard;
                    self.log(LogEvent::OffloadDecision {
                        t: now,
                        period: k,
                        worker: w,
                        queue_budget_us: self.workers[w].queues[qi].budget_class_us,
                        l_o_us: l_o,
                        l_mh_us: l_mh,
                        l_q_us: l_q,
                        rule,
                        guard,
                        offloaded,
                        tb_id: Some(id),
                    })?;
                    if !offloaded {
                        break;
                    }
                    self.workers[w].queues[qi].pop();
                    self.offload(id, false)?;
                    moved += 1;
                }
            }
        }
        Ok(())
    }

    fn offload(&mut self, id: u64, forced: bool) -> Result<()> {
        let q_bits = self.cfg.offload.quantizer.q_bits;
        let n = self.ctx.code.n();
        let now = self.now;
        let t = self.tasks.get_mut(&id).expect("task");
        t.stage = Stage::Remote;
        let size = OffloadRecord::size_for(n, t.blocks.len(), q_bits);
        let tx = self.link.send(now, id, size);
        self.offq.push(t.arrival_us, tx.start_us);
        t.remote = Some(RemoteLeg { end_us: tx.end_us, deliver_us: tx.deliver_us, finish_us: 0.0, status: None, feedback_due: true });
        let arrival = t.arrival_us;
        self.log(LogEvent::OffloadSend {
            t: now,
            tb_id: id,
            arrival_us: arrival,
            bits: size,
            start_us: tx.start_us,
            end_us: tx.end_us,
            deliver_us: tx.deliver_us,
            forced,
        })?;
        self.schedule(tx.deliver_us, Kind::LinkDeliver(id));
        Ok(())
    }

    fn on_deliver(&mut self, id: u64) -> Result<()> {
        let now = self.now;
        let c = self.cost;
        let fb_latency = self.cfg.mh.one_way_latency_us;
        let quantizer = self.cfg.offload.quantizer;
        let ctx = &self.ctx;
        let t = self.tasks.get_mut(&id).expect("task");
        let (status, finish) = if ctx.lib.is_some() {
            if now > t.deadline_us {
                (RemoteStatus::DeadlineDrop, now)
            } else {
                let mut work = 0.0;
                let mut ok = true;
                for b in &t.blocks {
                    let (left, pass) = b.model_remaining(ctx).expect("cost-model block");
                    work += left as f64 * c;
                    ok &= pass;
                }
                let finish = self.pool.reserve(now, work) + work;
                if finish > t.deadline_us {
                    (RemoteStatus::DeadlineDrop, finish)
                } else if ok {
                    (RemoteStatus::Decoded, finish)
                } else {
                    (RemoteStatus::ResidualError, finish)
                }
            }
        } else {
            let states: Vec<DecoderState> = t
                .blocks
                .iter()
                .map(|b| match b {
                    Block::Real(s) => s.clone(),
                    Block::Model { .. } => unreachable!("real-ldpc run holds real blocks"),
                })
                .collect();
            let iteration = states.iter().map(|s| s.iteration).min().unwrap_or(0) as u16;
            let context = OffloadContext { code_id: 0, iteration, budget_us: t.budget_us as u32, content_map: 0 };
            let sent = t.remote.map_or(now, |r| r.end_us);
            let rec = OffloadRecord::from_states(id, &states, context, quantizer, sent);
            let res = remote_complete(&rec, now, t.deadline_us, &mut self.pool, &ctx.code, &ctx.dcfg, fb_latency);
            (res.status, res.finish_us)
        };
        let leg = t.remote.as_mut().expect("offloaded task");
        leg.status = Some(status);
        leg.finish_us = finish;
        self.schedule(finish, Kind::RemoteFinish(id));
        self.schedule(finish + fb_latency, Kind::RemoteFeedback(id));
        Ok(())
    }

    fn on_remote_finish(&mut self, id: u64) -> Result<()> {
        let status = self.tasks[&id].remote.and_then(|r| r.status).expect("remote status");
        match status {
            RemoteStatus::Decoded => self.terminal(id, TerminalStatus::DecodedRemote, false),
            RemoteStatus::ResidualError => self.terminal(id, TerminalStatus::CrcFailure, true),
            RemoteStatus::DeadlineDrop => self.terminal(id, TerminalStatus::DeadlineDrop, true),
        }
    }

    fn on_remote_feedback(&mut self, id: u64) -> Result<()> {
        let t = self.tasks.get_mut(&id).expect("task");
        let leg = t.remote.as_mut().expect("offloaded task");
        leg.feedback_due = false;
        let rtt = (leg.deliver_us - leg.end_us) + (self.now - leg.finish_us);
        self.rtt.observe(rtt);
        self.log(LogEvent::RemoteFeedback { t: self.now, tb_id: id, rtt_us: rtt })?;
        self.maybe_forget(id);
        Ok(())
    }
}
