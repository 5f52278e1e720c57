//! Event log records and the metrics computed from them. The in-run report
//! and the offline recomputation share [`MetricsAccumulator`].

use crate::sched::{FeedbackCause, Phase, Verdict};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalStatus {
    DecodedEdge,
    DecodedRemote,
    CrcFailure,
    DeadlineDrop,
}

/// One JSON line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "kebab-case")]
pub enum LogEvent {
    Start {
        version: u32,
        strategy: String,
        cells: usize,
        cores: usize,
        tti_us: f64,
        warmup_us: f64,
        end_us: f64,
        capacity_bits_per_tti: u64,
    },
    Admit {
        t: f64,
        tb_id: u64,
        origin: u64,
        attempt: u32,
        cell: usize,
        ue: usize,
        bits: u64,
        mcs: usize,
        blocks: usize,
        class_us: f64,
    },
    Dispatch {
        t: f64,
        worker: usize,
        tb_id: u64,
        phase: Phase,
        deadline_us: f64,
        /// Smallest head deadline left queued on the worker.
        queued_min_deadline_us: Option<f64>,
        cost_us: f64,
    },
    Feedback {
        t: f64,
        tb_id: u64,
        ue: usize,
        arrival_us: f64,
        decided_us: f64,
        verdict: Verdict,
        cause: FeedbackCause,
    },
    Preparse {
        t: f64,
        tb_id: u64,
        complete: bool,
        budget_us: f64,
        ces: usize,
    },
    CeDelivered {
        t: f64,
        tb_id: u64,
        arrival_us: f64,
        count: usize,
    },
    OffloadDecision {
        t: f64,
        period: u64,
        worker: usize,
        queue_budget_us: f64,
        l_o_us: f64,
        l_mh_us: f64,
        l_q_us: f64,
        rule: bool,
        guard: bool,
        offloaded: bool,
        tb_id: Option<u64>,
    },
    OffloadSend {
        t: f64,
        tb_id: u64,
        arrival_us: f64,
        bits: u64,
        start_us: f64,
        end_us: f64,
        deliver_us: f64,
        forced: bool,
    },
    RemoteFeedback {
        t: f64,
        tb_id: u64,
        rtt_us: f64,
    },
    Terminal {
        t: f64,
        tb_id: u64,
        arrival_us: f64,
        status: TerminalStatus,
        bits: u64,
        class_us: f64,
        /// Set when the transport block was ACKed but never delivered.
        residual: bool,
    },
    Mcs {
        t: f64,
        ue: usize,
        mcs: usize,
    },
    PrbCap {
        t: f64,
        cell: usize,
        fraction: f64,
    },
    End {
        t: f64,
        admissions: u64,
        terminals: u64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: u64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub p999_us: f64,
    pub max_us: f64,
}

impl LatencyStats {
    fn from_samples(mut v: Vec<f64>) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
            v[rank - 1]
        };
        Self { count: v.len() as u64, p50_us: q(0.5), p99_us: q(0.99), p999_us: q(0.999), max_us: v[v.len() - 1] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TerminalCounts {
    pub decoded_edge: u64,
    pub decoded_remote: u64,
    pub crc_failure: u64,
    pub deadline_drop: u64,
}

impl TerminalCounts {
    pub fn total(&self) -> u64 {
        self.decoded_edge + self.decoded_remote + self.crc_failure + self.deadline_drop
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub cells: usize,
    pub cores: usize,
    /// Measured window length.
    pub duration_s: f64,
    pub admitted_tbs: u64,
    pub admitted_bits: u64,
    pub decoded_bits: u64,
    pub goodput_bps: f64,
    /// Keyed by content class budget in microseconds.
    pub latency: BTreeMap<String, LatencyStats>,
    pub ce_latency: LatencyStats,
    pub feedbacks: u64,
    pub nacks: u64,
    pub deadline_misses: u64,
    pub early_deadline_miss_rate: f64,
    pub bler: f64,
    pub residual_errors: u64,
    pub spectrum_eff_tx: f64,
    pub spectrum_eff_rx: f64,
    pub edge_utilization: f64,
    pub early_busy_share: f64,
    pub offload_tbs: u64,
    pub offload_bits: u64,
    pub mh_occupancy: f64,
    pub offload_decisions: u64,
    pub offload_replay_mismatches: u64,
    pub mean_mcs: f64,
    pub terminal: TerminalCounts,
}

impl MetricsReport {
    /// Flat `metric,value` rows; nested fields are dotted.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
            match v {
                serde_json::Value::Object(m) => {
                    for (k, x) in m {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        flatten(&key, x, out);
                    }
                }
                serde_json::Value::String(s) => out.push((prefix.to_string(), s.clone())),
                other => out.push((prefix.to_string(), other.to_string())),
            }
        }
        let mut rows = Vec::new();
        flatten("", &serde_json::to_value(self)?, &mut rows);
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "value"])?;
        for (k, v) in rows {
            w.write_record([k, v])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Folds log events into a [`MetricsReport`].
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    start: Option<(String, usize, usize, f64, f64, f64, u64)>,
    ended: bool,
    admissions_all: u64,
    terminals_all: u64,
    admitted_tbs: u64,
    admitted_bits: u64,
    mcs_sum: u64,
    decoded_bits: u64,
    latency: BTreeMap<u64, Vec<f64>>,
    ce_latency: Vec<f64>,
    feedbacks: u64,
    nacks: u64,
    misses: u64,
    residual: u64,
    busy_us: f64,
    early_busy_us: f64,
    offload_tbs: u64,
    offload_bits: u64,
    mh_busy_us: f64,
    decisions: u64,
    mismatches: u64,
    terminal: TerminalCounts,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    fn in_window(&self, arrival_us: f64) -> bool {
        self.start.as_ref().is_some_and(|s| arrival_us >= s.4 && arrival_us < s.5)
    }

    pub fn apply(&mut self, ev: &LogEvent) -> Result<()> {
        if self.ended {
            return Err(Error::Integrity("event after end record".into()));
        }
        if self.start.is_none() && !matches!(ev, LogEvent::Start { .. }) {
            return Err(Error::Integrity("log does not begin with a start record".into()));
        }
        match ev {
            LogEvent::Start { version, strategy, cells, cores, tti_us, warmup_us, end_us, capacity_bits_per_tti } => {
                if *version != LOG_VERSION {
                    return Err(Error::Integrity(format!("unsupported log version {version}")));
                }
                if self.start.is_some() {
                    return Err(Error::Integrity("duplicate start record".into()));
                }
                self.start = Some((strategy.clone(), *cells, *cores, *tti_us, *warmup_us, *end_us, *capacity_bits_per_tti));
            }
            LogEvent::Admit { t, bits, mcs, .. } => {
                self.admissions_all += 1;
                if self.in_window(*t) {
                    self.admitted_tbs += 1;
                    self.admitted_bits += bits;
                    self.mcs_sum += *mcs as u64;
                }
            }
            LogEvent::Dispatch { t, phase, cost_us, .. } => {
                if self.in_window(*t) {
                    self.busy_us += cost_us;
                    if *phase == Phase::Early {
                        self.early_busy_us += cost_us;
                    }
                }
            }
            LogEvent::Feedback { arrival_us, verdict, cause, .. } => {
                if self.in_window(*arrival_us) {
                    self.feedbacks += 1;
                    self.nacks += u64::from(*verdict == Verdict::Nack);
                    self.misses += u64::from(*cause == FeedbackCause::DeadlineMiss);
                }
            }
            LogEvent::CeDelivered { t, arrival_us, .. } => {
                if self.in_window(*arrival_us) {
                    self.ce_latency.push(t - arrival_us);
                }
            }
            LogEvent::OffloadDecision { t, l_o_us, l_mh_us, l_q_us, rule, guard, offloaded, .. } => {
                let rec = crate::offload::DecisionRecord {
                    period: 0,
                    worker: 0,
                    queue_budget_us: 0.0,
                    l_o_us: *l_o_us,
                    l_mh_us: *l_mh_us,
                    l_q_us: *l_q_us,
                    rule: *rule,
                    guard: *guard,
                    offloaded: *offloaded,
                };
                if self.in_window(*t) {
                    self.decisions += 1;
                }
                self.mismatches += u64::from(!rec.replays());
            }
            LogEvent::OffloadSend { arrival_us, bits, start_us, end_us, .. } => {
                if self.in_window(*arrival_us) {
                    self.offload_tbs += 1;
                    self.offload_bits += bits;
                }
                if self.in_window(*start_us) {
                    self.mh_busy_us += end_us - start_us;
                }
            }
            LogEvent::Terminal { t, arrival_us, status, bits, class_us, residual, .. } => {
                self.terminals_all += 1;
                if self.in_window(*arrival_us) {
                    match status {
                        TerminalStatus::DecodedEdge => self.terminal.decoded_edge += 1,
                        TerminalStatus::DecodedRemote => self.terminal.decoded_remote += 1,
                        TerminalStatus::CrcFailure => self.terminal.crc_failure += 1,
                        TerminalStatus::DeadlineDrop => self.terminal.deadline_drop += 1,
                    }
                    if matches!(status, TerminalStatus::DecodedEdge | TerminalStatus::DecodedRemote) {
                        self.decoded_bits += bits;
                        self.latency.entry(class_us.round() as u64).or_default().push(t - arrival_us);
                    }
                    self.residual += u64::from(*residual);
                }
            }
            LogEvent::Preparse { .. } | LogEvent::RemoteFeedback { .. } | LogEvent::Mcs { .. } | LogEvent::PrbCap { .. } => {}
            LogEvent::End { admissions, terminals, .. } => {
                if *admissions != self.admissions_all || *terminals != self.terminals_all {
                    return Err(Error::Integrity(format!(
                        "end record counts {admissions}/{terminals} disagree with log {}/{}",
                        self.admissions_all, self.terminals_all
                    )));
                }
                self.ended = true;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<MetricsReport> {
        let Some((strategy, cells, cores, tti_us, warmup_us, end_us, cap)) = self.start else {
            return Err(Error::Integrity("empty log".into()));
        };
        if !self.ended {
            return Err(Error::Integrity("log truncated before end record".into()));
        }
        if self.admissions_all != self.terminals_all {
            return Err(Error::Integrity(format!(
                "{} admissions but {} terminal records",
                self.admissions_all, self.terminals_all
            )));
        }
        let window_us = (end_us - warmup_us).max(0.0);
        let secs = window_us * 1e-6;
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        let capacity_bits = cap as f64 * cells as f64 * ratio(window_us, tti_us);
        Ok(MetricsReport {
            strategy,
            cells,
            cores,
            duration_s: secs,
            admitted_tbs: self.admitted_tbs,
            admitted_bits: self.admitted_bits,
            decoded_bits: self.decoded_bits,
            goodput_bps: ratio(self.decoded_bits as f64, secs),
            latency: self
                .latency
                .into_iter()
                .map(|(k, v)| (k.to_string(), LatencyStats::from_samples(v)))
                .collect(),
            ce_latency: LatencyStats::from_samples(self.ce_latency),
            feedbacks: self.feedbacks,
            nacks: self.nacks,
            deadline_misses: self.misses,
            early_deadline_miss_rate: ratio(self.misses as f64, self.feedbacks as f64),
            bler: ratio(self.nacks as f64, self.feedbacks as f64),
            residual_errors: self.residual,
            spectrum_eff_tx: ratio(self.admitted_bits as f64, capacity_bits),
            spectrum_eff_rx: ratio(self.decoded_bits as f64, capacity_bits),
            edge_utilization: ratio(self.busy_us, cores as f64 * window_us),
            early_busy_share: ratio(self.early_busy_us, self.busy_us),
            offload_tbs: self.offload_tbs,
            offload_bits: self.offload_bits,
            mh_occupancy: ratio(self.mh_busy_us, window_us),
            offload_decisions: self.decisions,
            offload_replay_mismatches: self.mismatches,
            mean_mcs: ratio(self.mcs_sum as f64, self.admitted_tbs as f64),
            terminal: self.terminal,
        })
    }
}

/// Recomputes the report from a JSON-lines event log.
pub fn compute_metrics(path: &Path) -> Result<MetricsReport> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut acc = MetricsAccumulator::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: LogEvent = serde_json::from_str(&line).map_err(|e| Error::Integrity(format!("line {}: {e}", i + 1)))?;
        acc.apply(&ev)?;
    }
    acc.finish()
}

pub fn compute_metrics_from(events: &[LogEvent]) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    for ev in events {
        acc.apply(ev)?;
    }
    acc.finish()
}
