//! Deadline-ordered decoding queues, EDF dispatch, slack checks and HARQ feedback.

use crate::early::{Decodability, PreParseResult};
use crate::mac::MacCe;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Early,
    Completion,
}

/// Unit of scheduling. `B` is the per-code-block decoding work.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTask<B> {
    pub tb_id: u64,
    pub blocks: Vec<B>,
    pub arrival_us: f64,
    pub phase: Phase,
    pub budget_us: f64,
    pub deadline_us: f64,
    /// Delay budget class (µs) that the content was mapped to.
    pub content_class: u32,
    pub harq_deadline_us: f64,
}

impl<B> DecodeTask<B> {
    pub fn early(tb_id: u64, blocks: Vec<B>, arrival_us: f64, early_budget_us: f64, harq_after_us: f64) -> Self {
        Self {
            tb_id,
            blocks,
            arrival_us,
            phase: Phase::Early,
            budget_us: early_budget_us,
            deadline_us: arrival_us + early_budget_us,
            content_class: early_budget_us as u32,
            harq_deadline_us: arrival_us + harq_after_us,
        }
    }

    /// Moves the task to the completion phase under `budget_us`.
    pub fn into_completion(mut self, budget_us: f64) -> Self {
        self.phase = Phase::Completion;
        self.budget_us = budget_us;
        self.deadline_us = self.arrival_us + budget_us;
        self.content_class = budget_us.round() as u32;
        self
    }

    /// Deadline the slack check applies to.
    pub fn applicable_deadline_us(&self) -> f64 {
        match self.phase {
            Phase::Early => self.harq_deadline_us,
            Phase::Completion => self.deadline_us,
        }
    }
}

/// Ordering key of a queued task: deadline, then phase, then FIFO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadKey {
    deadline_bits: u64,
    pub phase: Phase,
    pub seq: u64,
}

impl HeadKey {
    /// `deadline_us` must be non-negative and finite.
    pub fn new(deadline_us: f64, phase: Phase, seq: u64) -> Self {
        debug_assert!(deadline_us >= 0.0 && deadline_us.is_finite());
        Self { deadline_bits: deadline_us.max(0.0).to_bits(), phase, seq }
    }

    pub fn deadline_us(&self) -> f64 {
        f64::from_bits(self.deadline_bits)
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    arrival_us: f64,
    bits: u64,
    item: T,
}

/// Tasks of one budget class, ascending by deadline.
#[derive(Debug, Clone)]
pub struct DeadlineQueue<T> {
    pub budget_class_us: f64,
    pub phase: Phase,
    tasks: BTreeMap<HeadKey, Entry<T>>,
    queued_bits: u64,
}

impl<T> DeadlineQueue<T> {
    pub fn new(budget_class_us: f64, phase: Phase) -> Self {
        Self { budget_class_us, phase, tasks: BTreeMap::new(), queued_bits: 0 }
    }

    pub fn push(&mut self, deadline_us: f64, arrival_us: f64, seq: u64, bits: u64, item: T) {
        self.queued_bits += bits;
        self.tasks.insert(HeadKey::new(deadline_us, self.phase, seq), Entry { arrival_us, bits, item });
    }

    pub fn head_key(&self) -> Option<HeadKey> {
        self.tasks.keys().next().copied()
    }

    pub fn head(&self) -> Option<&T> {
        self.tasks.values().next().map(|e| &e.item)
    }

    pub fn head_arrival_us(&self) -> Option<f64> {
        self.tasks.values().next().map(|e| e.arrival_us)
    }

    /// Queuing latency of the head-of-line task, zero when empty.
    pub fn head_latency_us(&self, now_us: f64) -> f64 {
        self.head_arrival_us().map_or(0.0, |a| now_us - a)
    }

    pub fn pop(&mut self) -> Option<(HeadKey, T)> {
        let (k, e) = self.tasks.pop_first()?;
        self.queued_bits -= e.bits;
        Some((k, e.item))
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn queued_bits(&self) -> u64 {
        self.queued_bits
    }

    pub fn keys(&self) -> impl Iterator<Item = &HeadKey> {
        self.tasks.keys()
    }

    /// Removes every task whose key satisfies `pred`.
    pub fn drain_where(&mut self, mut pred: impl FnMut(&HeadKey, &T) -> bool) -> Vec<(HeadKey, T)> {
        let keys: Vec<HeadKey> = self.tasks.iter().filter(|(k, e)| pred(k, &e.item)).map(|(k, _)| *k).collect();
        keys.into_iter()
            .map(|k| {
                let e = self.tasks.remove(&k).expect("key just listed");
                self.queued_bits -= e.bits;
                (k, e.item)
            })
            .collect()
    }
}

/// Index of the queue whose head should run next, if any.
pub fn edf_pick<T>(queues: &[DeadlineQueue<T>]) -> Option<usize> {
    queues.iter().enumerate().filter_map(|(i, q)| q.head_key().map(|k| (k, i))).min().map(|(_, i)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Slack {
    Continue,
    Miss,
}

/// Whether one more iteration fits before the task's deadline; equality fits.
pub fn check_slack(now_us: f64, iter_cost_us: f64, deadline_us: f64) -> Slack {
    if now_us + iter_cost_us > deadline_us {
        Slack::Miss
    } else {
        Slack::Continue
    }
}

pub fn check_task_slack<B>(task: &DecodeTask<B>, now_us: f64, iter_cost_us: f64) -> Slack {
    check_slack(now_us, iter_cost_us, task.applicable_deadline_us())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assignment {
    RoundRobin,
    #[default]
    LeastLoaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkerPoolConfig {
    pub n_cores: usize,
    /// Information bits per microsecond per core.
    pub per_core_rate: f64,
    pub assignment: Assignment,
}

impl Default for WorkerPoolConfig {
    fn default() -> Self {
        Self { n_cores: 6, per_core_rate: 250.0, assignment: Assignment::LeastLoaded }
    }
}

/// Picks a worker for a new task given each worker's queued bits.
pub fn assign_worker(assignment: Assignment, queued_bits: &[u64], rr_next: &mut usize) -> Option<usize> {
    if queued_bits.is_empty() {
        return None;
    }
    Some(match assignment {
        Assignment::RoundRobin => {
            let w = *rr_next % queued_bits.len();
            *rr_next = w + 1;
            w
        }
        Assignment::LeastLoaded => {
            queued_bits.iter().enumerate().min_by_key(|&(i, b)| (*b, i)).map(|(i, _)| i).unwrap_or(0)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Ack,
    Nack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeedbackCause {
    PredictedAck,
    PredictedNack,
    DeadlineMiss,
    /// Run-to-completion decode passed CRC in time.
    Decoded,
    /// Run-to-completion decode hit the iteration cap.
    DecodeFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarqFeedback {
    pub tb_id: u64,
    pub verdict: Verdict,
    pub emitted_us: f64,
    pub cause: FeedbackCause,
}

/// How the early phase of a task ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyOutcome {
    Predicted(Decodability),
    Miss,
    /// Full decode finished; `true` when CRC passed.
    Decoded(bool),
}

/// Guards against emitting feedback twice for one transmission.
#[derive(Debug, Clone, Default)]
pub struct FeedbackLedger {
    seen: HashSet<u64>,
}

impl FeedbackLedger {
    pub fn emit<B>(&mut self, task: &DecodeTask<B>, outcome: EarlyOutcome, now_us: f64) -> Result<HarqFeedback> {
        self.emit_id(task.tb_id, outcome, now_us)
    }

    pub fn emit_id(&mut self, tb_id: u64, outcome: EarlyOutcome, now_us: f64) -> Result<HarqFeedback> {
        if !self.seen.insert(tb_id) {
            return Err(Error::Consistency(format!("duplicate HARQ feedback for TB {tb_id}")));
        }
        let (verdict, cause) = match outcome {
            EarlyOutcome::Predicted(Decodability::Decodable) => (Verdict::Ack, FeedbackCause::PredictedAck),
            EarlyOutcome::Predicted(Decodability::NotDecodable) => (Verdict::Nack, FeedbackCause::PredictedNack),
            EarlyOutcome::Miss => (Verdict::Nack, FeedbackCause::DeadlineMiss),
            EarlyOutcome::Decoded(true) => (Verdict::Ack, FeedbackCause::Decoded),
            EarlyOutcome::Decoded(false) => (Verdict::Nack, FeedbackCause::DecodeFailure),
        };
        Ok(HarqFeedback { tb_id, verdict, emitted_us: now_us, cause })
    }

    /// Forgets ids that can no longer recur.
    pub fn forget(&mut self, tb_id: u64) {
        self.seen.remove(&tb_id);
    }
}

/// Delay budgets keyed by LCID, in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetMap {
    pub ce_us: f64,
    pub by_lcid: BTreeMap<u8, f64>,
    /// Budget of SDU LCIDs missing from `by_lcid`.
    pub default_us: f64,
}

impl Default for BudgetMap {
    fn default() -> Self {
        Self { ce_us: 1000.0, by_lcid: BTreeMap::from([(4, 5000.0), (5, 20000.0), (6, 100000.0)]), default_us: 100000.0 }
    }
}

impl BudgetMap {
    pub fn budget_for(&self, lcid: u8) -> f64 {
        self.by_lcid.get(&lcid).copied().unwrap_or(self.default_us)
    }

    /// Smallest SDU budget, used when content cannot be identified.
    pub fn smallest_us(&self) -> f64 {
        self.by_lcid.values().copied().fold(self.default_us, f64::min)
    }

    /// Distinct SDU budget classes, ascending.
    pub fn classes_us(&self) -> Vec<f64> {
        let set: BTreeSet<u64> = self.by_lcid.values().chain([&self.default_us]).map(|b| b.to_bits()).collect();
        let mut v: Vec<f64> = set.into_iter().map(f64::from_bits).collect();
        v.sort_by(f64::total_cmp);
        v
    }
}

/// Queue choice for a completion task and the CEs already recovered.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueAssignment {
    pub budget_us: f64,
    pub fast_path_ces: Vec<MacCe>,
    pub identified: bool,
}

pub fn classify_and_enqueue(preparse: &PreParseResult, budgets: &BudgetMap) -> QueueAssignment {
    let identified = preparse.complete;
    let budget_us = if identified {
        preparse.sdu_lcids().map(|l| budgets.budget_for(l)).fold(f64::INFINITY, f64::min)
    } else {
        budgets.smallest_us()
    };
    let budget_us = if budget_us.is_finite() { budget_us } else { budgets.smallest_us() };
    QueueAssignment { budget_us, fast_path_ces: preparse.ces.clone(), identified }
}
