//! Discrete-event simulation of edge decoding with early feedback and
//! remote completion.

mod engine;
pub mod metrics;
pub mod model;
pub mod sweep;

use crate::channel::{McsTable, DEFAULT_BASE_OPERATING_SNR_DB};
use crate::early::{CalibrationSummary, PredictionThresholds};
use crate::fec::DecoderConfig;
use crate::link_adapt::LinkAdaptConfig;
use crate::offload::Quantizer;
use crate::sched::{Assignment, BudgetMap};
use crate::traffic::TrafficProfile;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub use engine::run_simulation;
pub use metrics::{compute_metrics, compute_metrics_from, LogEvent, MetricsReport, TerminalStatus};

const DEFAULT_THRESHOLDS: &str = include_str!("../../data/thresholds.csv");

/// Thresholds shipped with the crate for the default code and decoder.
pub fn default_thresholds() -> (PredictionThresholds, CalibrationSummary) {
    PredictionThresholds::parse_csv(DEFAULT_THRESHOLDS).expect("bundled thresholds parse")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Hades,
    NuberuLike,
    Baseline,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Hades => "hades",
            StrategyKind::NuberuLike => "nuberu-like",
            StrategyKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hades" => Ok(StrategyKind::Hades),
            "nuberu-like" | "nuberu" => Ok(StrategyKind::NuberuLike),
            "baseline" => Ok(StrategyKind::Baseline),
            _ => Err(Error::InvalidArgument(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    /// Every code block is encoded, sent through AWGN and decoded.
    RealLdpc,
    /// Blocks replay decoder trajectories sampled at their SNR.
    #[default]
    CostModel,
}

impl DecodeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "real-ldpc" => Ok(DecodeMode::RealLdpc),
            "cost-model" => Ok(DecodeMode::CostModel),
            _ => Err(Error::InvalidArgument(format!("unknown decode mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MhConfig {
    pub one_way_latency_us: f64,
    pub bandwidth_gbps: f64,
    /// EWMA weight of new RTT samples.
    pub rtt_alpha: f64,
    /// Defaults to twice the configured one-way latency.
    pub bootstrap_rtt_us: Option<f64>,
    /// `None` is an unconstrained remote pool.
    pub remote_cores: Option<usize>,
}

impl Default for MhConfig {
    fn default() -> Self {
        Self { one_way_latency_us: 10_000.0, bandwidth_gbps: 10.0, rtt_alpha: 0.125, bootstrap_rtt_us: None, remote_cores: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarqConfig {
    /// Feedback slot after arrival.
    pub deadline_us: f64,
    /// EDF key offset of early-phase work.
    pub early_budget_us: f64,
    /// Retransmission delay in TTIs.
    pub rtt_tti: u64,
    pub max_attempts: u32,
}

impl Default for HarqConfig {
    fn default() -> Self {
        Self { deadline_us: 3000.0, early_budget_us: 1000.0, rtt_tti: 4, max_attempts: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuberuConfig {
    /// Predict once slack is below this many rounds.
    pub trigger_rounds: f64,
    /// Completion budget for everything acknowledged early.
    pub budget_us: f64,
    pub target_miss_rate: f64,
    pub gain: f64,
    pub window_tti: u64,
    pub min_fraction: f64,
}

impl Default for NuberuConfig {
    fn default() -> Self {
        Self { trigger_rounds: 2.0, budget_us: 20_000.0, target_miss_rate: 0.01, gain: 1.0, window_tti: 100, min_fraction: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OffloadConfig {
    pub max_per_queue_per_period: usize,
    /// Service estimate for the guard, in iterations per unsettled block.
    pub guard_iterations: f64,
    pub quantizer: Quantizer,
}

impl Default for OffloadConfig {
    fn default() -> Self {
        Self { max_per_queue_per_period: 1, guard_iterations: 4.0, quantizer: Quantizer::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibraryConfig {
    pub below_op_db: f64,
    pub above_op_db: f64,
    pub step_db: f64,
    pub per_bin: usize,
    pub seed: u64,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        Self { below_op_db: 1.0, above_op_db: 6.0, step_db: 0.1, per_bin: 200, seed: 0x7EA7 }
    }
}

/// Everything one run needs. Loaded from JSON; missing fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub strategy: StrategyKind,
    pub cores: usize,
    pub assignment: Assignment,
    /// Edge completion allowed; when off every acknowledged TB is offloaded.
    pub edge_completion: bool,
    pub mh: MhConfig,
    pub traffic: TrafficProfile,
    /// Replays TB arrivals from a trace instead of full-load grants.
    pub trace_path: Option<PathBuf>,
    pub thresholds_path: Option<PathBuf>,
    pub mcs_table_path: Option<PathBuf>,
    pub seed: u64,
    pub duration_tti: u64,
    pub warmup_tti: u64,
    pub decode_mode: DecodeMode,
    pub decoder: DecoderConfig,
    /// Scales cell capacity, core rate and midhaul bandwidth together.
    pub desk_scale: f64,
    pub harq: HarqConfig,
    pub budgets: BudgetMap,
    pub link_adapt: LinkAdaptConfig,
    /// SNR margin of the fixed MCS choice.
    pub mcs_margin_db: f64,
    pub nuberu: NuberuConfig,
    pub offload: OffloadConfig,
    /// Work granted to one pre-parse dispatch.
    pub preparse_quantum_us: f64,
    pub library: LibraryConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Hades,
            cores: 4,
            assignment: Assignment::default(),
            edge_completion: true,
            mh: MhConfig::default(),
            traffic: TrafficProfile::default(),
            trace_path: None,
            thresholds_path: None,
            mcs_table_path: None,
            seed: 1,
            duration_tti: 5000,
            warmup_tti: 500,
            decode_mode: DecodeMode::default(),
            decoder: DecoderConfig::default(),
            desk_scale: 1.0,
            harq: HarqConfig::default(),
            budgets: BudgetMap::default(),
            link_adapt: LinkAdaptConfig::default(),
            mcs_margin_db: 0.3,
            nuberu: NuberuConfig::default(),
            offload: OffloadConfig::default(),
            preparse_quantum_us: 50.0,
            library: LibraryConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.traffic.validate()?;
        if !(self.desk_scale > 0.0 && self.desk_scale.is_finite()) {
            return bad(format!("desk_scale must be positive, got {}", self.desk_scale));
        }
        if self.duration_tti == 0 {
            return bad("duration_tti must be positive".into());
        }
        if self.warmup_tti >= self.duration_tti {
            return bad(format!("warmup_tti {} not below duration_tti {}", self.warmup_tti, self.duration_tti));
        }
        if !(self.mh.one_way_latency_us >= 0.0) || !(self.mh.bandwidth_gbps > 0.0) {
            return bad("midhaul latency must be >= 0 and bandwidth > 0".into());
        }
        if !(0.0..=1.0).contains(&self.mh.rtt_alpha) {
            return bad(format!("rtt_alpha {} outside [0, 1]", self.mh.rtt_alpha));
        }
        if !(self.harq.deadline_us > 0.0) || !(self.harq.early_budget_us > 0.0) || self.harq.max_attempts == 0 {
            return bad("HARQ deadline, early budget and attempts must be positive".into());
        }
        if !(self.decoder.per_core_rate > 0.0) || self.decoder.i_max == 0 || self.decoder.i_ref == 0 {
            return bad("decoder rate, i_max and i_ref must be positive".into());
        }
        if !(self.preparse_quantum_us > 0.0) {
            return bad("preparse_quantum_us must be positive".into());
        }
        if self.budgets.classes_us().iter().any(|b| !(*b > 0.0)) || !(self.budgets.ce_us > 0.0) {
            return bad("budgets must be positive".into());
        }
        if self.nuberu.window_tti == 0 || !(0.0..=1.0).contains(&self.nuberu.min_fraction) {
            return bad("nuberu window must be positive and min_fraction in [0, 1]".into());
        }
        if self.library.per_bin == 0 || !(self.library.step_db > 0.0) {
            return bad("library per_bin and step must be positive".into());
        }
        if self.offload.quantizer.q_bits == 0 || self.offload.quantizer.q_bits > 16 {
            return bad(format!("q_bits {} outside 1..=16", self.offload.quantizer.q_bits));
        }
        Ok(())
    }

    pub(crate) fn thresholds(&self) -> Result<(PredictionThresholds, CalibrationSummary)> {
        let (th, s) = match &self.thresholds_path {
            Some(p) => PredictionThresholds::load_csv(p)?,
            None => default_thresholds(),
        };
        if th.i_max != self.decoder.i_max {
            return Err(Error::Config(format!("thresholds cover {} iterations, decoder i_max is {}", th.i_max, self.decoder.i_max)));
        }
        Ok((th, s))
    }

    pub(crate) fn mcs_table(&self) -> Result<McsTable> {
        match &self.mcs_table_path {
            Some(p) => McsTable::load_csv(p),
            None => Ok(McsTable::from_base(DEFAULT_BASE_OPERATING_SNR_DB)),
        }
    }
}

/// Where a run writes its event log, if anywhere.
#[derive(Debug, Clone, Default)]
pub enum LogSink {
    #[default]
    None,
    File(PathBuf),
    Memory,
}

/// Result of [`run_simulation`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    /// Events, when the sink was [`LogSink::Memory`].
    pub events: Vec<LogEvent>,
}
