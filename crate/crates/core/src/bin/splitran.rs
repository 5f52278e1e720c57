use clap::{Args, Parser, Subcommand};
use splitran::channel::McsTable;
use splitran::early::{calibrate_thresholds, CalibrationConfig};
use splitran::fec::{DecoderConfig, LdpcCode};
use splitran::sim::sweep::{sweep, write_sweep_csv, SweepGrid};
use splitran::sim::{compute_metrics, run_simulation, DecodeMode, LogSink, MetricsReport, SimConfig, StrategyKind};
use splitran::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "splitran", version, about = "Split early/completion uplink decoding simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one simulation.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write the JSON-lines event log.
        #[arg(long)]
        log: bool,
    },
    /// Run a cores x midhaul-bandwidth x strategy grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8")]
        cores_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,10")]
        bw_list: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "hades,nuberu-like,baseline")]
        strategies: Vec<String>,
    },
    /// Calibrate prediction thresholds and the confidence threshold.
    Calibrate {
        /// Output thresholds CSV.
        #[arg(long, default_value = "thresholds.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        blocks: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated SNR points in dB; defaults to the operating point.
        #[arg(long, value_delimiter = ',')]
        snr: Vec<f64>,
        /// Also write the per-MCS operating-point table here.
        #[arg(long)]
        mcs_table: Option<PathBuf>,
    },
    /// Recompute metrics from an event log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    cores: Option<usize>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    mh_latency_ms: Option<f64>,
    #[arg(long)]
    mh_bw_gbps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    decode_mode: Option<String>,
    #[arg(long)]
    duration_tti: Option<u64>,
}

impl Common {
    fn config(&self) -> Result<SimConfig> {
        let mut cfg = match &self.config {
            Some(p) => SimConfig::load(p)?,
            None => SimConfig::default(),
        };
        if let Some(s) = &self.strategy {
            cfg.strategy = StrategyKind::parse(s)?;
        }
        if let Some(c) = self.cores {
            cfg.cores = c;
        }
        if let Some(c) = self.cells {
            cfg.traffic.cells = c;
        }
        if let Some(l) = self.mh_latency_ms {
            cfg.mh.one_way_latency_us = l * 1000.0;
        }
        if let Some(b) = self.mh_bw_gbps {
            cfg.mh.bandwidth_gbps = b;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.decode_mode {
            cfg.decode_mode = DecodeMode::parse(m)?;
        }
        if let Some(d) = self.duration_tti {
            cfg.duration_tti = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(report)?)?;
    report.write_csv(&dir.join("metrics.csv"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { common, log } => {
            let cfg = common.config()?;
            std::fs::create_dir_all(&common.out)?;
            let sink = if log { LogSink::File(common.out.join("events.jsonl")) } else { LogSink::None };
            let out = run_simulation(&cfg, sink)?;
            write_report(&common.out, &out.report)?;
            println!("{}", serde_json::to_string_pretty(&out.report)?);
        }
        Cmd::Sweep { common, cores_list, bw_list, strategies } => {
            let cfg = common.config()?;
            let strategies = strategies.iter().map(|s| StrategyKind::parse(s)).collect::<Result<Vec<_>>>()?;
            let grid = SweepGrid { cores: cores_list, mh_bandwidth_gbps: bw_list, strategies };
            let cells = sweep(&cfg, &grid)?;
            std::fs::create_dir_all(&common.out)?;
            let path = common.out.join("sweep.csv");
            write_sweep_csv(&cells, &path)?;
            let failed = cells.iter().filter(|c| c.result.is_err()).count();
            println!("{} runs, {} failed, written to {}", cells.len(), failed, path.display());
        }
        Cmd::Calibrate { out, blocks, seed, snr, mcs_table } => {
            let code = LdpcCode::default_code();
            let dcfg = DecoderConfig::default();
            let mut cc = CalibrationConfig { blocks_per_point: blocks, ..CalibrationConfig::default() };
            if let Some(s) = seed {
                cc.seed = s;
            }
            if !snr.is_empty() {
                cc.snr_points = snr;
            }
            let report = calibrate_thresholds(&code, &dcfg, &cc)?;
            report.thresholds.write_csv(&out, &report.summary)?;
            if let Some(p) = mcs_table {
                McsTable::calibrate(&code, &dcfg, blocks, cc.seed).write_csv(&p)?;
            }
            println!("{}", serde_json::to_string_pretty(&report.summary)?);
        }
        Cmd::Report { log, out } => {
            let report = compute_metrics(&log)?;
            if let Some(dir) = out {
                write_report(&dir, &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.category(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::from(exit_byte(&e))
        }
    }
}

fn exit_byte(e: &Error) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
