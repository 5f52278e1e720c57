//! Grid sweeps over cores, midhaul bandwidth and strategy.

use super::{run_simulation, LogSink, MetricsReport, SimConfig, StrategyKind};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub cores: Vec<usize>,
    pub mh_bandwidth_gbps: Vec<f64>,
    pub strategies: Vec<StrategyKind>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.cores.is_empty() || self.mh_bandwidth_gbps.is_empty() || self.strategies.is_empty() {
            return Err(Error::InvalidArgument("sweep grid has an empty axis".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub cores: usize,
    pub mh_bandwidth_gbps: f64,
    pub strategy: StrategyKind,
    pub result: std::result::Result<MetricsReport, String>,
}

/// One run per grid point; a failing point is recorded and the sweep goes on.
pub fn sweep(base: &SimConfig, grid: &SweepGrid) -> Result<Vec<SweepCell>> {
    grid.validate()?;
    let mut out = Vec::new();
    for &strategy in &grid.strategies {
        for &cores in &grid.cores {
            for &bw in &grid.mh_bandwidth_gbps {
                let mut cfg = base.clone();
                cfg.strategy = strategy;
                cfg.cores = cores;
                cfg.mh.bandwidth_gbps = bw;
                let result = run_simulation(&cfg, LogSink::None).map(|o| o.report).map_err(|e| e.to_string());
                out.push(SweepCell { cores, mh_bandwidth_gbps: bw, strategy, result });
            }
        }
    }
    Ok(out)
}

pub fn write_sweep_csv(cells: &[SweepCell], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "strategy",
        "cores",
        "mh_bandwidth_gbps",
        "goodput_bps",
        "early_deadline_miss_rate",
        "bler",
        "edge_utilization",
        "offload_bits",
        "error",
    ])?;
    for c in cells {
        let mut row = vec![c.strategy.name().to_string(), c.cores.to_string(), c.mh_bandwidth_gbps.to_string()];
        match &c.result {
            Ok(r) => {
                row.extend([
                    r.goodput_bps.to_string(),
                    r.early_deadline_miss_rate.to_string(),
                    r.bler.to_string(),
                    r.edge_utilization.to_string(),
                    r.offload_bits.to_string(),
                    String::new(),
                ]);
            }
            Err(e) => {
                row.extend(std::iter::repeat(String::new()).take(5));
                row.push(e.clone());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
