//! Report documents and their canonical encodings.
//!
//! JSON goes through `serde_json::Value`, whose maps are ordered, so keys are
//! sorted at every depth and equal inputs give equal bytes.

use std::path::Path;

use moe_sched::cache::CacheSnapshot;
use moe_sched::config::SimConfig;
use moe_sched::pipeline::{Metrics, PrefetchStats, SimOutput, TpotDelta};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const TOOL_VERSION: &str = concat!("moe-sched ", env!("CARGO_PKG_VERSION"));

pub fn fingerprint(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub tool_version: String,
    pub trace_fingerprint: String,
    pub config: SimConfig,
    pub metrics: Metrics,
    pub prefetch_stats: PrefetchStats,
    pub cache_final: CacheSnapshot,
}

impl RunReport {
    pub fn new(fingerprint: &str, config: SimConfig, out: SimOutput) -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            trace_fingerprint: fingerprint.to_string(),
            config,
            metrics: out.metrics,
            prefetch_stats: out.prefetch,
            cache_final: out.cache_final,
        }
    }
}

/// One entry of a multi-run report; the trace and version live at the top.
#[derive(Debug, Clone, Serialize)]
pub struct RunEntry {
    pub config: SimConfig,
    pub metrics: Metrics,
    pub prefetch_stats: PrefetchStats,
    pub cache_final: CacheSnapshot,
}

impl From<(SimConfig, SimOutput)> for RunEntry {
    fn from((config, out): (SimConfig, SimOutput)) -> Self {
        Self {
            config,
            metrics: out.metrics,
            prefetch_stats: out.prefetch,
            cache_final: out.cache_final,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub tool_version: String,
    pub trace_fingerprint: String,
    pub config: SimConfig,
    pub runs: Vec<RunEntry>,
    pub tpot_deltas: Vec<TpotDelta>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub tool_version: String,
    pub trace_fingerprint: String,
    pub config: SimConfig,
    pub runs: Vec<RunEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub tool_version: String,
    pub trace_fingerprint: String,
    pub score_window: RunEntry,
    pub lru: RunEntry,
    /// `score_window - lru`.
    pub tpot_delta: f64,
    pub hit_rate_delta: f64,
}

pub fn canonical_json<T: Serialize>(value: &T) -> CliResult<String> {
    let v = serde_json::to_value(value).map_err(|e| CliError::Invariant(format!("report encoding: {e}")))?;
    let mut text =
        serde_json::to_string_pretty(&v).map_err(|e| CliError::Invariant(format!("report encoding: {e}")))?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    std::fs::write(path, canonical_json(value)?).map_err(|e| CliError::io(path, e))
}

pub const ABLATION_HEADER: [&str; 5] = ["stage", "tpot", "hit_rate", "substitution_ratio", "demand_loads"];
pub const SWEEP_HEADER: [&str; 4] = ["alpha", "tpot", "hit_rate", "substitution_ratio"];

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn ablation_row(m: &Metrics) -> Vec<String> {
    vec![
        m.stage.clone(),
        m.tpot.to_string(),
        m.hit_rate.to_string(),
        m.substitution_ratio.to_string(),
        m.demand_loads.to_string(),
    ]
}

pub fn sweep_row(alpha: f64, m: &Metrics) -> Vec<String> {
    vec![
        alpha.to_string(),
        m.tpot.to_string(),
        m.hit_rate.to_string(),
        m.substitution_ratio.to_string(),
    ]
}
