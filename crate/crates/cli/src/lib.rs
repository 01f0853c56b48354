//! Command-line front end for `moe-sched`: trace generation, single runs,
//! stage ablations, alpha sweeps and cache-policy comparisons.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use moe_sched::config::{CachePolicy, InitialFill, ModelShape, SimConfig, StageSet};

pub mod commands;
pub mod report;

/// Exit status for a failed command.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("timeline invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<moe_sched::Error> for CliError {
    fn from(e: moe_sched::Error) -> Self {
        use moe_sched::Error as E;
        match e {
            E::Io { .. } => CliError::Io(e.to_string()),
            E::NoEvictable { .. } | E::AlreadyResident(_) => CliError::Invariant(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "moe-sched",
    version,
    about = "Trace-driven simulator for importance-driven MoE expert scheduling"
)]
pub struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic gate-score trace (JSON Lines).
    GenTrace(GenTraceArgs),
    /// Simulate one configuration and write a report.
    Run(RunArgs),
    /// Run the five cumulative stage sets and write a report plus CSV.
    Ablate(AblateArgs),
    /// Sweep alpha and write one CSV row per value.
    SweepAlpha(SweepArgs),
    /// Run score-window and LRU eviction on the same trace.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub experts: usize,
    #[arg(long, default_value_t = 6)]
    pub k: usize,
    /// Tokens per decode batch.
    #[arg(long, default_value_t = 3)]
    pub batch: usize,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub hot_fraction: Option<f64>,
    #[arg(long)]
    pub hot_mass: Option<f64>,
    #[arg(long)]
    pub persistence: Option<f64>,
    #[arg(long)]
    pub concentration: Option<f64>,
    #[arg(long)]
    pub popularity_skew: Option<f64>,
    /// Alpha used for the printed skew summary.
    #[arg(long, default_value_t = 0.25)]
    pub summary_alpha: f64,
    #[arg(short, long)]
    pub out: PathBuf,
}

/// Configuration file plus scalar overrides, shared by the simulation commands.
#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON configuration; defaults apply when absent, with the model shape
    /// taken from the trace header.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Expert slots per layer.
    #[arg(long)]
    pub slots: Option<usize>,
    /// Score-history window length.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stage list such as `ce,er,pre,ba`, `all` or `none`.
    #[arg(long)]
    pub stages: Option<StageSet>,
    /// Eviction policy when CE is enabled: `score` or `lru`.
    #[arg(long)]
    pub policy: Option<CachePolicy>,
    /// Initial residency: `prefix` or `random`.
    #[arg(long, value_parser = parse_fill)]
    pub initial_fill: Option<InitialFill>,
    #[arg(long)]
    pub t_attn: Option<u64>,
    #[arg(long)]
    pub t_gpu: Option<u64>,
    #[arg(long)]
    pub t_cpu_token: Option<u64>,
    #[arg(long)]
    pub t_load: Option<u64>,
    #[arg(long)]
    pub t_route: Option<u64>,
    #[arg(long)]
    pub p_top: Option<f64>,
    #[arg(long)]
    pub p_active: Option<f64>,
    #[arg(long)]
    pub queue_depth: Option<usize>,
}

fn parse_fill(s: &str) -> Result<InitialFill, String> {
    match s.to_ascii_lowercase().as_str() {
        "prefix" => Ok(InitialFill::Prefix),
        "random" => Ok(InitialFill::Random),
        other => Err(format!("unknown initial fill {other:?}; expected prefix or random")),
    }
}

impl ConfigArgs {
    /// Loads the file (if any) and applies overrides. Without a file the
    /// shape comes from `trace_shape`.
    pub fn resolve(&self, trace_shape: ModelShape) -> CliResult<SimConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => SimConfig {
                shape: trace_shape,
                ..SimConfig::default()
            },
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value.clone() {
                    $field = v;
                }
            };
        }
        set!(cfg.router.alpha, self.alpha);
        set!(cfg.cache.slots_per_layer, self.slots);
        set!(cfg.cache.history_window, self.window);
        set!(cfg.seed, self.seed);
        set!(cfg.stages, self.stages);
        set!(cfg.cache.policy, self.policy);
        set!(cfg.cache.initial_fill, self.initial_fill);
        set!(cfg.cost.t_attn, self.t_attn);
        set!(cfg.cost.t_gpu, self.t_gpu);
        set!(cfg.cost.t_cpu_token, self.t_cpu_token);
        set!(cfg.cost.t_load, self.t_load);
        set!(cfg.cost.t_route, self.t_route);
        set!(cfg.predictor.p_top, self.p_top);
        set!(cfg.predictor.p_active, self.p_active);
        if self.queue_depth.is_some() {
            cfg.predictor.queue_depth = self.queue_depth;
        }

        let report = moe_sched::config::validate_config(&cfg);
        for w in &report.warnings {
            log::warn!("{w}");
        }
        report.into_result()?;
        if cfg.shape != trace_shape {
            return Err(moe_sched::Error::ShapeMismatch {
                trace: trace_shape.to_string(),
                config: cfg.shape.to_string(),
            }
            .into());
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Report JSON path.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Also write the task timeline as a JSON array.
    #[arg(long)]
    pub timeline: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(short, long)]
    pub out: PathBuf,
    /// CSV with one row per stage.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated alpha values; defaults to 0, 0.05, ..., 0.6.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// CSV output path.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Optional JSON with the full metrics per alpha.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(short, long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenTrace(a) => commands::gen_trace(&a),
        Command::Run(a) => commands::run(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::SweepAlpha(a) => commands::sweep_alpha(&a),
        Command::Compare(a) => commands::compare(&a),
    }
}
