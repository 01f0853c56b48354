//! Domain types and simulation configuration.
//!
//! Every type here is plain data: constructed once, validated with
//! [`validate_config`], then shared read-only by the simulator. The JSON
//! form of [`SimConfig`] uses these field names verbatim.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Identity of one non-shared expert: `(layer, index)`, ordered lexicographically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExpertId {
    pub layer: u32,
    pub index: u32,
}

impl ExpertId {
    pub fn new(layer: usize, index: usize) -> Self {
        Self {
            layer: layer as u32,
            index: index as u32,
        }
    }

    pub fn idx(self) -> usize {
        self.index as usize
    }
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}/e{}", self.layer, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_layers: usize,
    pub experts_per_layer: usize,
    pub top_k: usize,
    /// Tokens decoded per iteration.
    pub batch_size: usize,
}

impl ModelShape {
    pub fn new(num_layers: usize, experts_per_layer: usize, top_k: usize, batch_size: usize) -> Self {
        Self {
            num_layers,
            experts_per_layer,
            top_k,
            batch_size,
        }
    }
}

impl Default for ModelShape {
    fn default() -> Self {
        Self::new(4, 64, 6, 3)
    }
}

impl fmt::Display for ModelShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L={} E={} k={} B={}",
            self.num_layers, self.experts_per_layer, self.top_k, self.batch_size
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    /// Width of the substitution band around beta; `0 <= alpha < 1`.
    pub alpha: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self { alpha: 0.25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CachePolicy {
    /// Evict the lowest mean gate score over the last `history_window` iterations.
    ScoreWindow,
    #[serde(rename = "LRU")]
    Lru,
}

impl FromStr for CachePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "score" | "scorewindow" | "score-window" | "score_window" => Ok(CachePolicy::ScoreWindow),
            "lru" => Ok(CachePolicy::Lru),
            other => Err(format!("unknown cache policy `{other}` (expected `score` or `lru`)")),
        }
    }
}

/// How the per-layer cache is populated before the first iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InitialFill {
    /// Experts `0..c` of every layer.
    #[default]
    Prefix,
    /// `c` experts per layer drawn with the simulation seed.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub slots_per_layer: usize,
    pub history_window: usize,
    pub policy: CachePolicy,
    #[serde(default)]
    pub initial_fill: InitialFill,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            slots_per_layer: 16,
            history_window: 16,
            policy: CachePolicy::ScoreWindow,
            initial_fill: InitialFill::Prefix,
        }
    }
}

/// Per-unit timings in abstract integer time units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    /// Attention + gate (+ shared experts) per layer per iteration, on the GPU.
    pub t_attn: u64,
    /// One expert on the GPU, independent of how many tokens it serves.
    pub t_gpu: u64,
    /// One token through one expert on the CPU.
    pub t_cpu_token: u64,
    /// One expert over PCIe.
    pub t_load: u64,
    /// Router + balancer on the CPU.
    #[serde(default)]
    pub t_route: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            t_attn: 5,
            t_gpu: 1,
            t_cpu_token: 30,
            t_load: 100,
            t_route: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Probability that the predicted top-1 is a true top-score expert.
    pub p_top: f64,
    /// Probability that a non-top-score head is still an active expert.
    pub p_active: f64,
    /// Prefetch queue capacity; `None` means `top_k`.
    #[serde(default)]
    pub queue_depth: Option<usize>,
}

impl PredictorConfig {
    pub fn depth(&self, shape: &ModelShape) -> usize {
        self.queue_depth.unwrap_or(shape.top_k)
    }
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            p_top: 0.82,
            p_active: 0.95,
            queue_depth: None,
        }
    }
}

/// Optional scheduler components, in ablation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Score-window cache eviction.
    CE,
    /// Expert-cache router (alpha-band substitution + batch coalescing).
    ER,
    /// Top-score prefetching.
    Pre,
    /// CPU/PCIe load balancer.
    BA,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::CE, Stage::ER, Stage::Pre, Stage::BA];

    pub fn name(self) -> &'static str {
        match self {
            Stage::CE => "CE",
            Stage::ER => "ER",
            Stage::Pre => "Pre",
            Stage::BA => "BA",
        }
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ce" => Ok(Stage::CE),
            "er" => Ok(Stage::ER),
            "pre" => Ok(Stage::Pre),
            "ba" => Ok(Stage::BA),
            other => Err(format!("unknown stage `{other}` (expected ce, er, pre or ba)")),
        }
    }
}

/// An arbitrary subset of [`Stage`]; the empty set is the baseline.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageSet(BTreeSet<Stage>);

impl StageSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Stage::ALL.into_iter().collect()
    }

    pub fn contains(&self, stage: Stage) -> bool {
        self.0.contains(&stage)
    }

    pub fn with(mut self, stage: Stage) -> Self {
        self.0.insert(stage);
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = Stage> + '_ {
        self.0.iter().copied()
    }

    /// `"baseline"` for the empty set, else e.g. `"CE+ER+Pre"`.
    pub fn label(&self) -> String {
        if self.0.is_empty() {
            return "baseline".to_string();
        }
        self.0.iter().map(|s| s.name()).collect::<Vec<_>>().join("+")
    }

    /// The five cumulative stage sets used by the ablation study.
    pub fn ablation_ladder() -> Vec<StageSet> {
        let mut ladder = vec![StageSet::none()];
        let mut acc = StageSet::none();
        for stage in Stage::ALL {
            acc = acc.with(stage);
            ladder.push(acc.clone());
        }
        ladder
    }
}

impl FromIterator<Stage> for StageSet {
    fn from_iter<I: IntoIterator<Item = Stage>>(iter: I) -> Self {
        StageSet(iter.into_iter().collect())
    }
}

impl FromStr for StageSet {
    type Err = String;

    /// Comma-separated stage names; `""`, `none` and `baseline` mean the empty set.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t.is_empty() || t.eq_ignore_ascii_case("none") || t.eq_ignore_ascii_case("baseline") {
            return Ok(StageSet::none());
        }
        if t.eq_ignore_ascii_case("all") {
            return Ok(StageSet::all());
        }
        t.split([',', '+']).map(Stage::from_str).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub shape: ModelShape,
    pub router: RouterConfig,
    pub cache: CacheConfig,
    pub cost: CostModel,
    pub predictor: PredictorConfig,
    pub stages: StageSet,
    pub seed: u64,
}

impl Default for SimConfig {
    /// The reference workload: L=4, E=64, k=6, B=3, c=16, alpha=0.25, seed 7, all stages.
    fn default() -> Self {
        Self {
            shape: ModelShape::default(),
            router: RouterConfig::default(),
            cache: CacheConfig::default(),
            cost: CostModel::default(),
            predictor: PredictorConfig::default(),
            stages: StageSet::all(),
            seed: 7,
        }
    }
}

impl SimConfig {
    pub fn with_stages(&self, stages: StageSet) -> Self {
        Self { stages, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Suspicious but accepted settings.
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn violate(&mut self, field: &str, rule: &str) {
        self.violations.push(Violation {
            field: field.to_string(),
            rule: rule.to_string(),
        });
    }

    pub fn into_result(self) -> crate::Result<ValidationReport> {
        if self.is_ok() {
            Ok(self)
        } else {
            Err(crate::Error::Config(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        let parts: Vec<String> = self
            .violations
            .iter()
            .map(|v| format!("{}: {}", v.field, v.rule))
            .collect();
        f.write_str(&parts.join("; "))
    }
}

pub fn validate_shape(shape: &ModelShape, report: &mut ValidationReport) {
    if shape.num_layers == 0 {
        report.violate("shape.num_layers", "num_layers ≥ 1 required");
    }
    if shape.experts_per_layer == 0 {
        report.violate("shape.experts_per_layer", "experts_per_layer ≥ 1 required");
    }
    if shape.top_k == 0 {
        report.violate("shape.top_k", "top_k ≥ 1 required");
    }
    if shape.top_k + 1 > shape.experts_per_layer {
        report.violate("shape.top_k", "k + 1 ≤ E required");
    }
    if shape.batch_size == 0 {
        report.violate("shape.batch_size", "batch_size ≥ 1 required");
    }
}

/// Checks every field rule without touching `cfg`.
pub fn validate_config(cfg: &SimConfig) -> ValidationReport {
    let mut report = ValidationReport::default();
    validate_shape(&cfg.shape, &mut report);

    let alpha = cfg.router.alpha;
    if !(alpha.is_finite() && (0.0..1.0).contains(&alpha)) {
        report.violate("router.alpha", "0 ≤ alpha < 1 required");
    }

    if cfg.cache.slots_per_layer > cfg.shape.experts_per_layer {
        report.violate("cache.slots_per_layer", "slots_per_layer ≤ E");
    }
    if cfg.cache.history_window == 0 {
        report.violate("cache.history_window", "history_window ≥ 1 required");
    }

    for (field, p) in [
        ("predictor.p_top", cfg.predictor.p_top),
        ("predictor.p_active", cfg.predictor.p_active),
    ] {
        if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
            report.violate(field, "probability in [0, 1] required");
        }
    }
    if cfg.predictor.queue_depth == Some(0) {
        report.violate("predictor.queue_depth", "queue_depth ≥ 1 required");
    }

    let c = &cfg.cost;
    if c.t_load <= c.t_gpu {
        report.warnings.push(format!(
            "cost.t_load ({}) is not much larger than cost.t_gpu ({})",
            c.t_load, c.t_gpu
        ));
    }
    if c.t_cpu_token <= c.t_gpu {
        report.warnings.push(format!(
            "cost.t_cpu_token ({}) is not much larger than cost.t_gpu ({})",
            c.t_cpu_token, c.t_gpu
        ));
    }
    report
}
