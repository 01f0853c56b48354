//! Three-resource decode pipeline: GPU, CPU and PCIe, each a serial server.
//!
//! Per (iteration, layer) the GPU runs attention; its end is the gate, where
//! the layer's true scores become known. The CPU then routes (and balances).
//! Resident experts run on the GPU back to back; misses are either computed
//! on the CPU or loaded over PCIe and computed on the GPU once they arrive.
//! The layer completes when its last expert task ends, and the next layer's
//! attention starts right there.
//!
//! With prefetching on, the queue for the next layer is built once the
//! resident experts are done, and transfers are dispatched into PCIe idle
//! time until the next layer's gate. A transfer still in flight when the
//! next layer has routed is joined if the expert was selected and aborted
//! otherwise, so speculative traffic never holds up a demand load.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::balancer::{balance, BalanceInput, BalanceItem};
use crate::cache::{CacheSnapshot, CacheState};
use crate::config::{validate_config, CachePolicy, CostModel, ExpertId, SimConfig, Stage, StageSet};
use crate::error::{Error, Result};
use crate::prefetch::{batch_top_score_vector, build_queue, predict_scores};
use crate::rng::{stream, SimRng, Stream};
use crate::router::{coalesce_for_batching, route, route_top_k, RouteResult};
use crate::trace::GateTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Resource {
    Gpu,
    Cpu,
    Pcie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    Attn,
    Route,
    ResidentExpert,
    LoadedExpert,
    CpuExpert,
    DemandLoad,
    PrefetchLoad,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub resource: Resource,
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert: Option<ExpertId>,
    pub start: u64,
    pub end: u64,
    /// For prefetch loads, the layer and iteration being prefetched for.
    pub layer: u32,
    pub iteration: u64,
    /// A prefetch cut short at its target layer's routing.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub aborted: bool,
}

impl Task {
    fn new(
        resource: Resource,
        kind: TaskKind,
        expert: Option<ExpertId>,
        start: u64,
        len: u64,
        layer: u32,
        iteration: u64,
    ) -> Self {
        Self {
            resource,
            kind,
            expert,
            start,
            end: start + len,
            layer,
            iteration,
            aborted: false,
        }
    }
}

/// Key instants of one executed layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub iteration: u64,
    pub layer: u32,
    pub start: u64,
    pub gate: u64,
    pub route_end: u64,
    pub complete: u64,
    /// Distinct experts selected by the batch; shielded until `complete`.
    pub selected: Vec<ExpertId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eviction {
    pub time: u64,
    pub evicted: ExpertId,
    pub admitted: ExpertId,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Timeline {
    pub tasks: Vec<Task>,
    pub iteration_completion: Vec<u64>,
    #[serde(default)]
    pub spans: Vec<LayerSpan>,
    #[serde(default)]
    pub evictions: Vec<Eviction>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PrefetchStats {
    /// Queue entries built, before any were dropped.
    pub queued: u64,
    pub issued: u64,
    /// Entries dropped undispatched at their layer's gate.
    pub dropped: u64,
    /// Transfers that landed before their layer routed.
    pub admitted: u64,
    /// In-flight transfers that routing then selected.
    pub joined: u64,
    pub aborted: u64,
    /// Admitted prefetches that their layer then selected.
    pub useful: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub stage: String,
    pub cache_policy: CachePolicy,
    pub iterations: u64,
    pub total_time: u64,
    pub tpot: f64,
    pub selections: u64,
    pub hits: u64,
    pub misses: u64,
    pub hit_rate: f64,
    pub substitutions: u64,
    pub replaceable: u64,
    pub substitution_ratio: f64,
    pub demand_loads: u64,
    pub prefetch_loads: u64,
    pub cpu_computed: u64,
    pub evictions: u64,
    /// Admissions postponed to layer completion because every resident
    /// expert was shielded.
    pub deferred_admissions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub timeline: Timeline,
    pub metrics: Metrics,
    pub prefetch: PrefetchStats,
    pub cache_final: CacheSnapshot,
}

/// Expert work for one layer after routing and balancing.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerPlan {
    pub iteration: u64,
    pub layer: u32,
    /// Resident experts, run on the GPU from routing end.
    pub resident: Vec<ExpertId>,
    /// CPU-computed experts with their token counts.
    pub cpu: Vec<(ExpertId, u64)>,
    /// Experts to demand-load, in issue order.
    pub demand: Vec<ExpertId>,
    /// Experts already on the wire, with arrival times.
    pub joined: Vec<(ExpertId, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSchedule {
    pub tasks: Vec<Task>,
    pub gate: u64,
    pub route_end: u64,
    pub resident_done: u64,
    pub complete: u64,
    /// When PCIe frees up after this layer's demand loads.
    pub pcie_free: u64,
    /// Arrival time of every loaded expert, in arrival order.
    pub arrivals: Vec<(ExpertId, u64)>,
}

/// Lays out one layer's tasks starting at `start`. `pcie_free` is when the
/// link can take the first demand load.
pub fn schedule_layer(start: u64, pcie_free: u64, plan: &LayerPlan, cost: &CostModel) -> LayerSchedule {
    let (it, layer) = (plan.iteration, plan.layer);
    let gate = start + cost.t_attn;
    let route_end = gate + cost.t_route;
    let mut tasks = vec![
        Task::new(Resource::Gpu, TaskKind::Attn, None, start, cost.t_attn, layer, it),
        Task::new(Resource::Cpu, TaskKind::Route, None, gate, cost.t_route, layer, it),
    ];

    let mut gpu = route_end;
    for &e in &plan.resident {
        tasks.push(Task::new(
            Resource::Gpu,
            TaskKind::ResidentExpert,
            Some(e),
            gpu,
            cost.t_gpu,
            layer,
            it,
        ));
        gpu += cost.t_gpu;
    }
    let resident_done = gpu;

    let mut cpu = route_end;
    for &(e, batch) in &plan.cpu {
        let len = batch * cost.t_cpu_token;
        tasks.push(Task::new(
            Resource::Cpu,
            TaskKind::CpuExpert,
            Some(e),
            cpu,
            len,
            layer,
            it,
        ));
        cpu += len;
    }

    let mut arrivals = plan.joined.clone();
    let mut pcie = pcie_free.max(route_end);
    for &e in &plan.demand {
        tasks.push(Task::new(
            Resource::Pcie,
            TaskKind::DemandLoad,
            Some(e),
            pcie,
            cost.t_load,
            layer,
            it,
        ));
        pcie += cost.t_load;
        arrivals.push((e, pcie));
    }
    arrivals.sort_by_key(|&(e, t)| (t, e));

    for &(e, ready) in &arrivals {
        let s = gpu.max(ready);
        tasks.push(Task::new(
            Resource::Gpu,
            TaskKind::LoadedExpert,
            Some(e),
            s,
            cost.t_gpu,
            layer,
            it,
        ));
        gpu = s + cost.t_gpu;
    }

    let complete = tasks.iter().map(|t| t.end).max().unwrap_or(route_end);
    LayerSchedule {
        tasks,
        gate,
        route_end,
        resident_done,
        complete,
        pcie_free: pcie,
        arrivals,
    }
}

struct InFlight {
    expert: ExpertId,
    task: usize,
    end: u64,
}

struct Sim<'a> {
    trace: &'a GateTrace,
    cfg: &'a SimConfig,
    cache: CacheState,
    predictor: SimRng,
    timeline: Timeline,
    metrics: Metrics,
    prefetch: PrefetchStats,
    /// Transfers for the upcoming layer, in dispatch order.
    in_flight: Vec<InFlight>,
    /// Prefetched experts admitted for the upcoming layer.
    prefetched: BTreeSet<ExpertId>,
    pcie_free: u64,
    clock: u64,
}

impl Sim<'_> {
    fn stamp(&self, it: usize, layer: usize) -> u64 {
        (it * self.trace.shape.num_layers + layer) as u64
    }

    /// Admits `e` unless the layer has no slots. Returns false when every
    /// resident is shielded.
    fn admit(&mut self, e: ExpertId, time: u64, stamp: u64) -> bool {
        if self.cache.capacity() == 0 || self.cache.is_resident(e) {
            return true;
        }
        match self.cache.admit(e, stamp) {
            Ok(evicted) => {
                if let Some(v) = evicted {
                    self.metrics.evictions += 1;
                    self.timeline.evictions.push(Eviction {
                        time,
                        evicted: v,
                        admitted: e,
                    });
                }
                true
            }
            Err(Error::NoEvictable { .. }) => false,
            Err(other) => unreachable!("admit failed: {other}"),
        }
    }

    /// Lands in-flight transfers that finish by `until`.
    fn land_prefetches(&mut self, until: u64, stamp: u64) {
        let (done, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.in_flight)
            .into_iter()
            .partition(|f| f.end <= until);
        self.in_flight = rest;
        for f in done {
            if self.admit(f.expert, f.end, stamp) {
                self.prefetch.admitted += 1;
                self.prefetched.insert(f.expert);
            }
        }
    }

    fn route(&self, layer: usize, scores: &[Vec<f64>]) -> Result<RouteResult> {
        let mask = self.cache.mask(layer);
        let k = self.trace.shape.top_k;
        if self.cfg.stages.contains(Stage::ER) {
            let r = route(layer as u32, scores, &mask, k, &self.cfg.router)?;
            Ok(coalesce_for_batching(r, &mask))
        } else {
            route_top_k(layer as u32, scores, &mask, k)
        }
    }

    fn run_layer(&mut self, it: usize, layer: usize) -> Result<()> {
        let cost = self.cfg.cost;
        let stamp = self.stamp(it, layer);
        let start = self.clock;
        let gate = start + cost.t_attn;
        let route_end = gate + cost.t_route;
        let scores = self.trace.scores(it, layer);

        self.land_prefetches(gate, stamp);
        let mean = mean_vector(&scores);
        self.cache.record_scores(layer, &mean)?;
        self.land_prefetches(route_end, stamp);

        let routed = self.route(layer, &scores)?;
        self.metrics.substitutions += routed.substitution_count() as u64;
        self.metrics.replaceable += routed.replaceable_count() as u64;
        for tok in &routed.tokens {
            for &e in &tok.selected {
                self.metrics.selections += 1;
                if self.cache.is_resident(e) {
                    self.metrics.hits += 1;
                } else {
                    self.metrics.misses += 1;
                }
            }
        }

        let batches = routed.batch_sizes();
        let selected: BTreeSet<ExpertId> = batches.iter().map(|&(e, _)| e).collect();
        self.prefetch.useful += self.prefetched.intersection(&selected).count() as u64;
        self.prefetched.clear();

        let mut joined = Vec::new();
        for f in std::mem::take(&mut self.in_flight) {
            if selected.contains(&f.expert) {
                self.prefetch.joined += 1;
                joined.push((f.expert, f.end));
            } else {
                self.prefetch.aborted += 1;
                let task = &mut self.timeline.tasks[f.task];
                task.end = route_end.max(task.start);
                task.aborted = true;
            }
        }
        // Anything not joined has landed or been cut at route_end.
        let pcie_free = joined
            .iter()
            .map(|&(_, t)| t)
            .fold(self.pcie_free.min(route_end), u64::max);

        let mut plan = LayerPlan {
            iteration: it as u64,
            layer: layer as u32,
            ..LayerPlan::default()
        };
        let mut misses = Vec::new();
        for &(e, n) in &batches {
            if self.cache.is_resident(e) {
                self.cache.touch(e, stamp);
                plan.resident.push(e);
            } else if !joined.iter().any(|&(j, _)| j == e) {
                misses.push(BalanceItem {
                    uid: e,
                    batch: n as u64,
                });
            }
        }
        plan.joined = joined;
        if self.cfg.stages.contains(Stage::BA) {
            let result = balance(&BalanceInput {
                items: misses.clone(),
                t_cpu_token: cost.t_cpu_token,
                t_load: cost.t_load,
            });
            let batch_of: BTreeMap<ExpertId, u64> = misses.iter().map(|m| (m.uid, m.batch)).collect();
            plan.cpu = result.cpu_list.iter().map(|e| (*e, batch_of[e])).collect();
            plan.demand = result.load_list;
        } else {
            misses.sort_by(|a, b| b.batch.cmp(&a.batch).then(a.uid.cmp(&b.uid)));
            plan.demand = misses.iter().map(|m| m.uid).collect();
        }
        self.metrics.demand_loads += plan.demand.len() as u64;
        self.metrics.cpu_computed += plan.cpu.len() as u64;

        let sched = schedule_layer(start, pcie_free, &plan, &cost);
        debug_assert_eq!((sched.gate, sched.route_end), (gate, route_end));
        self.timeline.tasks.extend(sched.tasks.iter().cloned());

        self.cache.shield(selected.iter().copied());
        let mut deferred = Vec::new();
        for &(e, t) in &sched.arrivals {
            if !self.admit(e, t, stamp) {
                deferred.push(e);
            }
        }
        self.cache.unshield_layer(layer);
        self.metrics.deferred_admissions += deferred.len() as u64;
        for e in deferred {
            let ok = self.admit(e, sched.complete, stamp);
            debug_assert!(ok, "no evictable expert after unshield");
        }

        self.timeline.spans.push(LayerSpan {
            iteration: it as u64,
            layer: layer as u32,
            start,
            gate,
            route_end,
            complete: sched.complete,
            selected: selected.into_iter().collect(),
        });
        self.pcie_free = sched.pcie_free;
        self.clock = sched.complete;

        if self.cfg.stages.contains(Stage::Pre) {
            self.plan_prefetch(it, layer, sched.resident_done)?;
        }
        Ok(())
    }

    fn plan_prefetch(&mut self, it: usize, layer: usize, from: u64) -> Result<()> {
        let shape = &self.trace.shape;
        let (next_it, next_layer) = if layer + 1 < shape.num_layers {
            (it, layer + 1)
        } else {
            (it + 1, 0)
        };
        if next_it >= self.trace.len() || self.cache.capacity() == 0 {
            return Ok(());
        }
        let mut preds = Vec::with_capacity(shape.batch_size);
        for tok in &self.trace.iterations[next_it].layers[next_layer] {
            let p = predict_scores(
                &tok.s,
                tok.pred.as_deref(),
                &self.cfg.predictor,
                shape.top_k,
                self.cfg.router.alpha,
                &mut self.predictor,
            )?;
            preds.push(p.scores);
        }
        let predicted = batch_top_score_vector(&preds, shape.top_k, self.cfg.router.alpha)?;
        let mut queue = build_queue(
            next_layer as u32,
            &predicted,
            &self.cache.mask(next_layer),
            self.cfg.predictor.depth(shape),
        );
        self.prefetch.queued += queue.len() as u64;

        let next_gate = self.clock + self.cfg.cost.t_attn;
        let mut t = from.max(self.pcie_free);
        while t < next_gate {
            let Some(entry) = queue.issue_next() else { break };
            let task = Task::new(
                Resource::Pcie,
                TaskKind::PrefetchLoad,
                Some(entry.expert),
                t,
                self.cfg.cost.t_load,
                next_layer as u32,
                next_it as u64,
            );
            t = task.end;
            self.in_flight.push(InFlight {
                expert: entry.expert,
                task: self.timeline.tasks.len(),
                end: task.end,
            });
            self.timeline.tasks.push(task);
            self.prefetch.issued += 1;
        }
        self.pcie_free = self.pcie_free.max(t);
        self.prefetch.dropped += queue.clear_on_gate(next_layer as u32) as u64;
        Ok(())
    }
}

fn mean_vector(scores: &[Vec<f64>]) -> Vec<f64> {
    let n = scores.len().max(1) as f64;
    let mut out = vec![0.0; scores.first().map_or(0, Vec::len)];
    for v in scores {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Cache policy in force for a configuration: the configured one when cache
/// eviction is enabled, LRU otherwise.
pub fn effective_policy(cfg: &SimConfig) -> CachePolicy {
    if cfg.stages.contains(Stage::CE) {
        cfg.cache.policy
    } else {
        CachePolicy::Lru
    }
}

pub fn simulate(trace: &GateTrace, cfg: &SimConfig) -> Result<SimOutput> {
    validate_config(cfg).into_result()?;
    if trace.shape != cfg.shape {
        return Err(Error::ShapeMismatch {
            trace: trace.shape.to_string(),
            config: cfg.shape.to_string(),
        });
    }
    let shape = &cfg.shape;
    let mut fill_rng = stream(cfg.seed, Stream::InitialFill);
    let mut cache = CacheState::with_initial_fill(shape.num_layers, shape.experts_per_layer, &cfg.cache, &mut fill_rng);
    let policy = effective_policy(cfg);
    cache.set_policy(policy);

    let mut sim = Sim {
        trace,
        cfg,
        cache,
        predictor: stream(cfg.seed, Stream::Predictor),
        timeline: Timeline::default(),
        metrics: Metrics {
            stage: cfg.stages.label(),
            cache_policy: policy,
            iterations: trace.len() as u64,
            total_time: 0,
            tpot: 0.0,
            selections: 0,
            hits: 0,
            misses: 0,
            hit_rate: 0.0,
            substitutions: 0,
            replaceable: 0,
            substitution_ratio: 0.0,
            demand_loads: 0,
            prefetch_loads: 0,
            cpu_computed: 0,
            evictions: 0,
            deferred_admissions: 0,
        },
        prefetch: PrefetchStats::default(),
        in_flight: Vec::new(),
        prefetched: BTreeSet::new(),
        pcie_free: 0,
        clock: 0,
    };

    for it in 0..trace.len() {
        for layer in 0..shape.num_layers {
            sim.run_layer(it, layer)?;
        }
        sim.timeline.iteration_completion.push(sim.clock);
    }

    let mut m = sim.metrics;
    m.total_time = sim.clock;
    m.tpot = ratio(m.total_time, m.iterations);
    m.hit_rate = ratio(m.hits, m.selections);
    m.substitution_ratio = ratio(m.substitutions, m.replaceable);
    m.prefetch_loads = sim.prefetch.issued;
    log::debug!("{}: tpot {:.2} hit {:.3}", m.stage, m.tpot, m.hit_rate);
    Ok(SimOutput {
        timeline: sim.timeline,
        metrics: m,
        prefetch: sim.prefetch,
        cache_final: sim.cache.snapshot(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpotDelta {
    pub from: String,
    pub to: String,
    pub delta: f64,
    /// `delta / tpot(from)`; negative is faster.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub rows: Vec<Metrics>,
    pub deltas: Vec<TpotDelta>,
}

impl Ablation {
    /// Assembles rows given in ladder order.
    pub fn from_rows(rows: Vec<Metrics>) -> Self {
        let deltas = rows
            .windows(2)
            .map(|w| {
                let delta = w[1].tpot - w[0].tpot;
                TpotDelta {
                    from: w[0].stage.clone(),
                    to: w[1].stage.clone(),
                    delta,
                    relative: if w[0].tpot > 0.0 { delta / w[0].tpot } else { 0.0 },
                }
            })
            .collect();
        Self { rows, deltas }
    }
}

/// Runs the five cumulative stage sets on one trace.
pub fn run_ablation(trace: &GateTrace, base: &SimConfig) -> Result<Ablation> {
    let rows = StageSet::ablation_ladder()
        .into_iter()
        .map(|stages| simulate(trace, &base.with_stages(stages)).map(|o| o.metrics))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ablation::from_rows(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    NegativeDuration,
    ResourceOverlap,
    LoadBeforeCompute,
    ShieldedEviction,
    PrefetchPriority,
    Chaining,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineViolation {
    pub rule: Rule,
    pub message: String,
}

/// Audits a timeline. Span-based checks only run when spans are present.
pub fn verify_timeline(tl: &Timeline) -> Vec<TimelineViolation> {
    let mut out = Vec::new();
    let mut flag = |rule: Rule, message: String| out.push(TimelineViolation { rule, message });

    for t in &tl.tasks {
        if t.end < t.start {
            flag(Rule::NegativeDuration, format!("{t:?} ends before it starts"));
        }
    }

    let mut by_resource: BTreeMap<Resource, Vec<&Task>> = BTreeMap::new();
    for t in tl.tasks.iter().filter(|t| t.end > t.start) {
        by_resource.entry(t.resource).or_default().push(t);
    }
    for tasks in by_resource.values_mut() {
        tasks.sort_by_key(|t| (t.start, t.end));
        for w in tasks.windows(2) {
            if w[1].start < w[0].end {
                flag(Rule::ResourceOverlap, format!("{:?} overlaps {:?}", w[1], w[0]));
            }
        }
    }

    for t in tl.tasks.iter().filter(|t| t.kind == TaskKind::LoadedExpert) {
        let loaded = tl.tasks.iter().any(|l| {
            matches!(l.kind, TaskKind::DemandLoad | TaskKind::PrefetchLoad)
                && !l.aborted
                && l.iteration == t.iteration
                && l.expert == t.expert
                && l.end <= t.start
        });
        if !loaded {
            flag(Rule::LoadBeforeCompute, format!("{t:?} has no completed load"));
        }
    }

    for ev in &tl.evictions {
        for s in tl.spans.iter().filter(|s| s.layer == ev.evicted.layer) {
            if s.route_end < ev.time && ev.time < s.complete && s.selected.contains(&ev.evicted) {
                flag(
                    Rule::ShieldedEviction,
                    format!(
                        "{} evicted at {} while layer {} of iteration {} runs",
                        ev.evicted, ev.time, s.layer, s.iteration
                    ),
                );
            }
        }
    }

    let span_of: BTreeMap<(u64, u32), &LayerSpan> = tl.spans.iter().map(|s| ((s.iteration, s.layer), s)).collect();
    let prefetch_starts: Vec<u64> = tl
        .tasks
        .iter()
        .filter(|t| t.kind == TaskKind::PrefetchLoad)
        .map(|t| t.start)
        .collect();
    for d in tl.tasks.iter().filter(|t| t.kind == TaskKind::DemandLoad) {
        let Some(span) = span_of.get(&(d.iteration, d.layer)) else {
            continue;
        };
        if let Some(p) = prefetch_starts.iter().find(|&&p| span.route_end <= p && p < d.start) {
            flag(
                Rule::PrefetchPriority,
                format!(
                    "prefetch started at {p} while demand load of {:?} waited from {}",
                    d.expert, span.route_end
                ),
            );
        }
    }

    let mut prev_complete = 0;
    for (i, s) in tl.spans.iter().enumerate() {
        if s.start != prev_complete {
            flag(
                Rule::Chaining,
                format!(
                    "layer {} of iteration {} starts at {}, previous completed at {prev_complete}",
                    s.layer, s.iteration, s.start
                ),
            );
        }
        let own = tl
            .tasks
            .iter()
            .filter(|t| t.kind != TaskKind::PrefetchLoad && t.iteration == s.iteration && t.layer == s.layer);
        for t in own {
            if t.start < s.start || t.end > s.complete {
                flag(
                    Rule::Chaining,
                    format!("{t:?} lies outside its layer [{}, {}]", s.start, s.complete),
                );
            }
            if t.kind == TaskKind::Attn && (t.start != s.start || t.end != s.gate) {
                flag(Rule::Chaining, format!("{t:?} does not open its layer"));
            }
        }
        let last_of_iteration = tl.spans.get(i + 1).is_none_or(|n| n.iteration != s.iteration);
        if last_of_iteration {
            match tl.iteration_completion.get(s.iteration as usize) {
                Some(&c) if c == s.complete => {}
                other => flag(
                    Rule::Chaining,
                    format!(
                        "iteration {} completion {:?}, last layer completed at {}",
                        s.iteration, other, s.complete
                    ),
                ),
            }
        }
        prev_complete = s.complete;
    }
    out
}
