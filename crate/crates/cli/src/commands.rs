use std::path::Path;

use moe_sched::config::{CachePolicy, ModelShape, SimConfig, Stage, StageSet};
use moe_sched::pipeline::{simulate, verify_timeline, Ablation, SimOutput};
use moe_sched::trace::{generate_trace, read_trace, save_trace, skew_summary, GateTrace, SkewProfile};
use rayon::prelude::*;

use crate::report::{self, AblationReport, CompareReport, RunEntry, RunReport, SweepReport};
use crate::{AblateArgs, CliError, CliResult, CompareArgs, GenTraceArgs, RunArgs, SweepArgs};

/// Env var capping the worker threads used by multi-run commands.
pub const THREADS_ENV: &str = "MOE_SCHED_THREADS";

pub fn gen_trace(a: &GenTraceArgs) -> CliResult<()> {
    let d = SkewProfile::default();
    let profile = SkewProfile {
        hot_fraction: a.hot_fraction.unwrap_or(d.hot_fraction),
        hot_mass: a.hot_mass.unwrap_or(d.hot_mass),
        persistence: a.persistence.unwrap_or(d.persistence),
        concentration: a.concentration.unwrap_or(d.concentration),
        popularity_skew: a.popularity_skew.unwrap_or(d.popularity_skew),
    };
    let shape = ModelShape::new(a.layers, a.experts, a.k, a.batch);
    let trace = generate_trace(shape, &profile, a.iters, a.seed)?;
    save_trace(&trace, &a.out)?;

    println!("wrote {} ({} iterations, {shape})", a.out.display(), trace.len());
    if !trace.is_empty() {
        let s = skew_summary(&trace, a.summary_alpha)?;
        println!(
            "alpha {}: {:.2} top-score and {:.2} low-score actives per vector",
            s.alpha, s.mean_top_score, s.mean_low_score
        );
        println!("vectors with both classes: {:.1}%", 100.0 * s.both_classes_fraction);
        if let (Some(f), Some(l)) = (s.reuse_rank_first, s.reuse_rank_last) {
            println!(
                "next-iteration reuse: rank 1 {f:.3}, rank {} {l:.3}",
                shape.experts_per_layer
            );
        }
    }
    Ok(())
}

/// Trace plus its content hash.
pub struct LoadedTrace {
    pub trace: GateTrace,
    pub fingerprint: String,
}

pub fn load(path: &Path) -> CliResult<LoadedTrace> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let trace = read_trace(std::io::Cursor::new(&bytes), path)?;
    Ok(LoadedTrace {
        trace,
        fingerprint: report::fingerprint(&bytes),
    })
}

/// Simulates and audits the timeline.
pub fn checked_simulate(trace: &GateTrace, cfg: &SimConfig) -> CliResult<SimOutput> {
    let out = simulate(trace, cfg)?;
    let violations = verify_timeline(&out.timeline);
    if let Some(first) = violations.first() {
        return Err(CliError::Invariant(format!(
            "{} violation(s) in stage {}; first: {:?}: {}",
            violations.len(),
            out.metrics.stage,
            first.rule,
            first.message
        )));
    }
    Ok(out)
}

fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

/// Runs every config in parallel; results keep the input order.
pub fn simulate_all(trace: &GateTrace, cfgs: Vec<SimConfig>) -> CliResult<Vec<(SimConfig, SimOutput)>> {
    thread_pool()?.install(|| {
        cfgs.into_par_iter()
            .map(|cfg| checked_simulate(trace, &cfg).map(|o| (cfg, o)))
            .collect()
    })
}

pub fn run(a: &RunArgs) -> CliResult<()> {
    let t = load(&a.trace)?;
    let cfg = a.config.resolve(t.trace.shape)?;
    let out = checked_simulate(&t.trace, &cfg)?;
    if let Some(path) = &a.timeline {
        report::write_json(path, &out.timeline.tasks)?;
    }
    let m = &out.metrics;
    println!(
        "{}: tpot {:.2}, hit rate {:.4}, substitution ratio {:.4}",
        m.stage, m.tpot, m.hit_rate, m.substitution_ratio
    );
    report::write_json(&a.out, &RunReport::new(&t.fingerprint, cfg, out))
}

pub fn ablation_report(t: &LoadedTrace, base: &SimConfig) -> CliResult<AblationReport> {
    let cfgs = StageSet::ablation_ladder()
        .into_iter()
        .map(|s| base.with_stages(s))
        .collect();
    let runs = simulate_all(&t.trace, cfgs)?;
    let ablation = Ablation::from_rows(runs.iter().map(|(_, o)| o.metrics.clone()).collect());
    Ok(AblationReport {
        tool_version: report::TOOL_VERSION.to_string(),
        trace_fingerprint: t.fingerprint.clone(),
        config: base.clone(),
        runs: runs.into_iter().map(RunEntry::from).collect(),
        tpot_deltas: ablation.deltas,
    })
}

pub fn ablate(a: &AblateArgs) -> CliResult<()> {
    let t = load(&a.trace)?;
    let base = a.config.resolve(t.trace.shape)?;
    let rep = ablation_report(&t, &base)?;
    for r in &rep.runs {
        let m = &r.metrics;
        println!(
            "{:<14} tpot {:>9.2}  hit {:.4}  subst {:.4}  demand loads {}",
            m.stage, m.tpot, m.hit_rate, m.substitution_ratio, m.demand_loads
        );
    }
    if let Some(path) = &a.csv {
        let rows: Vec<_> = rep.runs.iter().map(|r| report::ablation_row(&r.metrics)).collect();
        report::write_csv(path, &report::ABLATION_HEADER, &rows)?;
    }
    report::write_json(&a.out, &rep)
}

/// 0, 0.05, ..., 0.6.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=12).map(|i| i as f64 / 20.0).collect()
}

pub fn sweep_alpha(a: &SweepArgs) -> CliResult<()> {
    let t = load(&a.trace)?;
    let base = a.config.resolve(t.trace.shape)?;
    let alphas = a.alphas.clone().unwrap_or_else(default_alpha_grid);
    if let Some(bad) = alphas.iter().find(|x| !(0.0..1.0).contains(*x)) {
        return Err(CliError::Config(format!("alpha {bad} outside [0, 1)")));
    }
    let cfgs = alphas
        .iter()
        .map(|&alpha| {
            let mut c = base.clone();
            c.router.alpha = alpha;
            c
        })
        .collect();
    let runs = simulate_all(&t.trace, cfgs)?;
    let rows: Vec<_> = runs
        .iter()
        .map(|(c, o)| report::sweep_row(c.router.alpha, &o.metrics))
        .collect();
    report::write_csv(&a.out, &report::SWEEP_HEADER, &rows)?;
    println!("wrote {} alpha rows to {}", rows.len(), a.out.display());
    if let Some(path) = &a.json {
        report::write_json(
            path,
            &SweepReport {
                tool_version: report::TOOL_VERSION.to_string(),
                trace_fingerprint: t.fingerprint.clone(),
                config: base,
                runs: runs.into_iter().map(RunEntry::from).collect(),
            },
        )?;
    }
    Ok(())
}

pub fn compare(a: &CompareArgs) -> CliResult<()> {
    let t = load(&a.trace)?;
    let base = a.config.resolve(t.trace.shape)?;
    if !base.stages.contains(Stage::CE) {
        log::warn!("CE disabled: both runs fall back to LRU eviction");
    }
    let with_policy = |p: CachePolicy| {
        let mut c = base.clone();
        c.cache.policy = p;
        c
    };
    let mut runs = simulate_all(
        &t.trace,
        vec![with_policy(CachePolicy::ScoreWindow), with_policy(CachePolicy::Lru)],
    )?;
    let lru = RunEntry::from(runs.pop().expect("two runs"));
    let score = RunEntry::from(runs.pop().expect("two runs"));
    println!(
        "score window: tpot {:.2}, hit {:.4}; LRU: tpot {:.2}, hit {:.4}",
        score.metrics.tpot, score.metrics.hit_rate, lru.metrics.tpot, lru.metrics.hit_rate
    );
    report::write_json(
        &a.out,
        &CompareReport {
            tool_version: report::TOOL_VERSION.to_string(),
            trace_fingerprint: t.fingerprint,
            tpot_delta: score.metrics.tpot - lru.metrics.tpot,
            hit_rate_delta: score.metrics.hit_rate - lru.metrics.hit_rate,
            score_window: score,
            lru,
        },
    )
}
