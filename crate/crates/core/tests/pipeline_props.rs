use std::collections::BTreeMap;

use moe_sched::config::{CacheConfig, CachePolicy, CostModel, ModelShape, PredictorConfig, SimConfig, Stage, StageSet};
use moe_sched::pipeline::{simulate, verify_timeline, Resource, TaskKind};
use moe_sched::trace::{generate_trace, GateTrace, SkewProfile};
use proptest::prelude::*;

fn small_cfg(shape: ModelShape, slots: usize, stages: StageSet, cost: CostModel, policy: CachePolicy) -> SimConfig {
    SimConfig {
        shape,
        cache: CacheConfig {
            slots_per_layer: slots,
            history_window: 4,
            policy,
            ..CacheConfig::default()
        },
        cost,
        stages,
        seed: 11,
        ..SimConfig::default()
    }
}

fn stage_sets() -> impl Strategy<Value = StageSet> {
    prop::collection::vec(any::<bool>(), 4)
        .prop_map(|on| Stage::ALL.iter().zip(on).filter(|(_, b)| *b).map(|(s, _)| *s).collect())
}

fn costs() -> impl Strategy<Value = CostModel> {
    (1u64..=8, 0u64..=3, 1u64..=40, 1u64..=120, 0u64..=4).prop_map(|(t_attn, t_gpu, t_cpu_token, t_load, t_route)| {
        CostModel {
            t_attn,
            t_gpu,
            t_cpu_token,
            t_load,
            t_route,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn timelines_are_valid(
        layers in 1usize..=3,
        experts in 5usize..=16,
        k in 1usize..=3,
        batch in 1usize..=4,
        slots_frac in 0.0f64..=1.0,
        stages in stage_sets(),
        cost in costs(),
        lru in any::<bool>(),
        iters in 1usize..=12,
        seed in 0u64..1000,
    ) {
        let shape = ModelShape::new(layers, experts, k, batch);
        let slots = (slots_frac * experts as f64) as usize;
        let policy = if lru { CachePolicy::Lru } else { CachePolicy::ScoreWindow };
        let trace = generate_trace(shape, &SkewProfile::default(), iters, seed).unwrap();
        let cfg = small_cfg(shape, slots, stages.clone(), cost, policy);
        let out = simulate(&trace, &cfg).unwrap();
        let v = verify_timeline(&out.timeline);
        prop_assert!(v.is_empty(), "{:?}", v);

        let m = &out.metrics;
        prop_assert_eq!(m.hits + m.misses, m.selections);
        prop_assert_eq!(m.selections, (iters * layers * batch * k) as u64);
        prop_assert!((0.0..=1.0).contains(&m.hit_rate));
        prop_assert_eq!(m.tpot, m.total_time as f64 / iters as f64);
        prop_assert!(m.substitution_ratio <= 1.0);
        if !stages.contains(Stage::ER) {
            prop_assert_eq!(m.substitutions, 0);
        }
        if !stages.contains(Stage::Pre) {
            prop_assert!(out.timeline.tasks.iter().all(|t| t.kind != TaskKind::PrefetchLoad));
        }
        if !stages.contains(Stage::BA) {
            prop_assert_eq!(m.cpu_computed, 0);
        }
        for l in &out.cache_final.layers {
            prop_assert!(l.resident.len() <= slots);
        }

        // Each iteration lasts at least as long as any resource is busy in it.
        let mut busy: BTreeMap<(u64, Resource), u64> = BTreeMap::new();
        for t in out.timeline.tasks.iter().filter(|t| t.kind != TaskKind::PrefetchLoad) {
            *busy.entry((t.iteration, t.resource)).or_default() += t.end - t.start;
        }
        let mut prev = 0;
        for (i, &done) in out.timeline.iteration_completion.iter().enumerate() {
            for r in [Resource::Gpu, Resource::Cpu, Resource::Pcie] {
                prop_assert!(done - prev >= busy.get(&(i as u64, r)).copied().unwrap_or(0));
            }
            prev = done;
        }
    }
}

#[test]
fn everything_resident_has_closed_form_tpot() {
    let shape = ModelShape::new(3, 10, 4, 1);
    let trace = generate_trace(shape, &SkewProfile::default(), 20, 2).unwrap();
    let cost = CostModel {
        t_route: 2,
        ..CostModel::default()
    };
    let cfg = small_cfg(shape, 10, StageSet::none(), cost, CachePolicy::Lru);
    let out = simulate(&trace, &cfg).unwrap();
    let per_layer = cost.t_attn + cost.t_route + 4 * cost.t_gpu;
    assert_eq!(out.metrics.tpot, (3 * per_layer) as f64);
    assert_eq!(out.metrics.hit_rate, 1.0);
    assert_eq!(out.metrics.demand_loads, 0);
}

/// A prediction that always names experts no token selects: every prefetch
/// is speculative waste and must not push any demand load later.
fn with_useless_predictions(mut trace: GateTrace) -> GateTrace {
    let experts = trace.shape.experts_per_layer;
    for it in &mut trace.iterations {
        for layer in &mut it.layers {
            for tok in layer.iter_mut() {
                let order = moe_sched::router::rank_desc(&tok.s);
                let mut pred = vec![0.0; experts];
                pred[*order.last().unwrap()] = 0.9;
                pred[order[order.len() - 2]] = 0.05;
                tok.pred = Some(pred);
            }
        }
    }
    trace
}

#[test]
fn useless_prefetch_never_delays_demand_loads() {
    let shape = ModelShape::new(4, 32, 4, 1);
    let trace = with_useless_predictions(generate_trace(shape, &SkewProfile::default(), 200, 5).unwrap());
    let base = small_cfg(
        shape,
        8,
        StageSet::none().with(Stage::CE).with(Stage::ER),
        CostModel::default(),
        CachePolicy::ScoreWindow,
    );
    let with_pre = base.with_stages(base.stages.clone().with(Stage::Pre));

    let a = simulate(&trace, &base).unwrap();
    let b = simulate(&trace, &with_pre).unwrap();
    assert!(b.prefetch.issued > 0);
    assert_eq!(b.prefetch.useful + b.prefetch.joined, 0);
    assert_eq!(b.prefetch.admitted, 0, "transfers must not land before the gate here");

    let demand = |o: &moe_sched::pipeline::SimOutput| -> Vec<(u64, u32, Option<moe_sched::ExpertId>, u64)> {
        o.timeline
            .tasks
            .iter()
            .filter(|t| t.kind == TaskKind::DemandLoad)
            .map(|t| (t.iteration, t.layer, t.expert, t.start))
            .collect()
    };
    assert_eq!(demand(&a), demand(&b));
    assert_eq!(a.metrics.tpot, b.metrics.tpot);
}

#[test]
fn perfect_prefetch_with_room_turns_misses_into_hits() {
    // Loads are cheap relative to a layer, so prefetches land before routing.
    let shape = ModelShape::new(4, 32, 4, 1);
    let trace = generate_trace(shape, &SkewProfile::default(), 200, 8).unwrap();
    let cost = CostModel {
        t_attn: 50,
        t_load: 10,
        ..CostModel::default()
    };
    let mut base = small_cfg(
        shape,
        8,
        StageSet::none().with(Stage::CE),
        cost,
        CachePolicy::ScoreWindow,
    );
    base.predictor = PredictorConfig {
        p_top: 1.0,
        p_active: 1.0,
        queue_depth: Some(4),
    };
    let with_pre = base.with_stages(base.stages.clone().with(Stage::Pre));
    let a = simulate(&trace, &base).unwrap();
    let b = simulate(&trace, &with_pre).unwrap();
    assert!(b.prefetch.useful > 0);
    assert!(
        b.metrics.hit_rate > a.metrics.hit_rate,
        "{} vs {}",
        b.metrics.hit_rate,
        a.metrics.hit_rate
    );
    assert!(verify_timeline(&b.timeline).is_empty());
}

#[test]
fn simulate_is_deterministic() {
    let shape = ModelShape::new(2, 16, 3, 2);
    let trace = generate_trace(shape, &SkewProfile::default(), 50, 1).unwrap();
    let cfg = small_cfg(
        shape,
        6,
        StageSet::all(),
        CostModel::default(),
        CachePolicy::ScoreWindow,
    );
    assert_eq!(simulate(&trace, &cfg).unwrap(), simulate(&trace, &cfg).unwrap());
}
