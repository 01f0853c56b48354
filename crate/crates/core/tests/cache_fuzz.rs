//! Randomized operation sequences against a shadow model of the cache.

use std::collections::{BTreeSet, VecDeque};

use moe_sched::cache::CacheState;
use moe_sched::config::{CacheConfig, CachePolicy, ExpertId};
use moe_sched::rng::SimRng;
use rand::{Rng, SeedableRng};

const EXPERTS: usize = 12;
const LAYERS: usize = 2;

struct Shadow {
    window: usize,
    history: Vec<VecDeque<Vec<f64>>>,
    stamps: Vec<Vec<Option<u64>>>,
}

impl Shadow {
    fn average(&self, e: ExpertId) -> f64 {
        let h = &self.history[e.layer as usize];
        if h.is_empty() {
            0.0
        } else {
            h.iter().map(|v| v[e.idx()]).sum::<f64>() / h.len() as f64
        }
    }
}

fn fuzz(policy: CachePolicy, seed: u64, ops: usize) {
    let cfg = CacheConfig {
        slots_per_layer: 5,
        history_window: 4,
        policy,
        ..CacheConfig::default()
    };
    let mut rng = SimRng::seed_from_u64(seed);
    let mut cache = CacheState::new(LAYERS, EXPERTS, &cfg);
    let mut shadow = Shadow {
        window: cfg.history_window,
        history: vec![VecDeque::new(); LAYERS],
        stamps: vec![vec![None; EXPERTS]; LAYERS],
    };
    let mut shielded: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); LAYERS];
    let mut clock = 0u64;

    for _ in 0..ops {
        clock += 1;
        let layer = rng.random_range(0..LAYERS);
        match rng.random_range(0..10) {
            0..=1 => {
                // Coarse values so that window-average ties occur.
                let v: Vec<f64> = (0..EXPERTS).map(|_| rng.random_range(0..4) as f64 / 8.0).collect();
                cache.record_scores(layer, &v).unwrap();
                let h = &mut shadow.history[layer];
                if h.len() == shadow.window {
                    h.pop_front();
                }
                h.push_back(v);
            }
            2 => {
                let e = ExpertId::new(layer, rng.random_range(0..EXPERTS));
                cache.shield([e]);
                shielded[layer].insert(e.idx());
            }
            3 => {
                cache.unshield_layer(layer);
                shielded[layer].clear();
            }
            4 => {
                let e = ExpertId::new(layer, rng.random_range(0..EXPERTS));
                cache.touch(e, clock);
                shadow.stamps[layer][e.idx()] = Some(clock);
            }
            _ => {
                let e = ExpertId::new(layer, rng.random_range(0..EXPERTS));
                if cache.is_resident(e) {
                    continue;
                }
                let before: Vec<ExpertId> = cache.resident(layer).collect();
                let unshielded: Vec<ExpertId> = before
                    .iter()
                    .copied()
                    .filter(|x| !shielded[layer].contains(&x.idx()))
                    .collect();
                let full = before.len() >= cfg.slots_per_layer;
                let result = cache.admit(e, clock);

                if full && unshielded.is_empty() {
                    assert!(result.is_err(), "admit must fail with every resident shielded");
                    assert_eq!(
                        cache.resident(layer).collect::<Vec<_>>(),
                        before,
                        "failed admit changed state"
                    );
                    continue;
                }
                let evicted = result.unwrap();
                shadow.stamps[layer][e.idx()] = Some(clock);
                assert_eq!(evicted.is_some(), full);
                if let Some(v) = evicted {
                    assert!(!shielded[layer].contains(&v.idx()), "evicted shielded {v}");
                    let want = match policy {
                        CachePolicy::ScoreWindow => unshielded.iter().copied().reduce(|best, x| {
                            if shadow.average(x) < shadow.average(best) {
                                x
                            } else {
                                best
                            }
                        }),
                        CachePolicy::Lru => unshielded.iter().copied().reduce(|best, x| {
                            if shadow.stamps[layer][x.idx()] < shadow.stamps[layer][best.idx()] {
                                x
                            } else {
                                best
                            }
                        }),
                    };
                    assert_eq!(Some(v), want);
                }
            }
        }
        for l in 0..LAYERS {
            assert!(cache.resident_count(l) <= cfg.slots_per_layer);
        }
    }
}

#[test]
fn score_window_fuzz() {
    for seed in 0..5 {
        fuzz(CachePolicy::ScoreWindow, seed, 10_000);
    }
}

#[test]
fn lru_fuzz() {
    for seed in 0..5 {
        fuzz(CachePolicy::Lru, seed, 10_000);
    }
}
