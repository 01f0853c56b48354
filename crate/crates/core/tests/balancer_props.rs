use std::collections::BTreeSet;

use moe_sched::balancer::{balance, brute_force_balance, BalanceInput, BalanceItem};
use moe_sched::ExpertId;
use proptest::prelude::*;

fn input() -> impl Strategy<Value = BalanceInput> {
    (prop::collection::vec(1u64..=8, 0..=10), 0u64..=40, 0u64..=160).prop_map(|(batches, t_cpu_token, t_load)| {
        BalanceInput {
            items: batches
                .into_iter()
                .enumerate()
                .map(|(i, batch)| BalanceItem {
                    uid: ExpertId::new(0, i),
                    batch,
                })
                .collect(),
            t_cpu_token,
            t_load,
        }
    })
}

proptest! {
    #[test]
    fn assignment_is_a_partition(inp in input()) {
        let r = balance(&inp);
        let load: BTreeSet<_> = r.load_list.iter().copied().collect();
        let cpu: BTreeSet<_> = r.cpu_list.iter().copied().collect();
        prop_assert!(load.is_disjoint(&cpu));
        prop_assert_eq!(load.len() + cpu.len(), inp.items.len());
        prop_assert_eq!(r.load_list.len(), load.len());
        prop_assert_eq!(r.cpu_list.len(), cpu.len());
        let all: BTreeSet<_> = inp.items.iter().map(|i| i.uid).collect();
        prop_assert_eq!(load.union(&cpu).copied().collect::<BTreeSet<_>>(), all);
    }

    #[test]
    fn costs_match_the_lists(inp in input()) {
        let r = balance(&inp);
        prop_assert_eq!(r.c_load, r.load_list.len() as u64 * inp.t_load);
        let cpu: u64 = inp.items.iter().filter(|i| r.cpu_list.contains(&i.uid)).map(|i| i.batch * inp.t_cpu_token).sum();
        prop_assert_eq!(r.c_cpu, cpu);
    }

    #[test]
    fn never_beats_the_optimum(inp in input()) {
        prop_assert!(balance(&inp).makespan() >= brute_force_balance(&inp).unwrap());
    }

    #[test]
    fn loads_take_largest_batches_first(inp in input()) {
        // Loaded experts all have batch ≥ every CPU-assigned expert.
        let r = balance(&inp);
        let batch = |e: &ExpertId| inp.items.iter().find(|i| i.uid == *e).unwrap().batch;
        let min_load = r.load_list.iter().map(batch).min();
        let max_cpu = r.cpu_list.iter().map(batch).max();
        if let (Some(l), Some(c)) = (min_load, max_cpu) {
            prop_assert!(l >= c);
        }
    }
}
