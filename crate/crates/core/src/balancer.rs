//! CPU/PCIe load balancing for selected experts that are not GPU-resident.
//!
//! Each such expert is either transferred over PCIe (`t_load`, then computed
//! on the GPU) or computed on the CPU (`batch * t_cpu_token`). [`balance`] is
//! the two-pointer greedy: items sorted by batch size descending, the largest
//! remaining batch goes to PCIe whenever cumulative load time does not exceed
//! cumulative CPU time, otherwise the smallest remaining batch goes to the CPU.

use serde::{Deserialize, Serialize};

use crate::config::ExpertId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceItem {
    pub uid: ExpertId,
    /// Tokens routed to this expert in the current batch.
    pub batch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceInput {
    pub items: Vec<BalanceItem>,
    pub t_cpu_token: u64,
    pub t_load: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BalanceResult {
    /// Experts to transfer, in assignment order.
    pub load_list: Vec<ExpertId>,
    /// Experts to compute on the CPU, in assignment order.
    pub cpu_list: Vec<ExpertId>,
    pub c_load: u64,
    pub c_cpu: u64,
}

impl BalanceResult {
    pub fn makespan(&self) -> u64 {
        self.c_load.max(self.c_cpu)
    }
}

pub fn balance(input: &BalanceInput) -> BalanceResult {
    let mut items = input.items.clone();
    items.sort_by(|a, b| b.batch.cmp(&a.batch).then(a.uid.cmp(&b.uid)));

    let mut out = BalanceResult::default();
    // Half-open [l, r) so an empty input needs no signed arithmetic.
    let (mut l, mut r) = (0usize, items.len());
    while l < r {
        if out.c_load <= out.c_cpu {
            out.c_load += input.t_load;
            out.load_list.push(items[l].uid);
            l += 1;
        } else {
            r -= 1;
            out.c_cpu += items[r].batch * input.t_cpu_token;
            out.cpu_list.push(items[r].uid);
        }
    }
    out
}

pub const BRUTE_FORCE_MAX_ITEMS: usize = 20;

/// Exact `min over assignments of max(c_load, c_cpu)` by enumerating all
/// `2^n` splits. Test oracle only.
pub fn brute_force_balance(input: &BalanceInput) -> Result<u64> {
    let n = input.items.len();
    if n > BRUTE_FORCE_MAX_ITEMS {
        return Err(Error::TooManyItems {
            max: BRUTE_FORCE_MAX_ITEMS,
            got: n,
        });
    }
    let mut best = u64::MAX;
    for mask in 0u32..(1u32 << n) {
        let loaded = mask.count_ones() as u64 * input.t_load;
        let cpu: u64 = input
            .items
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) == 0)
            .map(|(_, it)| it.batch * input.t_cpu_token)
            .sum();
        best = best.min(loaded.max(cpu));
    }
    Ok(best)
}
