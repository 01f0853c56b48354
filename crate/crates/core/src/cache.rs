//! GPU residency of non-shared experts.
//!
//! Each layer owns `c` slots. Eviction picks, among resident experts that are
//! not shielded, either the lowest mean gate score over the last `n`
//! recorded vectors (score window) or the least recently accessed expert
//! (LRU). Missing history counts as a mean of 0. Ties go to the lowest index.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::config::{CacheConfig, CachePolicy, ExpertId, InitialFill};
use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq)]
struct LayerCache {
    resident: BTreeSet<u32>,
    history: VecDeque<Vec<f64>>,
    shielded: BTreeSet<u32>,
    last_access: Vec<Option<u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheState {
    experts: usize,
    capacity: usize,
    window: usize,
    policy: CachePolicy,
    layers: Vec<LayerCache>,
}

impl CacheState {
    /// Empty cache: nothing resident, no history.
    pub fn new(num_layers: usize, experts: usize, cfg: &CacheConfig) -> Self {
        let layer = LayerCache {
            resident: BTreeSet::new(),
            history: VecDeque::with_capacity(cfg.history_window),
            shielded: BTreeSet::new(),
            last_access: vec![None; experts],
        };
        Self {
            experts,
            capacity: cfg.slots_per_layer,
            window: cfg.history_window.max(1),
            policy: cfg.policy,
            layers: vec![layer; num_layers],
        }
    }

    /// Cache filled per `cfg.initial_fill`; `rng` is only drawn from for
    /// [`InitialFill::Random`].
    pub fn with_initial_fill(num_layers: usize, experts: usize, cfg: &CacheConfig, rng: &mut SimRng) -> Self {
        let mut state = Self::new(num_layers, experts, cfg);
        let c = cfg.slots_per_layer.min(experts);
        for layer in &mut state.layers {
            layer.resident = match cfg.initial_fill {
                InitialFill::Prefix => (0..c as u32).collect(),
                InitialFill::Random => sample(rng, experts, c).into_iter().map(|e| e as u32).collect(),
            };
        }
        state
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn set_policy(&mut self, policy: CachePolicy) {
        self.policy = policy;
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn is_resident(&self, e: ExpertId) -> bool {
        self.layers[e.layer as usize].resident.contains(&e.index)
    }

    pub fn is_shielded(&self, e: ExpertId) -> bool {
        self.layers[e.layer as usize].shielded.contains(&e.index)
    }

    pub fn resident(&self, layer: usize) -> impl Iterator<Item = ExpertId> + '_ {
        self.layers[layer]
            .resident
            .iter()
            .map(move |&i| ExpertId::new(layer, i as usize))
    }

    pub fn resident_count(&self, layer: usize) -> usize {
        self.layers[layer].resident.len()
    }

    /// `mask[e]` is true when expert `e` of `layer` is resident.
    pub fn mask(&self, layer: usize) -> Vec<bool> {
        let mut m = vec![false; self.experts];
        for &i in &self.layers[layer].resident {
            m[i as usize] = true;
        }
        m
    }

    pub fn history_len(&self, layer: usize) -> usize {
        self.layers[layer].history.len()
    }

    /// Pushes one score vector into the layer's window, dropping the oldest
    /// once `n` are held.
    pub fn record_scores(&mut self, layer: usize, scores: &[f64]) -> Result<()> {
        if scores.len() != self.experts {
            return Err(Error::VectorLength {
                expected: self.experts,
                got: scores.len(),
            });
        }
        let l = &mut self.layers[layer];
        if l.history.len() == self.window {
            l.history.pop_front();
        }
        l.history.push_back(scores.to_vec());
        Ok(())
    }

    /// Mean score of `e` over the retained window; 0 with no history.
    pub fn window_average(&self, e: ExpertId) -> f64 {
        let h = &self.layers[e.layer as usize].history;
        if h.is_empty() {
            return 0.0;
        }
        h.iter().map(|v| v[e.idx()]).sum::<f64>() / h.len() as f64
    }

    /// Marks an access for LRU bookkeeping.
    pub fn touch(&mut self, e: ExpertId, stamp: u64) {
        self.layers[e.layer as usize].last_access[e.idx()] = Some(stamp);
    }

    pub fn last_access(&self, e: ExpertId) -> Option<u64> {
        self.layers[e.layer as usize].last_access[e.idx()]
    }

    pub fn shield<I: IntoIterator<Item = ExpertId>>(&mut self, experts: I) {
        for e in experts {
            self.layers[e.layer as usize].shielded.insert(e.index);
        }
    }

    pub fn unshield_layer(&mut self, layer: usize) {
        self.layers[layer].shielded.clear();
    }

    pub fn shielded(&self, layer: usize) -> impl Iterator<Item = ExpertId> + '_ {
        self.layers[layer]
            .shielded
            .iter()
            .map(move |&i| ExpertId::new(layer, i as usize))
    }

    pub fn evict_candidate(&self, layer: usize) -> Result<ExpertId> {
        let l = &self.layers[layer];
        let candidates = l
            .resident
            .iter()
            .filter(|i| !l.shielded.contains(i))
            .map(|&i| ExpertId::new(layer, i as usize));
        let victim = match self.policy {
            CachePolicy::ScoreWindow => candidates
                .map(|e| (e, self.window_average(e)))
                // min_by keeps the first minimum, i.e. the lowest index.
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(e, _)| e),
            CachePolicy::Lru => candidates.min_by_key(|&e| l.last_access[e.idx()]),
        };
        victim.ok_or(Error::NoEvictable { layer: layer as u32 })
    }

    /// Inserts `e`, evicting first when the layer is full. Returns the evicted
    /// expert, if any. On error the state is unchanged.
    pub fn admit(&mut self, e: ExpertId, stamp: u64) -> Result<Option<ExpertId>> {
        if self.is_resident(e) {
            debug_assert!(false, "admit of resident expert {e}");
            return Err(Error::AlreadyResident(e));
        }
        let layer = e.layer as usize;
        let evicted = if self.layers[layer].resident.len() >= self.capacity {
            let victim = self.evict_candidate(layer)?;
            self.layers[layer].resident.remove(&victim.index);
            Some(victim)
        } else {
            None
        };
        self.layers[layer].resident.insert(e.index);
        self.touch(e, stamp);
        Ok(evicted)
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        CacheSnapshot {
            policy: self.policy,
            slots_per_layer: self.capacity,
            layers: (0..self.layers.len())
                .map(|layer| LayerSnapshot {
                    layer: layer as u32,
                    resident: self.layers[layer].resident.iter().copied().collect(),
                    window_len: self.layers[layer].history.len(),
                })
                .collect(),
        }
    }
}

/// Final cache contents as exported in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSnapshot {
    pub policy: CachePolicy,
    pub slots_per_layer: usize,
    pub layers: Vec<LayerSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub layer: u32,
    pub resident: Vec<u32>,
    pub window_len: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: usize, n: usize, policy: CachePolicy) -> CacheConfig {
        CacheConfig {
            slots_per_layer: c,
            history_window: n,
            policy,
            initial_fill: InitialFill::Prefix,
        }
    }

    fn e(i: usize) -> ExpertId {
        ExpertId::new(0, i)
    }

    /// Experts X=0, Y=1, Z=2 resident with two recorded iterations.
    fn xyz(policy: CachePolicy) -> CacheState {
        let mut s = CacheState::new(1, 4, &cfg(3, 4, policy));
        for i in 0..3 {
            s.admit(e(i), 0).unwrap();
        }
        s.record_scores(0, &[0.3, 0.01, 0.1, 0.0]).unwrap();
        s.record_scores(0, &[0.1, 0.03, 0.05, 0.0]).unwrap();
        s
    }

    #[test]
    fn ring_keeps_last_n() {
        let mut s = CacheState::new(1, 2, &cfg(1, 2, CachePolicy::ScoreWindow));
        s.record_scores(0, &[1.0, 0.0]).unwrap();
        s.record_scores(0, &[0.0, 0.5]).unwrap();
        s.record_scores(0, &[0.0, 0.25]).unwrap();
        assert_eq!(s.history_len(0), 2);
        assert_eq!(s.window_average(e(0)), 0.0);
        assert_eq!(s.window_average(e(1)), (0.5 + 0.25) / 2.0);
    }

    #[test]
    fn empty_history_averages_zero() {
        let s = CacheState::new(2, 3, &cfg(2, 4, CachePolicy::ScoreWindow));
        assert_eq!(s.window_average(ExpertId::new(1, 2)), 0.0);
    }

    #[test]
    fn wrong_length_is_rejected() {
        let mut s = CacheState::new(1, 3, &cfg(2, 4, CachePolicy::ScoreWindow));
        assert!(matches!(s.record_scores(0, &[0.1]), Err(Error::VectorLength { .. })));
    }

    #[test]
    fn evicts_lowest_window_average() {
        let s = xyz(CachePolicy::ScoreWindow);
        assert!((s.window_average(e(0)) - 0.2).abs() < 1e-12);
        assert!((s.window_average(e(1)) - 0.02).abs() < 1e-12);
        assert!((s.window_average(e(2)) - 0.075).abs() < 1e-12);
        assert_eq!(s.evict_candidate(0).unwrap(), e(1));
    }

    #[test]
    fn shield_protects_and_unshield_restores() {
        let mut s = xyz(CachePolicy::ScoreWindow);
        s.shield([e(1)]);
        assert_eq!(s.evict_candidate(0).unwrap(), e(2));
        s.unshield_layer(0);
        assert_eq!(s.evict_candidate(0).unwrap(), e(1));
    }

    #[test]
    fn lru_evicts_least_recent() {
        let mut s = xyz(CachePolicy::Lru);
        s.touch(e(0), 5);
        s.touch(e(1), 9);
        s.touch(e(2), 7);
        assert_eq!(s.evict_candidate(0).unwrap(), e(0));
    }

    #[test]
    fn all_shielded_is_an_error() {
        let mut s = xyz(CachePolicy::ScoreWindow);
        s.shield([e(0), e(1), e(2)]);
        assert!(matches!(s.evict_candidate(0), Err(Error::NoEvictable { layer: 0 })));
        let before = s.clone();
        assert!(s.admit(e(3), 1).is_err());
        assert_eq!(s, before);
    }

    #[test]
    fn admit_below_and_at_capacity() {
        let mut s = CacheState::new(1, 4, &cfg(2, 4, CachePolicy::ScoreWindow));
        assert_eq!(s.admit(e(0), 0).unwrap(), None);
        assert_eq!(s.admit(e(1), 0).unwrap(), None);
        s.record_scores(0, &[0.5, 0.1, 0.0, 0.0]).unwrap();
        assert_eq!(s.admit(e(2), 1).unwrap(), Some(e(1)));
        assert_eq!(s.resident_count(0), 2);
        assert_eq!(s.last_access(e(2)), Some(1));
    }

    #[test]
    #[cfg_attr(debug_assertions, should_panic(expected = "admit of resident"))]
    fn admit_resident_is_flagged() {
        let mut s = CacheState::new(1, 4, &cfg(2, 4, CachePolicy::ScoreWindow));
        s.admit(e(0), 0).unwrap();
        assert!(matches!(s.admit(e(0), 1), Err(Error::AlreadyResident(_))));
    }

    #[test]
    fn zero_capacity_never_admits() {
        let mut s = CacheState::new(1, 4, &cfg(0, 4, CachePolicy::Lru));
        assert!(matches!(s.admit(e(0), 0), Err(Error::NoEvictable { .. })));
        assert_eq!(s.resident_count(0), 0);
    }

    #[test]
    fn prefix_fill() {
        let mut rng = crate::rng::stream(1, crate::rng::Stream::InitialFill);
        let s = CacheState::with_initial_fill(2, 8, &cfg(3, 4, CachePolicy::Lru), &mut rng);
        assert_eq!(s.mask(1), vec![true, true, true, false, false, false, false, false]);
    }

    #[test]
    fn random_fill_is_seeded() {
        let mut c = cfg(3, 4, CachePolicy::Lru);
        c.initial_fill = InitialFill::Random;
        let a = CacheState::with_initial_fill(2, 16, &c, &mut crate::rng::stream(1, crate::rng::Stream::InitialFill));
        let b = CacheState::with_initial_fill(2, 16, &c, &mut crate::rng::stream(1, crate::rng::Stream::InitialFill));
        assert_eq!(a, b);
        assert_eq!(a.resident_count(0), 3);
    }
}
