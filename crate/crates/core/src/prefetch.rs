//! Top-score prefetching for the next layer.
//!
//! The simulator cannot run the partial forward pass that produces next-layer
//! scores, so prediction is a stochastic channel over the true next-layer
//! vector: with probability `p_top` the predicted top-1 is the true top-1
//! (a top-score expert); otherwise, with probability `p_active`, a random
//! low-score active takes its place, else a random inactive expert does. The
//! promoted expert swaps scores with the true top-1, so the prediction is a
//! permutation of the true vector. A trace-supplied prediction bypasses the
//! channel entirely.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExpertId, PredictorConfig};
use crate::error::Result;
use crate::rng::SimRng;
use crate::router::{classify, rank_desc};

/// Which true class the predicted top-1 belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadClass {
    TopScore,
    LowScoreActive,
    Inactive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f64>,
    pub head: usize,
    pub head_class: HeadClass,
}

fn head_class_of(head: usize, top: &[usize], actives: &[usize]) -> HeadClass {
    if top.contains(&head) {
        HeadClass::TopScore
    } else if actives.contains(&head) {
        HeadClass::LowScoreActive
    } else {
        HeadClass::Inactive
    }
}

/// Predicted score vector for one token of the next layer.
///
/// Exactly three uniform draws are taken from `rng` per call without a
/// supplied prediction, whichever branch fires, so predictor streams stay
/// aligned across runs that differ only in residency.
pub fn predict_scores(
    true_next: &[f64],
    supplied: Option<&[f64]>,
    cfg: &PredictorConfig,
    k: usize,
    alpha: f64,
    rng: &mut SimRng,
) -> Result<Prediction> {
    let class = classify(true_next, k, alpha)?;

    if let Some(pred) = supplied {
        let head = rank_desc(pred)[0];
        return Ok(Prediction {
            scores: pred.to_vec(),
            head,
            head_class: head_class_of(head, &class.top_score, &class.actives),
        });
    }

    let u: f64 = rng.random();
    let v: f64 = rng.random();
    let w: f64 = rng.random();
    let pick = |pool: &[usize]| pool[((w * pool.len() as f64) as usize).min(pool.len() - 1)];

    let true_top1 = class.actives[0];
    let (head, head_class) = if u < cfg.p_top && !class.top_score.is_empty() {
        (true_top1, HeadClass::TopScore)
    } else if v < cfg.p_active && !class.low_score.is_empty() {
        (pick(&class.low_score), HeadClass::LowScoreActive)
    } else {
        let inactive: Vec<usize> = (0..true_next.len()).filter(|e| !class.actives.contains(e)).collect();
        (pick(&inactive), HeadClass::Inactive)
    };

    let mut scores = true_next.to_vec();
    scores.swap(head, true_top1);
    Ok(Prediction {
        scores,
        head,
        head_class,
    })
}

/// Collapses per-token predictions into one layer-level vector: an expert
/// keeps its highest predicted score over the tokens that predict it as
/// top-score, and 0 otherwise.
pub fn batch_top_score_vector(predictions: &[Vec<f64>], k: usize, alpha: f64) -> Result<Vec<f64>> {
    let Some(first) = predictions.first() else {
        return Ok(Vec::new());
    };
    let mut out = vec![0.0f64; first.len()];
    for p in predictions {
        for e in classify(p, k, alpha)?.top_score {
            out[e] = out[e].max(p[e]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub expert: ExpertId,
    pub predicted: f64,
}

/// Load queue for one target layer, highest predicted score first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefetchQueue {
    pub target_layer: u32,
    pub entries: Vec<QueueEntry>,
    pub issued: Vec<ExpertId>,
}

impl PrefetchQueue {
    pub fn empty(target_layer: u32) -> Self {
        Self {
            target_layer,
            entries: Vec::new(),
            issued: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Dispatches the head entry to PCIe.
    pub fn issue_next(&mut self) -> Option<QueueEntry> {
        if self.entries.is_empty() {
            return None;
        }
        let entry = self.entries.remove(0);
        self.issued.push(entry.expert);
        Some(entry)
    }

    /// Drops every undispatched entry once `layer`'s gate output is known.
    /// Transfers already issued are unaffected. Returns how many were dropped.
    pub fn clear_on_gate(&mut self, layer: u32) -> usize {
        assert_eq!(
            layer, self.target_layer,
            "prefetch queue for layer {} cleared at layer {layer}",
            self.target_layer
        );
        let dropped = self.entries.len();
        self.entries.clear();
        dropped
    }
}

/// The `depth` highest predicted experts of `target_layer` that are not
/// resident. Experts with a non-positive predicted score are not candidates.
pub fn build_queue(target_layer: u32, predicted: &[f64], resident: &[bool], depth: usize) -> PrefetchQueue {
    let entries = rank_desc(predicted)
        .into_iter()
        .filter(|&e| predicted[e] > 0.0 && !resident[e])
        .take(depth)
        .map(|e| QueueEntry {
            expert: ExpertId::new(target_layer as usize, e),
            predicted: predicted[e],
        })
        .collect();
    PrefetchQueue {
        target_layer,
        entries,
        issued: Vec::new(),
    }
}
