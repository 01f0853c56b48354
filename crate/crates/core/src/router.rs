//! Expert-cache router.
//!
//! For every token the gate's top-k experts ("actives") are split around
//! beta, the (k+1)-th ranked score:
//!
//! ```text
//!   top-score   active,   score >= (1+alpha)*beta
//!   low-score   active,   beta <= score < (1+alpha)*beta
//!   alternative inactive, (1-alpha)*beta <= score < beta
//! ```
//!
//! Routing runs in two passes over the batch. Pass one keeps every token's
//! top-score experts and collects them into the batch-wide top-score set C.
//! Pass two replaces low-score actives that are neither GPU-resident nor in C
//! with alternatives that are resident or in C; when there are fewer such
//! alternatives than low-score experts to replace, the highest-scoring
//! low-score experts are kept and become pending (they must be loaded or
//! computed on the CPU).
//!
//! Ranking is always by score descending with ties broken by ascending
//! expert index.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::config::{ExpertId, RouterConfig};
use crate::error::{Error, Result};

/// Canonical order: score descending, then index ascending.
pub fn cmp_rank(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Expert indices in canonical rank order.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| cmp_rank(scores, a, b));
    order
}

/// The token's top-k expert indices in rank order.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order = rank_desc(scores);
    order.truncate(k);
    order
}

/// Band thresholds and memberships for one score vector. All index lists are
/// in rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub beta: f64,
    /// `(1+alpha)*beta`.
    pub top_threshold: f64,
    /// `beta`.
    pub low_threshold: f64,
    /// `(1-alpha)*beta`.
    pub alt_threshold: f64,
    pub actives: Vec<usize>,
    pub top_score: Vec<usize>,
    pub low_score: Vec<usize>,
    pub alt_band: Vec<usize>,
}

pub fn classify(scores: &[f64], k: usize, alpha: f64) -> Result<Classification> {
    let experts = scores.len();
    if experts <= k {
        return Err(Error::BetaUndefined {
            k,
            experts,
            needed: k + 1,
        });
    }
    let order = rank_desc(scores);
    let beta = scores[order[k]];
    let actives = order[..k].to_vec();

    // A zero beta leaves no band to substitute within.
    if beta <= 0.0 {
        return Ok(Classification {
            beta,
            top_threshold: beta,
            low_threshold: beta,
            alt_threshold: beta,
            top_score: actives.clone(),
            actives,
            low_score: Vec::new(),
            alt_band: Vec::new(),
        });
    }

    let top_threshold = (1.0 + alpha) * beta;
    let alt_threshold = (1.0 - alpha) * beta;
    let (top_score, low_score): (Vec<usize>, Vec<usize>) = actives.iter().partition(|&&e| scores[e] >= top_threshold);
    let alt_band = order[k..]
        .iter()
        .copied()
        .filter(|&e| scores[e] >= alt_threshold && scores[e] < beta)
        .collect();

    Ok(Classification {
        beta,
        top_threshold,
        low_threshold: beta,
        alt_threshold,
        actives,
        top_score,
        low_score,
        alt_band,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    /// Low-score active expert dropped from the token's selection.
    pub replaced: ExpertId,
    /// Inactive expert selected in its place.
    pub alternative: ExpertId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRoute {
    /// Exactly k experts, in this token's rank order.
    pub selected: Vec<ExpertId>,
    pub substitutions: Vec<Substitution>,
    /// Low-score experts kept although neither resident nor in C.
    pub pending: Vec<ExpertId>,
    /// Low-score experts that needed replacing (neither resident nor in C
    /// when routing started); `substitutions + pending` always equals this.
    pub replaceable: usize,
    pub classification: Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteResult {
    pub layer: u32,
    pub tokens: Vec<TokenRoute>,
    /// Union of every token's top-score experts (C), ascending.
    pub top_score_set: Vec<ExpertId>,
}

impl RouteResult {
    pub fn substitution_count(&self) -> usize {
        self.tokens.iter().map(|t| t.substitutions.len()).sum()
    }

    pub fn replaceable_count(&self) -> usize {
        self.tokens.iter().map(|t| t.replaceable).sum()
    }

    /// Distinct selected experts with the number of tokens each one serves.
    pub fn batch_sizes(&self) -> Vec<(ExpertId, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for tok in &self.tokens {
            for &e in &tok.selected {
                *counts.entry(e).or_insert(0usize) += 1;
            }
        }
        counts.into_iter().collect()
    }

    pub fn distinct_pending(&self) -> BTreeSet<ExpertId> {
        self.tokens.iter().flat_map(|t| t.pending.iter().copied()).collect()
    }
}

fn check_lengths(batch_scores: &[Vec<f64>], resident: &[bool]) -> Result<()> {
    for s in batch_scores {
        if s.len() != resident.len() {
            return Err(Error::VectorLength {
                expected: resident.len(),
                got: s.len(),
            });
        }
    }
    Ok(())
}

fn sort_selected(selected: &mut [ExpertId], scores: &[f64]) {
    selected.sort_by(|a, b| cmp_rank(scores, a.idx(), b.idx()));
}

/// Plain top-k routing (router stage disabled): every token keeps its actives.
pub fn route_top_k(layer: u32, batch_scores: &[Vec<f64>], resident: &[bool], k: usize) -> Result<RouteResult> {
    check_lengths(batch_scores, resident)?;
    let mut tokens = Vec::with_capacity(batch_scores.len());
    let mut c = BTreeSet::new();
    for scores in batch_scores {
        let class = classify(scores, k, 0.0)?;
        let selected: Vec<ExpertId> = class
            .actives
            .iter()
            .map(|&e| ExpertId::new(layer as usize, e))
            .collect();
        c.extend(selected.iter().copied());
        tokens.push(TokenRoute {
            selected,
            substitutions: Vec::new(),
            pending: Vec::new(),
            replaceable: 0,
            classification: class,
        });
    }
    Ok(RouteResult {
        layer,
        tokens,
        top_score_set: c.into_iter().collect(),
    })
}

/// Two-pass expert-cache routing for one layer of one iteration.
///
/// `resident[e]` tells whether expert `e` of `layer` is on the GPU.
pub fn route(
    layer: u32,
    batch_scores: &[Vec<f64>],
    resident: &[bool],
    k: usize,
    cfg: &RouterConfig,
) -> Result<RouteResult> {
    check_lengths(batch_scores, resident)?;
    let experts = resident.len();
    let id = |e: usize| ExpertId::new(layer as usize, e);

    // Pass 1: top-score experts of every token form C.
    let classes = batch_scores
        .iter()
        .map(|s| classify(s, k, cfg.alpha))
        .collect::<Result<Vec<_>>>()?;
    let mut in_c = vec![false; experts];
    for class in &classes {
        for &e in &class.top_score {
            in_c[e] = true;
        }
    }

    // Pass 2: per-token substitution.
    let mut tokens = Vec::with_capacity(classes.len());
    for (scores, class) in batch_scores.iter().zip(classes) {
        let available = |e: usize| resident[e] || in_c[e];
        let mut selected: Vec<ExpertId> = class.top_score.iter().map(|&e| id(e)).collect();

        let (retained, needy): (Vec<usize>, Vec<usize>) = class.low_score.iter().partition(|&&e| available(e));
        selected.extend(retained.iter().map(|&e| id(e)));

        let alternatives: Vec<usize> = class.alt_band.iter().copied().filter(|&e| available(e)).collect();
        let (kept, replaced, chosen) = if alternatives.len() >= needy.len() {
            (&needy[..0], &needy[..], &alternatives[..needy.len()])
        } else {
            let keep = needy.len() - alternatives.len();
            (&needy[..keep], &needy[keep..], &alternatives[..])
        };

        selected.extend(kept.iter().chain(chosen).map(|&e| id(e)));
        sort_selected(&mut selected, scores);
        debug_assert_eq!(selected.len(), k);

        let substitutions = replaced
            .iter()
            .zip(chosen)
            .map(|(&r, &a)| Substitution {
                replaced: id(r),
                alternative: id(a),
            })
            .collect();

        tokens.push(TokenRoute {
            selected,
            substitutions,
            pending: kept.iter().map(|&e| id(e)).collect(),
            replaceable: needy.len(),
            classification: class,
        });
    }

    let top_score_set = (0..experts).filter(|&e| in_c[e]).map(id).collect();
    Ok(RouteResult {
        layer,
        tokens,
        top_score_set,
    })
}

/// Re-chooses alternatives so that fewer distinct non-resident experts serve
/// the batch.
///
/// A pending low-score expert that no other token selects is swapped for an
/// alternative from the same token's band that another token already
/// selects. Each swap removes one distinct non-resident expert, so the loop
/// terminates; candidates are ranked by batch size, then by the token's
/// score order.
pub fn coalesce_for_batching(mut result: RouteResult, resident: &[bool]) -> RouteResult {
    let experts = resident.len();
    loop {
        let mut batch = vec![0usize; experts];
        for tok in &result.tokens {
            for e in &tok.selected {
                batch[e.idx()] += 1;
            }
        }

        let mut moved = false;
        'tokens: for tok in result.tokens.iter_mut() {
            // Lowest-scoring pending expert first.
            for p in (0..tok.pending.len()).rev() {
                let x = tok.pending[p];
                if resident[x.idx()] || batch[x.idx()] != 1 {
                    continue;
                }
                let best = tok
                    .classification
                    .alt_band
                    .iter()
                    .enumerate()
                    .filter(|&(_, &y)| batch[y] >= 1 && !tok.selected.iter().any(|s| s.idx() == y))
                    .max_by(|&(ra, &a), &(rb, &b)| batch[a].cmp(&batch[b]).then(rb.cmp(&ra)));
                let Some((_, &y)) = best else { continue };

                let y_id = ExpertId::new(x.layer as usize, y);
                let slot = tok.selected.iter().position(|&s| s == x).expect("pending is selected");
                tok.selected[slot] = y_id;
                let order = &tok.classification;
                // Restore rank order: alternatives always rank below actives.
                let rank_of = |e: ExpertId| -> usize {
                    order.actives.iter().position(|&a| a == e.idx()).unwrap_or_else(|| {
                        order.actives.len() + order.alt_band.iter().position(|&a| a == e.idx()).unwrap_or(experts)
                    })
                };
                tok.selected.sort_by_key(|&e| rank_of(e));
                tok.pending.remove(p);
                tok.substitutions.push(Substitution {
                    replaced: x,
                    alternative: y_id,
                });
                moved = true;
                break 'tokens;
            }
        }
        if !moved {
            return result;
        }
    }
}
