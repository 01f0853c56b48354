//! Independent evaluator of the routing band rules, shared by test targets.

/// Rank position of every expert: higher score first, lower index on ties.
fn positions(s: &[f64]) -> Vec<usize> {
    (0..s.len())
        .map(|e| (0..s.len()).filter(|&j| s[j] > s[e] || (s[j] == s[e] && j < e)).count())
        .collect()
}

fn by_rank(s: &[f64], mut v: Vec<usize>) -> Vec<usize> {
    let pos = positions(s);
    v.sort_by_key(|&e| pos[e]);
    v
}

pub struct Expected {
    pub selected: Vec<usize>,
    pub pending: Vec<usize>,
    pub substitutions: Vec<(usize, usize)>,
    pub replaceable: usize,
}

pub fn route_oracle(batch: &[Vec<f64>], resident: &[bool], k: usize, alpha: f64) -> Vec<Expected> {
    let experts = resident.len();
    let bands: Vec<_> = batch
        .iter()
        .map(|s| {
            let pos = positions(s);
            let beta = s[(0..experts).find(|&e| pos[e] == k).unwrap()];
            let active: Vec<usize> = by_rank(s, (0..experts).filter(|&e| pos[e] < k).collect());
            if beta <= 0.0 {
                return (active, Vec::new(), Vec::new());
            }
            let top: Vec<usize> = active
                .iter()
                .copied()
                .filter(|&e| s[e] >= (1.0 + alpha) * beta)
                .collect();
            let low: Vec<usize> = active
                .iter()
                .copied()
                .filter(|&e| s[e] < (1.0 + alpha) * beta)
                .collect();
            let alt: Vec<usize> = by_rank(
                s,
                (0..experts)
                    .filter(|&e| pos[e] >= k && s[e] < beta && s[e] >= (1.0 - alpha) * beta)
                    .collect(),
            );
            (top, low, alt)
        })
        .collect();
    let c: Vec<usize> = bands.iter().flat_map(|b| b.0.iter().copied()).collect();
    let ok = |e: usize| resident[e] || c.contains(&e);

    batch
        .iter()
        .zip(&bands)
        .map(|(s, (top, low, alt))| {
            let b: Vec<usize> = low.iter().copied().filter(|&e| !ok(e)).collect();
            let a: Vec<usize> = alt.iter().copied().filter(|&e| ok(e)).collect();
            let mut selected: Vec<usize> = top.iter().chain(low.iter().filter(|&&e| ok(e))).copied().collect();
            let (pending, substitutions) = if a.len() >= b.len() {
                selected.extend(&a[..b.len()]);
                (vec![], b.iter().copied().zip(a.iter().copied()).collect())
            } else {
                let keep = b.len() - a.len();
                selected.extend(&b[..keep]);
                selected.extend(&a);
                (
                    b[..keep].to_vec(),
                    b[keep..].iter().copied().zip(a.iter().copied()).collect(),
                )
            };
            Expected {
                selected: by_rank(s, selected),
                pending,
                substitutions,
                replaceable: b.len(),
            }
        })
        .collect()
}
