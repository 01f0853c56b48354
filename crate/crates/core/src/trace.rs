//! Gate-score traces: synthetic generation, JSON Lines I/O, reuse statistics.
//!
//! The generator keeps a small hot set per layer that survives each
//! iteration with probability `persistence`. Every token's score vector is a
//! two-tier Dirichlet draw: the hot tier shares `hot_mass`, the cold tier
//! shares the rest. Cold experts carry fixed per-layer popularity weights
//! (Zipf over a seeded permutation, exponent `popularity_skew`) scaled by
//! `concentration`; a high concentration flattens per-token noise so cold
//! actives sit close to beta.
//!
//! File format, one JSON object per line:
//!
//! ```text
//! {"L":4,"E":64,"k":6,"B":3}
//! {"it":0,"layer":0,"tok":0,"s":[...]}            // E scores
//! {"it":0,"layer":0,"tok":1,"s":[...],"pred":[...]} // optional prediction
//! ```
//!
//! Data lines are ordered by `(it, layer, tok)` with every combination present.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::config::{validate_shape, ModelShape, ValidationReport};
use crate::error::{Error, Result};
use crate::rng::{stream, SimRng, Stream};
use crate::router::{classify, top_k};

/// Sum tolerance for a gate vector.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub s: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred: Option<Vec<f64>>,
}

/// One decode iteration: `layers[layer][token]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub layers: Vec<Vec<TokenScores>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub shape: ModelShape,
    pub iterations: Vec<Iteration>,
}

impl GateTrace {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn scores(&self, it: usize, layer: usize) -> Vec<Vec<f64>> {
        self.iterations[it].layers[layer].iter().map(|t| t.s.clone()).collect()
    }

    /// Every score vector in `(it, layer, tok)` order.
    pub fn vectors(&self) -> impl Iterator<Item = &TokenScores> {
        self.iterations.iter().flat_map(|it| it.layers.iter().flatten())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewProfile {
    /// Fraction of a layer's experts that are hot, in (0, 1].
    pub hot_fraction: f64,
    /// Score mass the hot tier receives, in (0, 1].
    pub hot_mass: f64,
    /// Probability a hot expert is still hot next iteration.
    pub persistence: f64,
    /// Cold-tier Dirichlet concentration (per expert, times popularity).
    pub concentration: f64,
    /// Zipf exponent of the cold-tier popularity weights; 0 is uniform.
    #[serde(default)]
    pub popularity_skew: f64,
}

impl Default for SkewProfile {
    fn default() -> Self {
        Self {
            hot_fraction: 2.0 / 64.0,
            hot_mass: 0.5,
            persistence: 0.95,
            concentration: 16.0,
            popularity_skew: 0.1,
        }
    }
}

impl SkewProfile {
    /// Every expert exchangeable, scores i.i.d. uniform Dirichlet.
    pub fn exchangeable() -> Self {
        Self {
            hot_fraction: 1.0,
            hot_mass: 1.0,
            persistence: 0.0,
            concentration: 1.0,
            popularity_skew: 0.0,
        }
    }

    pub fn hot_count(&self, experts: usize) -> usize {
        ((self.hot_fraction * experts as f64).round() as usize).clamp(1, experts)
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut check = |ok: bool, field: &str, rule: &str| {
            if !ok {
                report.violations.push(crate::config::Violation {
                    field: field.to_string(),
                    rule: rule.to_string(),
                });
            }
        };
        check(
            self.hot_fraction > 0.0 && self.hot_fraction <= 1.0,
            "profile.hot_fraction",
            "hot_fraction in (0, 1] required",
        );
        check(
            self.hot_mass > 0.0 && self.hot_mass <= 1.0,
            "profile.hot_mass",
            "hot_mass in (0, 1] required",
        );
        check(
            (0.0..=1.0).contains(&self.persistence),
            "profile.persistence",
            "persistence in [0, 1] required",
        );
        check(
            self.concentration.is_finite() && self.concentration > 0.0,
            "profile.concentration",
            "concentration > 0 required",
        );
        check(
            self.popularity_skew.is_finite() && self.popularity_skew >= 0.0,
            "profile.popularity_skew",
            "popularity_skew ≥ 0 required",
        );
        report
    }
}

/// Symmetric-or-weighted Dirichlet draw scaled to `mass`, via normalized
/// Gamma variates.
fn dirichlet_into(rng: &mut SimRng, shapes: &[f64], mass: f64, out: &mut [f64]) {
    let mut total = 0.0;
    for (o, &a) in out.iter_mut().zip(shapes) {
        let g = Gamma::new(a, 1.0).expect("positive shape").sample(rng);
        *o = g;
        total += g;
    }
    if total > 0.0 && total.is_finite() {
        for o in out.iter_mut() {
            *o *= mass / total;
        }
    } else {
        let each = mass / out.len() as f64;
        out.iter_mut().for_each(|o| *o = each);
    }
}

struct LayerGen {
    hot: Vec<usize>,
    popularity: Vec<f64>,
}

pub fn generate_trace(shape: ModelShape, profile: &SkewProfile, iterations: usize, seed: u64) -> Result<GateTrace> {
    let mut report = profile.validate();
    validate_shape(&shape, &mut report);
    report.into_result()?;

    let experts = shape.experts_per_layer;
    let h = profile.hot_count(experts);
    let mut rng = stream(seed, Stream::Trace);

    let mut layers: Vec<LayerGen> = (0..shape.num_layers)
        .map(|_| {
            let mut perm: Vec<usize> = (0..experts).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let mut popularity = vec![0.0; experts];
            for (rank, &e) in perm.iter().enumerate() {
                popularity[e] = 1.0 / ((rank + 1) as f64).powf(profile.popularity_skew);
            }
            let hot = rand::seq::index::sample(&mut rng, experts, h).into_vec();
            LayerGen { hot, popularity }
        })
        .collect();

    let mut hot_buf = vec![0.0; h];
    let mut cold_buf = vec![0.0; experts - h];
    let hot_shapes = vec![1.0; h];

    let mut out = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut iter_layers = Vec::with_capacity(shape.num_layers);
        for lg in layers.iter_mut() {
            if it > 0 {
                evolve_hot_set(&mut lg.hot, experts, profile.persistence, &mut rng);
            }
            let mut is_hot = vec![false; experts];
            for &e in &lg.hot {
                is_hot[e] = true;
            }
            let cold: Vec<usize> = (0..experts).filter(|&e| !is_hot[e]).collect();
            let cold_shapes: Vec<f64> = if cold.is_empty() {
                Vec::new()
            } else {
                let total: f64 = cold.iter().map(|&e| lg.popularity[e]).sum();
                cold.iter()
                    .map(|&e| profile.concentration * lg.popularity[e] * cold.len() as f64 / total)
                    .collect()
            };
            let cold_mass = if cold.is_empty() { 0.0 } else { 1.0 - profile.hot_mass };
            let hot_mass = 1.0 - cold_mass;

            let mut tokens = Vec::with_capacity(shape.batch_size);
            for _ in 0..shape.batch_size {
                let mut s = vec![0.0; experts];
                dirichlet_into(&mut rng, &hot_shapes, hot_mass, &mut hot_buf);
                for (&e, &v) in lg.hot.iter().zip(&hot_buf) {
                    s[e] = v;
                }
                if !cold.is_empty() {
                    dirichlet_into(&mut rng, &cold_shapes, cold_mass, &mut cold_buf);
                    for (&e, &v) in cold.iter().zip(&cold_buf) {
                        s[e] = v;
                    }
                }
                tokens.push(TokenScores { s, pred: None });
            }
            iter_layers.push(tokens);
        }
        out.push(Iteration { layers: iter_layers });
    }
    Ok(GateTrace { shape, iterations: out })
}

fn evolve_hot_set(hot: &mut [usize], experts: usize, persistence: f64, rng: &mut SimRng) {
    if hot.len() == experts {
        return;
    }
    let mut is_hot = vec![false; experts];
    for &e in hot.iter() {
        is_hot[e] = true;
    }
    for slot in hot.iter_mut() {
        if rng.random::<f64>() < persistence {
            continue;
        }
        let candidates: Vec<usize> = (0..experts).filter(|&e| !is_hot[e]).collect();
        let next = candidates[rng.random_range(0..candidates.len())];
        is_hot[*slot] = false;
        is_hot[next] = true;
        *slot = next;
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(rename = "L")]
    layers: usize,
    #[serde(rename = "E")]
    experts: usize,
    k: usize,
    #[serde(rename = "B")]
    batch: usize,
}

#[derive(Serialize)]
struct LineOut<'a> {
    it: u64,
    layer: u32,
    tok: u32,
    s: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    pred: Option<&'a [f64]>,
}

#[derive(Deserialize)]
struct LineIn {
    it: u64,
    layer: u32,
    tok: u32,
    s: Vec<f64>,
    #[serde(default)]
    pred: Option<Vec<f64>>,
}

pub fn write_trace<W: Write>(trace: &GateTrace, mut w: W) -> std::io::Result<()> {
    let sh = &trace.shape;
    let header = Header {
        layers: sh.num_layers,
        experts: sh.experts_per_layer,
        k: sh.top_k,
        batch: sh.batch_size,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (it, iteration) in trace.iterations.iter().enumerate() {
        for (layer, tokens) in iteration.layers.iter().enumerate() {
            for (tok, t) in tokens.iter().enumerate() {
                let line = LineOut {
                    it: it as u64,
                    layer: layer as u32,
                    tok: tok as u32,
                    s: &t.s,
                    pred: t.pred.as_deref(),
                };
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n")?;
            }
        }
    }
    w.flush()
}

pub fn to_jsonl_bytes(trace: &GateTrace) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn save_trace(trace: &GateTrace, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(trace, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_trace(path: &Path) -> Result<GateTrace> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(BufReader::new(file), path)
}

fn check_vector(v: &[f64], experts: usize) -> std::result::Result<(), String> {
    if v.len() != experts {
        return Err(format!("expected {experts} scores, found {}", v.len()));
    }
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !x.is_finite() || **x < 0.0) {
        return Err(format!("score {i} is {x}; scores must be finite and ≥ 0"));
    }
    let sum: f64 = v.iter().sum();
    if sum > 1.0 + MASS_TOLERANCE {
        return Err(format!("scores sum to {sum}, above 1"));
    }
    Ok(())
}

/// Parses a JSON Lines trace. Line numbers in errors are 1-based, the header
/// being line 1. `origin` only labels errors.
pub fn read_trace<R: BufRead>(reader: R, origin: &Path) -> Result<GateTrace> {
    let fail = |line: usize, field: &str, message: String| Error::TraceFormat {
        path: origin.to_path_buf(),
        line,
        field: field.to_string(),
        message,
    };

    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hline, header) = match lines.next() {
        Some((n, Ok(text))) => (n, text),
        Some((n, Err(e))) => return Err(fail(n, "header", e.to_string())),
        None => return Err(fail(1, "header", "empty file".to_string())),
    };
    let header: Header = serde_json::from_str(&header).map_err(|e| fail(hline, "header", e.to_string()))?;
    let shape = ModelShape::new(header.layers, header.experts, header.k, header.batch);
    let mut report = ValidationReport::default();
    validate_shape(&shape, &mut report);
    if !report.is_ok() {
        return Err(fail(hline, "header", report.to_string()));
    }

    let per_iter = shape.num_layers * shape.batch_size;
    let mut records: Vec<TokenScores> = Vec::new();
    for (n, text) in lines {
        let text = text.map_err(|e| fail(n, "line", e.to_string()))?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: LineIn = serde_json::from_str(&text).map_err(|e| fail(n, "line", e.to_string()))?;

        let idx = records.len();
        let expected = (
            (idx / per_iter) as u64,
            ((idx / shape.batch_size) % shape.num_layers) as u32,
            (idx % shape.batch_size) as u32,
        );
        for (field, got, want) in [
            ("it", rec.it, expected.0),
            ("layer", rec.layer as u64, expected.1 as u64),
            ("tok", rec.tok as u64, expected.2 as u64),
        ] {
            if got != want {
                return Err(fail(
                    n,
                    field,
                    format!("expected {want}, found {got} (lines must be ordered by it, layer, tok)"),
                ));
            }
        }
        check_vector(&rec.s, shape.experts_per_layer).map_err(|m| fail(n, "s", m))?;
        if let Some(p) = &rec.pred {
            check_vector(p, shape.experts_per_layer).map_err(|m| fail(n, "pred", m))?;
        }
        records.push(TokenScores {
            s: rec.s,
            pred: rec.pred,
        });
    }
    if !records.len().is_multiple_of(per_iter) {
        return Err(fail(
            records.len() + 1,
            "it",
            format!(
                "trace ends mid-iteration ({} of {per_iter} lines)",
                records.len() % per_iter
            ),
        ));
    }

    let mut iterations = Vec::with_capacity(records.len() / per_iter);
    let mut it = records.into_iter();
    while it.len() > 0 {
        let layers = (0..shape.num_layers)
            .map(|_| it.by_ref().take(shape.batch_size).collect())
            .collect();
        iterations.push(Iteration { layers });
    }
    Ok(GateTrace { shape, iterations })
}

/// `curve[r]`: probability that the rank-`r` expert of a (layer, token) in
/// iteration `i` is among that (layer, token)'s actives in iteration `i + 1`.
pub fn reuse_curve(trace: &GateTrace) -> Result<Vec<f64>> {
    if trace.len() < 2 {
        return Err(Error::NeedsTwoIterations(trace.len()));
    }
    let sh = &trace.shape;
    let experts = sh.experts_per_layer;
    let mut hits = vec![0u64; experts];
    let mut pairs = 0u64;
    for w in trace.iterations.windows(2) {
        for layer in 0..sh.num_layers {
            for tok in 0..sh.batch_size {
                let now = &w[0].layers[layer][tok].s;
                let next = &w[1].layers[layer][tok].s;
                let mut active = vec![false; experts];
                for e in top_k(next, sh.top_k) {
                    active[e] = true;
                }
                for (r, e) in crate::router::rank_desc(now).into_iter().enumerate() {
                    if active[e] {
                        hits[r] += 1;
                    }
                }
                pairs += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / pairs as f64).collect())
}

/// Score-skew statistics of a trace at a given alpha.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewSummary {
    pub vectors: usize,
    pub alpha: f64,
    /// Mean number of top-score actives per vector.
    pub mean_top_score: f64,
    /// Mean number of low-score actives per vector.
    pub mean_low_score: f64,
    /// Fraction of vectors with at least one top-score and one low-score active.
    pub both_classes_fraction: f64,
    /// Mean score at each rank (descending).
    pub mean_rank_scores: Vec<f64>,
    pub reuse_rank_first: Option<f64>,
    pub reuse_rank_last: Option<f64>,
}

pub fn skew_summary(trace: &GateTrace, alpha: f64) -> Result<SkewSummary> {
    let sh = &trace.shape;
    let mut n = 0usize;
    let (mut top, mut low, mut both) = (0usize, 0usize, 0usize);
    let mut rank_sum = vec![0.0; sh.experts_per_layer];
    for v in trace.vectors() {
        let c = classify(&v.s, sh.top_k, alpha)?;
        top += c.top_score.len();
        low += c.low_score.len();
        if !c.top_score.is_empty() && !c.low_score.is_empty() {
            both += 1;
        }
        let mut sorted = v.s.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        for (acc, x) in rank_sum.iter_mut().zip(sorted) {
            *acc += x;
        }
        n += 1;
    }
    let denom = n.max(1) as f64;
    let reuse = reuse_curve(trace).ok();
    Ok(SkewSummary {
        vectors: n,
        alpha,
        mean_top_score: top as f64 / denom,
        mean_low_score: low as f64 / denom,
        both_classes_fraction: both as f64 / denom,
        mean_rank_scores: rank_sum.into_iter().map(|s| s / denom).collect(),
        reuse_rank_first: reuse.as_ref().map(|r| r[0]),
        reuse_rank_last: reuse.as_ref().map(|r| r[r.len() - 1]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn small() -> ModelShape {
        ModelShape::new(2, 8, 2, 2)
    }

    #[test]
    fn zero_iterations_is_empty_and_valid() {
        let t = generate_trace(small(), &SkewProfile::default(), 0, 1).unwrap();
        assert!(t.is_empty());
        let back = read_trace(Cursor::new(to_jsonl_bytes(&t)), Path::new("mem")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn vectors_are_valid_gate_outputs() {
        let t = generate_trace(ModelShape::default(), &SkewProfile::default(), 50, 3).unwrap();
        for v in t.vectors() {
            assert_eq!(v.s.len(), 64);
            assert!(v.s.iter().all(|&x| x >= 0.0));
            assert!(v.s.iter().sum::<f64>() <= 1.0 + MASS_TOLERANCE);
        }
    }

    #[test]
    fn single_persistent_hot_expert_is_always_top1() {
        let shape = ModelShape::new(3, 16, 2, 2);
        let profile = SkewProfile {
            hot_fraction: 1.0 / 16.0,
            persistence: 1.0,
            ..SkewProfile::default()
        };
        let t = generate_trace(shape, &profile, 200, 11).unwrap();
        for layer in 0..3 {
            let first = top_k(&t.iterations[0].layers[layer][0].s, 1)[0];
            for it in &t.iterations {
                for tok in &it.layers[layer] {
                    assert_eq!(top_k(&tok.s, 1)[0], first);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_trace(small(), &SkewProfile::default(), 20, 7).unwrap();
        let b = generate_trace(small(), &SkewProfile::default(), 20, 7).unwrap();
        let c = generate_trace(small(), &SkewProfile::default(), 20, 8).unwrap();
        assert_eq!(to_jsonl_bytes(&a), to_jsonl_bytes(&b));
        assert_ne!(to_jsonl_bytes(&a), to_jsonl_bytes(&c));
    }

    #[test]
    fn invalid_profile_is_rejected() {
        let p = SkewProfile {
            hot_fraction: 0.0,
            ..SkewProfile::default()
        };
        assert!(matches!(generate_trace(small(), &p, 1, 1), Err(Error::Config(_))));
    }

    fn bad_length_trace() -> String {
        let t = generate_trace(ModelShape::new(1, 4, 2, 2), &SkewProfile::default(), 2, 1).unwrap();
        let text = String::from_utf8(to_jsonl_bytes(&t)).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        // Line 3 is iteration 0, token 1.
        lines[2] = r#"{"it":0,"layer":0,"tok":1,"s":[0.5,0.25,0.25]}"#.to_string();
        lines.join("\n")
    }

    #[test]
    fn short_vector_cites_its_line() {
        let err = read_trace(Cursor::new(bad_length_trace()), Path::new("t.jsonl")).unwrap_err();
        match err {
            Error::TraceFormat { line, field, .. } => {
                assert_eq!(line, 3);
                assert_eq!(field, "s");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn negative_score_and_bad_json_are_reported() {
        let text = "{\"L\":1,\"E\":3,\"k\":1,\"B\":1}\n{\"it\":0,\"layer\":0,\"tok\":0,\"s\":[0.5,-0.1,0.1]}\n";
        let err = read_trace(Cursor::new(text), Path::new("x")).unwrap_err();
        assert!(
            matches!(err, Error::TraceFormat { line: 2, ref field, .. } if field == "s"),
            "{err}"
        );

        let text = "{\"L\":1,\"E\":3,\"k\":1,\"B\":1}\nnot json\n";
        let err = read_trace(Cursor::new(text), Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::TraceFormat { line: 2, .. }));

        let text =
            "{\"L\":1,\"E\":3,\"k\":1,\"B\":1}\n{\"it\":0,\"layer\":0,\"tok\":0,\"s\":[0.5,0.1,0.1],\"pred\":[1.0]}\n";
        let err = read_trace(Cursor::new(text), Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::TraceFormat { line: 2, ref field, .. } if field == "pred"));
    }

    #[test]
    fn out_of_order_lines_are_rejected() {
        let text = "{\"L\":1,\"E\":3,\"k\":1,\"B\":2}\n{\"it\":0,\"layer\":0,\"tok\":1,\"s\":[0.5,0.1,0.1]}\n";
        let err = read_trace(Cursor::new(text), Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::TraceFormat { line: 2, ref field, .. } if field == "tok"));
    }

    #[test]
    fn optional_predictions_round_trip() {
        let mut t = generate_trace(small(), &SkewProfile::default(), 3, 2).unwrap();
        t.iterations[1].layers[0][1].pred = Some(vec![0.125; 8]);
        let back = read_trace(Cursor::new(to_jsonl_bytes(&t)), Path::new("mem")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn reuse_needs_two_iterations() {
        let t = generate_trace(small(), &SkewProfile::default(), 1, 1).unwrap();
        assert!(matches!(reuse_curve(&t), Err(Error::NeedsTwoIterations(1))));
    }

    #[test]
    fn reuse_of_persistent_top1_is_one() {
        let profile = SkewProfile {
            hot_fraction: 1.0 / 16.0,
            persistence: 1.0,
            ..SkewProfile::default()
        };
        let t = generate_trace(ModelShape::new(2, 16, 3, 2), &profile, 100, 5).unwrap();
        assert_eq!(reuse_curve(&t).unwrap()[0], 1.0);
    }
}
