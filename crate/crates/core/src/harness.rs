//! Expressiveness fixtures and the scaling benchmark.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::encoder::{build_walk_features, encode_rwf, walk_feature_width, RwfWeights};
use crate::error::{GmnError, Result};
use crate::generators;
use crate::graph::{are_isomorphic, bfs_distances, wl_indistinguishable, Graph};
use crate::model::{GmnModel, ModelDims, PreparedGraph};
use crate::tensor::Matrix;
use crate::tokenizer::{derive_seed, graph_params, tokenize_graph};

/// Seeded, untrained walk encoder used for structural signatures.
#[derive(Clone, Debug)]
pub struct SignatureEncoder {
    pub weights: RwfWeights,
    pub window: usize,
    /// Longest walk length enumerated.
    pub m: usize,
}

impl SignatureEncoder {
    pub fn new(node_dim: usize, edge_dim: usize, window: usize, m: usize, d: usize, seed: u64) -> Self {
        let rows = window * walk_feature_width(node_dim, edge_dim, window);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5196]));
        let bound = 1.0 / (rows as f64).sqrt();
        let mut draw = |r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect())
                .expect("sized buffer")
        };
        let kernel = draw(rows, d);
        let bias = draw(1, d);
        SignatureEncoder {
            weights: RwfWeights { kernel, bias },
            window,
            m,
        }
    }

    /// Expected walk tokens of node `v` for lengths `0..=m`, concatenated.
    ///
    /// A token pools per-walk encodings with equal weight, so its mean over
    /// walk draws is the probability-weighted sum over single walks, which is
    /// enumerated exactly here.
    pub fn node_signature(&self, g: &Graph, v: usize) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for length in 0..=self.m {
            let mut acc = vec![0.0; self.weights.kernel.cols];
            let mut stack: Vec<(Vec<usize>, f64)> = vec![(vec![v], 1.0)];
            while let Some((walk, p)) = stack.pop() {
                if walk.len() == length + 1 {
                    let wf = build_walk_features(g, &walk, self.window)?;
                    let enc = encode_rwf(std::slice::from_ref(&wf), &self.weights)?;
                    for (a, e) in acc.iter_mut().zip(enc) {
                        *a += p * e;
                    }
                    continue;
                }
                let last = *walk.last().expect("non-empty walk");
                let nb = g.neighbors(last);
                if nb.is_empty() {
                    let mut next = walk.clone();
                    next.push(last);
                    stack.push((next, p));
                } else {
                    let q = p / nb.len() as f64;
                    for &u in nb {
                        let mut next = walk.clone();
                        next.push(u);
                        stack.push((next, q));
                    }
                }
            }
            out.extend(acc);
        }
        Ok(out)
    }

    /// Multiset of node signatures, in canonical order.
    pub fn graph_signature(&self, g: &Graph) -> Result<Vec<Vec<f64>>> {
        let sigs = (0..g.num_nodes())
            .map(|v| self.node_signature(g, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(canonical_multiset(sigs))
    }
}

fn quantize(x: f64) -> i64 {
    (x * 1e9).round() as i64
}

/// Sorts vectors by a rounded key so roundoff cannot reorder equal entries.
pub fn canonical_multiset(mut vs: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    vs.sort_by_cached_key(|v| v.iter().map(|&x| quantize(x)).collect::<Vec<_>>());
    vs
}

/// Largest coordinate difference between two canonical multisets;
/// infinite when their sizes differ.
pub fn multiset_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut gap: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return f64::INFINITY;
        }
        for (p, q) in x.iter().zip(y) {
            gap = gap.max((p - q).abs());
        }
    }
    gap
}

/// Number of nodes at each hop distance from `anchor`.
pub fn distance_profile(g: &Graph, anchor: usize) -> Vec<usize> {
    let mut counts = Vec::new();
    for d in bfs_distances(g, anchor).into_iter().flatten() {
        if counts.len() <= d {
            counts.resize(d + 1, 0);
        }
        counts[d] += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fixture {
    /// K3,3 against the triangular prism.
    A,
    /// Two graphs with equal distance profiles from an anchor.
    B,
    /// Triangle against the 3-node path.
    TriangleVsPath,
}

impl std::str::FromStr for Fixture {
    type Err = GmnError;

    fn from_str(s: &str) -> Result<Fixture> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Fixture::A),
            "b" => Ok(Fixture::B),
            "triangle" | "triangle-vs-path" | "c" => Ok(Fixture::TriangleVsPath),
            other => Err(GmnError::Config(format!("unknown fixture {other:?}"))),
        }
    }
}

/// Graph pair and anchor node for a fixture.
pub fn fixture_graphs(f: Fixture) -> (Graph, Graph, usize) {
    match f {
        Fixture::A => (
            generators::complete_bipartite(3, 3),
            generators::triangular_prism(),
            0,
        ),
        Fixture::B => {
            // Nodes A..E = 0..4.
            let c5 = Graph::new(5, &[(0, 1), (0, 2), (1, 3), (2, 4), (3, 4)]).expect("fixture");
            let other = Graph::new(5, &[(0, 1), (0, 2), (1, 3), (1, 4), (3, 4)]).expect("fixture");
            (c5, other, 0)
        }
        Fixture::TriangleVsPath => (generators::cycle(3), generators::path(3), 0),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WlReport {
    pub fixture: Fixture,
    pub wl_indistinguishable: bool,
    /// Distance profiles from the anchor coincide.
    pub distance_equal: bool,
    /// Gap between whole-graph token signature multisets.
    pub token_gap: f64,
    /// Gap between the anchors' token signatures.
    pub anchor_gap: f64,
    pub threshold: f64,
}

impl WlReport {
    pub fn tokens_distinguished(&self) -> bool {
        self.token_gap > self.threshold
    }

    /// The property the fixture exists to show.
    pub fn passed(&self) -> bool {
        match self.fixture {
            Fixture::A => self.wl_indistinguishable && self.tokens_distinguished(),
            Fixture::B => self.distance_equal && self.anchor_gap > self.threshold,
            Fixture::TriangleVsPath => !self.wl_indistinguishable,
        }
    }

    pub fn summary(&self) -> String {
        let wl = if self.wl_indistinguishable {
            "INDISTINGUISHABLE"
        } else {
            "DISTINGUISHED"
        };
        let tok = if self.tokens_distinguished() {
            "DISTINGUISHED"
        } else {
            "INDISTINGUISHABLE"
        };
        match self.fixture {
            Fixture::B => {
                let dist = if self.distance_equal { "EQUAL" } else { "DIFFERENT" };
                let anchor = if self.anchor_gap > self.threshold {
                    "DISTINGUISHED"
                } else {
                    "INDISTINGUISHABLE"
                };
                format!("distance signatures: {dist}; GMN anchor tokens: {anchor} (gap {:.3e})", self.anchor_gap)
            }
            Fixture::TriangleVsPath if !self.wl_indistinguishable => {
                format!("1-WL: {wl} (already separated by color refinement); GMN tokens: {tok}")
            }
            _ => format!("1-WL: {wl}; GMN tokens: {tok} (gap {:.3e})", self.token_gap),
        }
    }
}

pub const SIGNATURE_THRESHOLD: f64 = 1e-6;

/// Compares two graphs under 1-WL, anchor distance profiles and walk tokens.
pub fn compare_graphs(
    fixture: Fixture,
    a: &Graph,
    b: &Graph,
    anchor: usize,
    enc: &SignatureEncoder,
) -> Result<WlReport> {
    let rounds = a.num_nodes() + b.num_nodes();
    let token_gap = multiset_gap(&enc.graph_signature(a)?, &enc.graph_signature(b)?);
    let sa = enc.node_signature(a, anchor)?;
    let sb = enc.node_signature(b, anchor)?;
    let anchor_gap = sa
        .iter()
        .zip(&sb)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    Ok(WlReport {
        fixture,
        wl_indistinguishable: wl_indistinguishable(a, b, rounds)?,
        distance_equal: distance_profile(a, anchor) == distance_profile(b, anchor),
        token_gap,
        anchor_gap,
        threshold: SIGNATURE_THRESHOLD,
    })
}

/// Runs a built-in fixture, first checking that its graphs really differ.
pub fn wl_check(fixture: Fixture, seed: u64) -> Result<WlReport> {
    let (a, b, anchor) = fixture_graphs(fixture);
    if are_isomorphic(&a, &b) {
        return Err(GmnError::Contract(format!("fixture {fixture:?} graphs are isomorphic")));
    }
    let enc = SignatureEncoder::new(a.feature_dim(), 0, 3, 3, 8, seed);
    compare_graphs(fixture, &a, &b, anchor, &enc)
}

// ---------------------------------------------------------------------------
// Benchmark.

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub edges: usize,
    pub repeats: usize,
    pub min_seconds: f64,
    pub median_seconds: f64,
    /// Too small to say anything about asymptotics; left out of the fit.
    pub warmup: bool,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub degree: usize,
    pub repeats: usize,
    pub warmup_below: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            degree: 4,
            repeats: 5,
            warmup_below: 256,
            seed: 0,
        }
    }
}

/// Times tokenization plus one forward pass on random regular graphs.
pub fn bench(cfg: &TrainConfig, sizes: &[usize], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let dims = ModelDims {
        in_features: 1 + cfg.pe.dim(),
        edge_features: 0,
        outputs: 2,
    };
    let model = GmnModel::new(cfg.clone(), dims)?;
    let mut rows = Vec::new();
    for (i, &n) in sizes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[opts.seed, i as u64, n as u64]));
        let g = generators::random_regular(n, opts.degree, &mut rng)?;
        let params = graph_params(&cfg.tokenizer_params(), i);
        let run = || -> Result<f64> {
            let start = Instant::now();
            let tokens = tokenize_graph(&g, &params)?;
            let pg = PreparedGraph::new(&model, &g, &tokens)?;
            let out = model.predict(&pg)?;
            std::hint::black_box(out);
            Ok(start.elapsed().as_secs_f64())
        };
        run()?;
        let mut times = (0..opts.repeats.max(1)).map(|_| run()).collect::<Result<Vec<_>>>()?;
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            n,
            edges: g.num_edges(),
            repeats: times.len(),
            min_seconds: times[0],
            median_seconds: times[times.len() / 2],
            warmup: n < opts.warmup_below,
        });
    }
    Ok(rows)
}

/// `median(2n) / median(n)` for consecutive non-warmup rows that double.
pub fn doubling_ratios(rows: &[BenchRow]) -> Vec<(usize, f64)> {
    let kept: Vec<&BenchRow> = rows.iter().filter(|r| !r.warmup).collect();
    kept.windows(2)
        .filter(|w| w[1].n == 2 * w[0].n)
        .map(|w| (w[1].n, w[1].median_seconds / w[0].median_seconds))
        .collect()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("n,edges,repeats,min_seconds,median_seconds,warmup\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6e},{:.6e},{}\n",
            r.n, r.edges, r.repeats, r.min_seconds, r.median_seconds, r.warmup
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_a_separates_tokens_not_wl() {
        let r = wl_check(Fixture::A, 0).unwrap();
        assert!(r.wl_indistinguishable);
        assert!(r.token_gap > 1e-6, "{}", r.token_gap);
        assert_eq!(r.summary().split(" (").next().unwrap(), "1-WL: INDISTINGUISHABLE; GMN tokens: DISTINGUISHED");
        assert!(r.passed());
    }

    #[test]
    fn fixture_b_has_equal_distance_profiles() {
        let r = wl_check(Fixture::B, 0).unwrap();
        assert!(r.distance_equal);
        assert!(r.passed(), "{}", r.summary());
    }

    #[test]
    fn triangle_vs_path_is_already_separated() {
        let r = wl_check(Fixture::TriangleVsPath, 0).unwrap();
        assert!(!r.wl_indistinguishable);
        assert!(r.summary().contains("already separated"));
    }

    #[test]
    fn length_zero_signature_is_the_encoded_start() {
        let g = generators::cycle(4);
        let enc = SignatureEncoder::new(1, 0, 3, 0, 4, 1);
        let wf = build_walk_features(&g, &[2], 3).unwrap();
        let want = encode_rwf(&[wf], &enc.weights).unwrap();
        assert_eq!(enc.node_signature(&g, 2).unwrap(), want);
    }

    #[test]
    fn doubling_skips_warmup_rows() {
        let row = |n, t, warmup| BenchRow {
            n,
            edges: 2 * n,
            repeats: 1,
            min_seconds: t,
            median_seconds: t,
            warmup,
        };
        let rows = [row(64, 1.0, true), row(128, 1.0, false), row(256, 2.2, false), row(600, 9.0, false)];
        assert_eq!(doubling_ratios(&rows), vec![(256, 2.2)]);
    }
}
