//! Random-walk neighborhood sampling and token ordering.
//!
//! For a node `v`, a sample of length `ℓ` is the union of the nodes visited
//! by `M` independent simple random walks of `ℓ` steps from `v`. A node's
//! token set holds one length-0 sample plus `s` repeats for every length
//! `1..=m`; the model consumes them longest-first with the length-0 token
//! last.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GmnError, Result};
use crate::graph::{Graph, NodeOrdering};

const SHUFFLE_TAG: u64 = 0x5348_5546_464c_4521;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds the parts into one seed with chained SplitMix64 rounds. Stable
/// across platforms and releases.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6a09_e667_f3bc_c908, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Seed used for the walks of `(v, length, repeat)`.
pub fn walk_seed(global: u64, v: usize, length: usize, repeat: usize) -> u64 {
    derive_seed(&[global, v as u64, length as u64, repeat as u64])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkSample {
    pub origin: usize,
    pub length: usize,
    pub repeat: usize,
    /// Sorted union of all visited nodes.
    pub visited: Vec<usize>,
    /// The raw walks, each `length + 1` nodes long.
    pub walks: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    ReverseHierarchy,
    NodeOnly,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequenceSpec {
    pub origin: usize,
    pub tokens: Vec<WalkSample>,
    pub order_mode: OrderMode,
}

impl TokenSequenceSpec {
    /// Checks the ordering contract: lengths non-increasing, exactly one
    /// length-0 token and it sits last.
    pub fn validate(&self) -> Result<()> {
        let last = self
            .tokens
            .last()
            .ok_or_else(|| GmnError::TokenOrder(format!("node {}: empty sequence", self.origin)))?;
        if last.length != 0 {
            return Err(GmnError::TokenOrder(format!(
                "node {}: final token has length {}, expected the length-0 token",
                self.origin, last.length
            )));
        }
        if self.tokens.iter().filter(|t| t.length == 0).count() != 1 {
            return Err(GmnError::TokenOrder(format!(
                "node {}: expected exactly one length-0 token",
                self.origin
            )));
        }
        if self.tokens.windows(2).any(|w| w[0].length < w[1].length) {
            return Err(GmnError::TokenOrder(format!(
                "node {}: walk lengths must be non-increasing",
                self.origin
            )));
        }
        if let Some(t) = self.tokens.iter().find(|t| t.origin != self.origin) {
            return Err(GmnError::TokenOrder(format!(
                "token with origin {} inside the sequence of node {}",
                t.origin, self.origin
            )));
        }
        Ok(())
    }
}

/// `num_walks` simple random walks of exactly `length` steps from `v`.
///
/// A walk that reaches a node without neighbors stays there for the
/// remaining steps.
pub fn sample_walks(
    g: &Graph,
    v: usize,
    length: usize,
    num_walks: usize,
    seed: u64,
) -> WalkSample {
    assert!(v < g.num_nodes(), "origin {v} out of range");
    assert!(num_walks >= 1, "need at least one walk");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut walks = Vec::with_capacity(num_walks);
    let mut visited = vec![v];
    for _ in 0..num_walks {
        let mut walk = Vec::with_capacity(length + 1);
        let mut cur = v;
        walk.push(cur);
        for _ in 0..length {
            let nb = g.neighbors(cur);
            if !nb.is_empty() {
                cur = nb[rng.gen_range(0..nb.len())];
            }
            walk.push(cur);
        }
        visited.extend_from_slice(&walk[1..]);
        walks.push(walk);
    }
    visited.sort_unstable();
    visited.dedup();
    WalkSample {
        origin: v,
        length,
        repeat: 0,
        visited,
        walks,
    }
}

/// `s·m + 1` samples: the length-0 sample, then `s` repeats of each length
/// `1..=m`, in generation order.
pub fn build_token_sets(
    g: &Graph,
    v: usize,
    num_walks: usize,
    m: usize,
    s: usize,
    seed: u64,
) -> Result<Vec<WalkSample>> {
    if m == 0 {
        return Err(GmnError::Config(
            "subgraph tokens need m >= 1; m = 0 uses node tokens".into(),
        ));
    }
    if s == 0 {
        return Err(GmnError::Config("s = 0 is undefined when m >= 1".into()));
    }
    if num_walks == 0 {
        return Err(GmnError::Config("M must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(s * m + 1);
    let mut zero = sample_walks(g, v, 0, num_walks, walk_seed(seed, v, 0, 1));
    zero.repeat = 1;
    out.push(zero);
    for length in 1..=m {
        for repeat in 1..=s {
            let mut sample = sample_walks(g, v, length, num_walks, walk_seed(seed, v, length, repeat));
            sample.repeat = repeat;
            out.push(sample);
        }
    }
    Ok(out)
}

/// Longest walks first, the length-0 token last; equal-length blocks are
/// shuffled with a permutation seeded from `(seed, origin, length)`.
pub fn order_tokens(mut samples: Vec<WalkSample>, seed: u64) -> Result<TokenSequenceSpec> {
    let origin = samples
        .first()
        .map(|t| t.origin)
        .ok_or_else(|| GmnError::TokenOrder("no samples to order".into()))?;
    samples.sort_by(|a, b| b.length.cmp(&a.length).then(a.repeat.cmp(&b.repeat)));
    let mut start = 0;
    while start < samples.len() {
        let length = samples[start].length;
        let end = start + samples[start..].iter().take_while(|t| t.length == length).count();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            seed,
            SHUFFLE_TAG,
            origin as u64,
            length as u64,
        ]));
        samples[start..end].shuffle(&mut rng);
        start = end;
    }
    let spec = TokenSequenceSpec {
        origin,
        tokens: samples,
        order_mode: OrderMode::ReverseHierarchy,
    };
    spec.validate()?;
    Ok(spec)
}

/// Whole-graph node sequence used when `m = 0`.
pub fn node_token_mode(g: &Graph, ordering: &NodeOrdering) -> Vec<usize> {
    debug_assert!(ordering.is_valid(g.num_nodes()));
    ordering.permutation.clone()
}

/// Single length-0 token per node, used for `m = 0`.
pub fn node_only_sequence(v: usize) -> TokenSequenceSpec {
    TokenSequenceSpec {
        origin: v,
        tokens: vec![WalkSample {
            origin: v,
            length: 0,
            repeat: 1,
            visited: vec![v],
            walks: vec![vec![v]],
        }],
        order_mode: OrderMode::NodeOnly,
    }
}

/// Tokenizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerParams {
    #[serde(rename = "M")]
    pub num_walks: usize,
    pub m: usize,
    pub s: usize,
    pub seed: u64,
}

/// Ordered token sequences for every node of `g`, computed in parallel.
pub fn tokenize_graph(g: &Graph, p: &TokenizerParams) -> Result<Vec<TokenSequenceSpec>> {
    if p.m == 0 {
        return Ok((0..g.num_nodes()).map(node_only_sequence).collect());
    }
    (0..g.num_nodes())
        .into_par_iter()
        .map(|v| {
            let samples = build_token_sets(g, v, p.num_walks, p.m, p.s, p.seed)?;
            order_tokens(samples, p.seed)
        })
        .collect()
}

/// On-disk token cache for a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenCache {
    pub format: String,
    pub key: CacheKey,
    pub graphs: Vec<Vec<TokenSequenceSpec>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub graph_hashes: Vec<String>,
    #[serde(flatten)]
    pub params: TokenizerParams,
}

pub const TOKEN_CACHE_FORMAT: &str = "gmn_tokens_v1";

impl TokenCache {
    pub fn build(graphs: &[Graph], p: &TokenizerParams) -> Result<TokenCache> {
        let sequences = graphs
            .iter()
            .enumerate()
            .map(|(i, g)| tokenize_graph(g, &graph_params(p, i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenCache {
            format: TOKEN_CACHE_FORMAT.to_string(),
            key: CacheKey {
                graph_hashes: graphs.iter().map(Graph::content_hash).collect(),
                params: *p,
            },
            graphs: sequences,
        })
    }

    pub fn matches(&self, graphs: &[Graph], p: &TokenizerParams) -> bool {
        self.format == TOKEN_CACHE_FORMAT
            && self.key.params == *p
            && self.key.graph_hashes.len() == graphs.len()
            && self
                .key
                .graph_hashes
                .iter()
                .zip(graphs)
                .all(|(h, g)| *h == g.content_hash())
    }
}

/// Per-graph tokenizer parameters inside a dataset: graph `i` gets its own
/// derived seed so identical graphs still draw independent walks.
pub fn graph_params(p: &TokenizerParams, graph_index: usize) -> TokenizerParams {
    TokenizerParams {
        seed: derive_seed(&[p.seed, graph_index as u64]),
        ..*p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators;
    use crate::graph::{bfs_distances, degree_ordering, k_hop_neighborhood};
    use proptest::prelude::*;

    #[test]
    fn zero_length_walk() {
        let g = generators::cycle(5);
        let s = sample_walks(&g, 3, 0, 7, 1);
        assert_eq!(s.visited, vec![3]);
        assert_eq!(s.walks.len(), 7);
    }

    #[test]
    fn k2_one_step() {
        let g = generators::path(2);
        for m in [1, 5, 50] {
            assert_eq!(sample_walks(&g, 0, 1, m, 9).visited, vec![0, 1]);
        }
    }

    #[test]
    fn p3_two_steps_reaches_far_end() {
        // 0 -> 1 -> {0, 2}: missing node 2 in all 1000 walks has probability 2^-1000.
        let g = generators::path(3);
        assert_eq!(sample_walks(&g, 0, 2, 1000, 42).visited, vec![0, 1, 2]);
    }

    #[test]
    fn dead_end_walk_stays_put() {
        let g = Graph::new(3, &[(0, 1)]).unwrap();
        let s = sample_walks(&g, 2, 3, 2, 5);
        assert_eq!(s.walks, vec![vec![2, 2, 2, 2]; 2]);
        assert_eq!(s.visited, vec![2]);
    }

    #[test]
    fn token_set_counts() {
        let g = generators::cycle(8);
        let t = build_token_sets(&g, 0, 3, 1, 1, 0).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].visited, vec![0]);
        let t = build_token_sets(&g, 0, 3, 2, 3, 0).unwrap();
        let lengths: Vec<_> = t.iter().map(|s| s.length).collect();
        assert_eq!(lengths, vec![0, 1, 1, 1, 2, 2, 2]);
        assert!(build_token_sets(&g, 0, 3, 2, 0, 0).is_err());
        assert!(build_token_sets(&g, 0, 3, 0, 1, 0).is_err());
    }

    #[test]
    fn large_m_covers_k_hop_ball() {
        let g = generators::triangular_prism();
        let t = build_token_sets(&g, 0, 2000, 3, 1, 17).unwrap();
        for sample in &t {
            assert_eq!(sample.visited, k_hop_neighborhood(&g, 0, sample.length));
        }
    }

    fn fake(length: usize, repeat: usize) -> WalkSample {
        WalkSample {
            origin: 0,
            length,
            repeat,
            visited: vec![0],
            walks: vec![vec![0; length + 1]],
        }
    }

    #[test]
    fn ordering_reverses_hierarchy() {
        let spec = order_tokens(vec![fake(0, 1), fake(1, 1), fake(2, 1)], 3).unwrap();
        let lengths: Vec<_> = spec.tokens.iter().map(|t| t.length).collect();
        assert_eq!(lengths, vec![2, 1, 0]);
    }

    #[test]
    fn ordering_shuffles_within_blocks_reproducibly() {
        let input = vec![fake(0, 1), fake(1, 1), fake(1, 2), fake(2, 1), fake(2, 2)];
        let a = order_tokens(input.clone(), 99).unwrap();
        let b = order_tokens(input.clone(), 99).unwrap();
        assert_eq!(a, b);
        let lengths: Vec<_> = a.tokens.iter().map(|t| t.length).collect();
        assert_eq!(lengths, vec![2, 2, 1, 1, 0]);
        // Over many seeds both within-block orders must occur.
        let mut firsts = std::collections::BTreeSet::new();
        for seed in 0..64 {
            firsts.insert(order_tokens(input.clone(), seed).unwrap().tokens[0].repeat);
        }
        assert_eq!(firsts.len(), 2);
    }

    #[test]
    fn validate_rejects_misplaced_zero_token() {
        let spec = TokenSequenceSpec {
            origin: 0,
            tokens: vec![fake(0, 1), fake(1, 1)],
            order_mode: OrderMode::ReverseHierarchy,
        };
        assert!(matches!(spec.validate(), Err(GmnError::TokenOrder(_))));
    }

    #[test]
    fn node_token_examples() {
        let g = generators::path(3);
        assert_eq!(node_token_mode(&g, &NodeOrdering::identity(3)), vec![0, 1, 2]);
        assert_eq!(node_token_mode(&g, &degree_ordering(&g)), vec![1, 0, 2]);
        let e = Graph::new(4, &[]).unwrap();
        assert_eq!(node_token_mode(&e, &degree_ordering(&e)), vec![0, 1, 2, 3]);
    }

    #[test]
    fn tokenize_is_deterministic_and_sized() {
        let g = generators::cycle(10);
        let p = TokenizerParams { num_walks: 4, m: 2, s: 3, seed: 5 };
        let a = tokenize_graph(&g, &p).unwrap();
        let b = tokenize_graph(&g, &p).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.iter().all(|t| t.tokens.len() == 7));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn samples_are_sound(seed in 0u64..10_000, n in 2usize..16, m in 1usize..4, s in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = generators::random_bounded_degree(n, 4, 0.4, &mut rng);
            let v = (seed as usize) % n;
            let dist = bfs_distances(&g, v);
            let samples = build_token_sets(&g, v, 5, m, s, seed).unwrap();
            prop_assert_eq!(samples.len(), s * m + 1);
            for sample in &samples {
                prop_assert!(sample.visited.contains(&v));
                prop_assert!(sample.visited.len() <= 5 * sample.length + 1);
                for &u in &sample.visited {
                    prop_assert!(dist[u].is_some_and(|d| d <= sample.length));
                }
                for walk in &sample.walks {
                    prop_assert_eq!(walk.len(), sample.length + 1);
                    for w in walk.windows(2) {
                        prop_assert!(g.has_edge(w[0], w[1]) || (w[0] == w[1] && g.degree(w[0]) == 0));
                    }
                }
            }
            let spec = order_tokens(samples, seed).unwrap();
            prop_assert!(spec.validate().is_ok());
        }
    }
}
