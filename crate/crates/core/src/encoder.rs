//! Token encoders: random-walk features with a causal convolution, and a
//! small mean-aggregation message-passing network.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{RowMix, Tape, Var};
use crate::error::{GmnError, Result};
use crate::graph::Graph;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Silu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EncoderConfig {
    Rwf {
        window: usize,
    },
    Mpnn {
        rounds: usize,
        #[serde(default)]
        activation: Activation,
    },
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::Rwf { window: 3 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EncoderConfig::Rwf { window: 0 } => {
                Err(GmnError::Config("rwf window must be at least 1".into()))
            }
            EncoderConfig::Mpnn { rounds: 0, .. } => {
                Err(GmnError::Config("mpnn rounds must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Per-step features of one walk:
/// `[x | edge features | identity flags 1..w−1 | adjacency flags 1..w−1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkFeatures {
    pub rows: Matrix,
    pub window: usize,
    pub node_dim: usize,
    pub edge_dim: usize,
}

impl WalkFeatures {
    fn flag(&self, t: usize, col: usize) -> f64 {
        self.rows.get(t, self.node_dim + self.edge_dim + col)
    }

    /// 1 iff the walk is at the same node as `offset` steps earlier.
    pub fn identity_flag(&self, t: usize, offset: usize) -> f64 {
        self.flag(t, offset - 1)
    }

    /// 1 iff the current node is adjacent to the node `offset` steps earlier.
    pub fn adjacency_flag(&self, t: usize, offset: usize) -> f64 {
        self.flag(t, self.window - 1 + offset - 1)
    }

    pub fn width(&self) -> usize {
        self.rows.cols
    }
}

pub fn walk_feature_width(node_dim: usize, edge_dim: usize, window: usize) -> usize {
    node_dim + edge_dim + 2 * window.saturating_sub(1)
}

pub fn build_walk_features(g: &Graph, walk: &[usize], window: usize) -> Result<WalkFeatures> {
    if walk.is_empty() {
        return Err(GmnError::Contract("walk features of an empty walk".into()));
    }
    if window == 0 {
        return Err(GmnError::Config("window must be at least 1".into()));
    }
    if let Some(&v) = walk.iter().find(|&&v| v >= g.num_nodes()) {
        return Err(GmnError::InvalidGraph(format!("walk node {v} not in graph")));
    }
    for pair in walk.windows(2) {
        let (u, v) = (pair[0], pair[1]);
        let stuck = u == v && g.degree(u) == 0;
        if !stuck && !g.has_edge(u, v) {
            return Err(GmnError::Contract(format!("walk step {u} -> {v} is not an edge")));
        }
    }
    let x = g.node_features();
    let node_dim = x.cols;
    let edge_dim = g.edge_features().map_or(0, |e| e.cols);
    let flags = window - 1;
    let width = walk_feature_width(node_dim, edge_dim, window);
    let mut rows = Matrix::zeros(walk.len(), width);
    for (t, &v) in walk.iter().enumerate() {
        let row = rows.row_mut(t);
        row[..node_dim].copy_from_slice(x.row(v));
        if let (Some(ef), true) = (g.edge_features(), t > 0) {
            if let Some(e) = g.edge_id(walk[t - 1], v) {
                row[node_dim..node_dim + edge_dim].copy_from_slice(ef.row(e));
            }
        }
        let base = node_dim + edge_dim;
        for offset in 1..=flags.min(t) {
            let earlier = walk[t - offset];
            if earlier == v {
                row[base + offset - 1] = 1.0;
            }
            if g.has_edge(earlier, v) {
                row[base + flags + offset - 1] = 1.0;
            }
        }
    }
    Ok(WalkFeatures {
        rows,
        window,
        node_dim,
        edge_dim,
    })
}

/// Left-padded unfolding: row `t` holds `[f_t | f_{t−1} | … | f_{t−w+1}]`.
pub fn unfold(wf: &WalkFeatures) -> Matrix {
    let (len, width) = wf.rows.shape();
    let w = wf.window;
    let mut out = Matrix::zeros(len, w * width);
    for t in 0..len {
        let row = out.row_mut(t);
        for lag in 0..w.min(t + 1) {
            row[lag * width..(lag + 1) * width].copy_from_slice(wf.rows.row(t - lag));
        }
    }
    out
}

/// Convolution over walk steps with kernel size `w`: `kernel` is
/// `(w·F)×d`, `bias` is `1×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct RwfWeights {
    pub kernel: Matrix,
    pub bias: Matrix,
}

/// `h ← act(h·W_self + mean_nbr(h)·W_nbr + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MpnnLayer {
    pub w_self: Matrix,
    pub w_nbr: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpnnWeights {
    pub layers: Vec<MpnnLayer>,
    pub activation: Activation,
}

/// Stacked unfolded walk rows plus the pooling map that averages steps
/// within a walk and then walks within a token.
pub(crate) struct RwfBatch {
    pub unfolded: Matrix,
    pub pool: RowMix,
}

impl RwfBatch {
    pub fn build<'a>(
        tokens: impl IntoIterator<Item = &'a [WalkFeatures]>,
        width: usize,
    ) -> Result<RwfBatch> {
        let mut blocks = Vec::new();
        let mut groups: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut row = 0;
        for walks in tokens {
            if walks.is_empty() {
                return Err(GmnError::Contract("token without walks".into()));
            }
            let mut entries = Vec::new();
            for wf in walks {
                let u = unfold(wf);
                if u.cols != width {
                    return Err(GmnError::shape(
                        "encode_rwf",
                        format!("walk feature width {} vs kernel rows {width}", u.cols),
                    ));
                }
                let w = 1.0 / (walks.len() * u.rows) as f64;
                entries.extend((row..row + u.rows).map(|j| (j, w)));
                row += u.rows;
                blocks.push(u);
            }
            groups.push(entries);
        }
        let mut pool = RowMix::new(row);
        for entries in groups {
            pool.push_row(entries);
        }
        let unfolded = if blocks.is_empty() {
            Matrix::zeros(0, width)
        } else {
            Matrix::vstack(&blocks)?
        };
        Ok(RwfBatch { unfolded, pool })
    }
}

/// Tokens from unfolded walk rows: `pool(silu(U·K + b))`.
pub(crate) fn rwf_tape(
    tape: &mut Tape,
    unfolded: Var,
    pool: Arc<RowMix>,
    kernel: Var,
    bias: Var,
) -> Result<Var> {
    let h = tape.matmul(unfolded, kernel)?;
    let h = tape.add_row(h, bias)?;
    let h = tape.silu(h);
    tape.row_mix(h, pool)
}

pub(crate) struct MpnnVars {
    pub w_self: Var,
    pub w_nbr: Var,
    pub bias: Var,
}

/// Node states after one round per entry of `layers`.
pub(crate) fn mpnn_tape(
    tape: &mut Tape,
    x: Var,
    nbr: &Arc<RowMix>,
    layers: &[MpnnVars],
    activation: Activation,
) -> Result<Var> {
    let mut h = x;
    for layer in layers {
        let own = tape.matmul(h, layer.w_self)?;
        let agg = tape.row_mix(h, nbr.clone())?;
        let msg = tape.matmul(agg, layer.w_nbr)?;
        let sum = tape.add(own, msg)?;
        let sum = tape.add_row(sum, layer.bias)?;
        h = match activation {
            Activation::Identity => sum,
            Activation::Silu => tape.silu(sum),
        };
    }
    Ok(h)
}

pub(crate) fn neighbor_mix(g: &Graph) -> RowMix {
    let adj: Vec<&[usize]> = (0..g.num_nodes()).map(|v| g.neighbors(v)).collect();
    RowMix::neighbor_mean(&adj)
}

fn mpnn_constants(tape: &mut Tape, weights: &MpnnWeights) -> Vec<MpnnVars> {
    weights
        .layers
        .iter()
        .map(|l| MpnnVars {
            w_self: tape.constant(l.w_self.clone()),
            w_nbr: tape.constant(l.w_nbr.clone()),
            bias: tape.constant(l.bias.clone()),
        })
        .collect()
}

/// Per-node states of `weights` run on the whole of `g` with `features`.
pub fn mpnn_states(g: &Graph, features: &Matrix, weights: &MpnnWeights) -> Result<Matrix> {
    if features.rows != g.num_nodes() {
        return Err(GmnError::shape("mpnn", "one feature row per node"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let layers = mpnn_constants(&mut tape, weights);
    let nbr = Arc::new(neighbor_mix(g));
    let h = mpnn_tape(&mut tape, x, &nbr, &layers, weights.activation)?;
    Ok(tape.value(h).clone())
}

/// `rounds` message-passing rounds on `sub`, then a mean over its nodes.
pub fn encode_mpnn(sub: &Graph, rounds: usize, weights: &MpnnWeights) -> Result<Vec<f64>> {
    if sub.num_nodes() == 0 {
        return Err(GmnError::Contract("encode_mpnn on an empty subgraph".into()));
    }
    if rounds == 0 || weights.layers.len() != rounds {
        return Err(GmnError::shape(
            "encode_mpnn",
            format!("{rounds} rounds with {} weight layers", weights.layers.len()),
        ));
    }
    let h = mpnn_states(sub, sub.node_features(), weights)?;
    let pooled = RowMix::segment_mean(&[h.rows]).apply(&h)?;
    Ok(pooled.data)
}

/// Mean over walks of the step-pooled convolution output.
pub fn encode_rwf(walks: &[WalkFeatures], weights: &RwfWeights) -> Result<Vec<f64>> {
    if walks.is_empty() {
        return Err(GmnError::Contract("encode_rwf needs at least one walk".into()));
    }
    let batch = RwfBatch::build([walks], weights.kernel.rows)?;
    let mut tape = Tape::new();
    let u = tape.constant(batch.unfolded);
    let k = tape.constant(weights.kernel.clone());
    let b = tape.constant(weights.bias.clone());
    let out = rwf_tape(&mut tape, u, Arc::new(batch.pool), k, b)?;
    Ok(tape.value(out).data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators;
    use crate::graph::induce_subgraph;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_layer(s: f64, n: f64) -> MpnnLayer {
        MpnnLayer {
            w_self: Matrix::filled(1, 1, s),
            w_nbr: Matrix::filled(1, 1, n),
            bias: Matrix::zeros(1, 1),
        }
    }

    #[test]
    fn mpnn_examples() {
        let single = Graph::new(1, &[]).unwrap();
        let zero = MpnnWeights {
            layers: vec![scalar_layer(0.0, 0.0)],
            activation: Activation::Silu,
        };
        assert_eq!(encode_mpnn(&single, 1, &zero).unwrap(), vec![0.0]);

        let feats = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0], vec![-1.0, 0.0]]).unwrap();
        let path = generators::path(3).with_node_features(feats).unwrap();
        let bypass = MpnnWeights {
            layers: vec![MpnnLayer {
                w_self: Matrix::identity(2),
                w_nbr: Matrix::zeros(2, 2),
                bias: Matrix::zeros(1, 2),
            }],
            activation: Activation::Identity,
        };
        let out = encode_mpnn(&path, 1, &bypass).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12 && (out[1] - 7.0 / 3.0).abs() < 1e-12);

        let k2 = generators::path(2)
            .with_node_features(Matrix::from_vec(2, 1, vec![1.0, 3.0]).unwrap())
            .unwrap();
        let ones = MpnnWeights {
            layers: vec![scalar_layer(1.0, 1.0)],
            activation: Activation::Identity,
        };
        let states = mpnn_states(&k2, k2.node_features(), &ones).unwrap();
        assert_eq!(states.data, vec![4.0, 4.0]);
        assert_eq!(encode_mpnn(&k2, 1, &ones).unwrap(), vec![4.0]);
        assert!(encode_mpnn(&k2, 2, &ones).is_err());
    }

    #[test]
    fn walk_feature_examples() {
        let tri = generators::cycle(3);
        let single = build_walk_features(&tri, &[1], 3).unwrap();
        assert_eq!(single.rows.rows, 1);
        assert!(single.rows.row(0)[1..].iter().all(|&f| f == 0.0));

        let wf = build_walk_features(&tri, &[0, 1, 2, 0], 4).unwrap();
        assert_eq!(wf.identity_flag(3, 3), 1.0);
        assert_eq!(wf.identity_flag(3, 1), 0.0);

        let p3 = generators::path(3);
        let wf = build_walk_features(&p3, &[0, 1, 0], 3).unwrap();
        assert_eq!(wf.identity_flag(2, 2), 1.0);
        assert_eq!(wf.adjacency_flag(2, 1), 1.0);
        assert_eq!(wf.identity_flag(2, 1), 0.0);
        assert!(build_walk_features(&p3, &[0, 2], 3).is_err());
    }

    #[test]
    fn edge_features_follow_the_walk() {
        let g = generators::path(3)
            .with_edge_features(Matrix::from_vec(2, 1, vec![5.0, 7.0]).unwrap())
            .unwrap();
        let wf = build_walk_features(&g, &[0, 1, 2], 2).unwrap();
        assert_eq!(wf.width(), 1 + 1 + 2);
        let e: Vec<f64> = (0..3).map(|t| wf.rows.get(t, 1)).collect();
        assert_eq!(e, vec![0.0, 5.0, 7.0]);
    }

    /// Every walk with `len` steps.
    fn all_walks(g: &Graph, len: usize) -> Vec<Vec<usize>> {
        let mut walks: Vec<Vec<usize>> = (0..g.num_nodes()).map(|v| vec![v]).collect();
        for _ in 0..len {
            walks = walks
                .into_iter()
                .flat_map(|w| {
                    let last = *w.last().unwrap();
                    g.neighbors(last).iter().map(move |&u| {
                        let mut next = w.clone();
                        next.push(u);
                        next
                    }).collect::<Vec<_>>()
                })
                .collect();
        }
        walks
    }

    #[test]
    fn triangle_and_hexagon_walks_differ() {
        let patterns = |g: &Graph| {
            let mut rows: Vec<Vec<u8>> = all_walks(g, 3)
                .iter()
                .map(|w| {
                    let wf = build_walk_features(g, w, 3).unwrap();
                    wf.rows.data.iter().map(|&f| f as u8).collect()
                })
                .collect();
            rows.sort();
            rows.dedup();
            rows
        };
        let tri = patterns(&generators::cycle(3));
        let hex = patterns(&generators::cycle(6));
        assert_ne!(tri, hex);
        // A triangle closes in three steps; a 6-cycle cannot.
        let closes = |g: &Graph| {
            all_walks(g, 3)
                .iter()
                .any(|w| build_walk_features(g, w, 4).unwrap().identity_flag(3, 3) == 1.0)
        };
        assert!(closes(&generators::cycle(3)));
        assert!(!closes(&generators::cycle(6)));
    }

    #[test]
    fn rwf_examples() {
        let g = generators::cycle(4);
        let wf = build_walk_features(&g, &[2], 3).unwrap();
        let width = wf.width() * 3;
        let zero = RwfWeights {
            kernel: Matrix::zeros(width, 2),
            bias: Matrix::zeros(1, 2),
        };
        assert_eq!(encode_rwf(std::slice::from_ref(&wf), &zero).unwrap(), vec![0.0, 0.0]);

        let mut kernel = Matrix::zeros(width, 2);
        kernel.set(0, 0, 0.5);
        kernel.set(0, 1, -2.0);
        let w = RwfWeights {
            kernel,
            bias: Matrix::row_vector(&[0.1, 0.0]),
        };
        let got = encode_rwf(&[wf], &w).unwrap();
        let want = [crate::autodiff::silu(0.5 + 0.1), crate::autodiff::silu(-2.0)];
        assert!((got[0] - want[0]).abs() < 1e-15 && (got[1] - want[1]).abs() < 1e-15);
        assert!(encode_rwf(&[], &w).is_err());
    }

    fn random_weights(width: usize, d: usize, rng: &mut ChaCha8Rng) -> RwfWeights {
        let mut rand = |r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        RwfWeights {
            kernel: rand(width, d),
            bias: rand(1, d),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn relabeling_keeps_tokens(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = generators::random_bounded_degree(8, 3, 0.6, &mut rng);
            let mut perm: Vec<usize> = (0..8).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let h = g.permute(&perm).unwrap();
            let walk = {
                let mut w = vec![rng.gen_range(0..8)];
                for _ in 0..4 {
                    let last = *w.last().unwrap();
                    let nb = g.neighbors(last);
                    w.push(if nb.is_empty() { last } else { nb[rng.gen_range(0..nb.len())] });
                }
                w
            };
            let mapped: Vec<usize> = walk.iter().map(|&v| perm[v]).collect();
            let a = build_walk_features(&g, &walk, 3).unwrap();
            let b = build_walk_features(&h, &mapped, 3).unwrap();
            prop_assert_eq!(&a.rows, &b.rows);

            let weights = random_weights(a.width() * 3, 4, &mut rng);
            let ta = encode_rwf(&[a.clone(), b.clone()], &weights).unwrap();
            let tb = encode_rwf(&[b, a], &weights).unwrap();
            for (x, y) in ta.iter().zip(&tb) {
                prop_assert!((x - y).abs() < 1e-12);
            }

            let nodes: Vec<usize> = (0..5).collect();
            let sub = induce_subgraph(&g, &nodes).unwrap().graph;
            let order: Vec<usize> = nodes.iter().rev().copied().collect();
            let sub_perm = induce_subgraph(&g, &order).unwrap().graph;
            let mp = MpnnWeights {
                layers: vec![MpnnLayer {
                    w_self: Matrix::filled(1, 3, 0.4),
                    w_nbr: Matrix::filled(1, 3, -0.7),
                    bias: Matrix::row_vector(&[0.1, 0.2, 0.3]),
                }],
                activation: Activation::Silu,
            };
            let ea = encode_mpnn(&sub, 1, &mp).unwrap();
            let eb = encode_mpnn(&sub_perm, 1, &mp).unwrap();
            for (x, y) in ea.iter().zip(&eb) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
