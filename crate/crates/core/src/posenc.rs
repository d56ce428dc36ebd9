//! Positional / structural encodings concatenated onto node features.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigen::jacobi_eigen;
use crate::error::{GmnError, Result};
use crate::graph::Graph;
use crate::tensor::Matrix;

/// Largest graph the dense Laplacian eigensolver accepts.
pub const LAPPE_MAX_NODES: usize = 5000;

const ZERO_EIGENVALUE_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaplacianKind {
    /// `L = D − A`.
    #[default]
    Combinatorial,
    /// `L = I − D^{-1/2} A D^{-1/2}`.
    Normalized,
}

/// Encoding choice as it appears in the training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PeConfig {
    None,
    Rwse {
        k: usize,
    },
    Lappe {
        dim: usize,
        #[serde(default)]
        laplacian: LaplacianKind,
    },
}

impl Default for PeConfig {
    fn default() -> Self {
        PeConfig::Rwse { k: 8 }
    }
}

impl PeConfig {
    pub fn dim(&self) -> usize {
        match self {
            PeConfig::None => 0,
            PeConfig::Rwse { k } => *k,
            PeConfig::Lappe { dim, .. } => *dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeMode {
    None,
    Rwse,
    Lappe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosEncoding {
    pub vectors: Matrix,
    pub mode: PeMode,
    pub d_pe: usize,
}

impl PosEncoding {
    pub fn none(n: usize) -> PosEncoding {
        PosEncoding {
            vectors: Matrix::zeros(n, 0),
            mode: PeMode::None,
            d_pe: 0,
        }
    }
}

pub fn compute_pe(g: &Graph, cfg: &PeConfig) -> Result<PosEncoding> {
    match *cfg {
        PeConfig::None => Ok(PosEncoding::none(g.num_nodes())),
        PeConfig::Rwse { k } => rwse(g, k),
        PeConfig::Lappe { dim, laplacian } => lappe_with(g, dim, laplacian),
    }
}

/// Random-walk return probabilities `[P¹_vv, …, P^K_vv]` with `P = D⁻¹A`.
///
/// Each node propagates its own sparse distribution for `K` rounds, so the
/// cost is bounded by the size of the `K`-hop balls, never `n²`.
pub fn rwse(g: &Graph, k: usize) -> Result<PosEncoding> {
    if k == 0 {
        return Err(GmnError::Config("rwse needs K >= 1".into()));
    }
    let n = g.num_nodes();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![0.0f64; n], Vec::new()),
            |(scratch, touched), v| return_probabilities(g, v, k, scratch, touched),
        )
        .collect();
    let mut vectors = Matrix::zeros(n, k);
    for (v, r) in rows.iter().enumerate() {
        vectors.row_mut(v).copy_from_slice(r);
    }
    Ok(PosEncoding {
        vectors,
        mode: PeMode::Rwse,
        d_pe: k,
    })
}

/// `P^j_vu` for `j = 0..=k.div_ceil(2)`, then `P^k_vv` by meeting in the
/// middle: `P^{a+b}_vv = Σ_u P^a_vu · P^b_vu · deg(v) / deg(u)`, which holds
/// because the walk is reversible with stationary weights `deg(u)`.
fn return_probabilities(
    g: &Graph,
    v: usize,
    k: usize,
    scratch: &mut [f64],
    touched: &mut Vec<usize>,
) -> Vec<f64> {
    let half = k.div_ceil(2);
    let mut dists: Vec<Vec<(usize, f64)>> = Vec::with_capacity(half + 1);
    dists.push(vec![(v, 1.0)]);
    for j in 0..half {
        touched.clear();
        for &(w, p) in &dists[j] {
            let deg = g.degree(w);
            if deg == 0 {
                continue;
            }
            let share = p / deg as f64;
            for &u in g.neighbors(w) {
                if scratch[u] == 0.0 {
                    touched.push(u);
                }
                scratch[u] += share;
            }
        }
        touched.sort_unstable();
        let next = touched
            .iter()
            .map(|&u| (u, std::mem::take(&mut scratch[u])))
            .collect();
        dists.push(next);
    }
    let dv = g.degree(v) as f64;
    (1..=k)
        .map(|len| {
            let (a, b) = (&dists[len.div_ceil(2)], &dists[len / 2]);
            let (mut i, mut j, mut acc) = (0, 0, 0.0);
            while i < a.len() && j < b.len() {
                match a[i].0.cmp(&b[j].0) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        let u = a[i].0;
                        acc += a[i].1 * b[j].1 * dv / g.degree(u) as f64;
                        i += 1;
                        j += 1;
                    }
                }
            }
            acc
        })
        .collect()
}

/// Laplacian eigenvectors with the combinatorial Laplacian.
pub fn lappe(g: &Graph, d_pe: usize) -> Result<PosEncoding> {
    lappe_with(g, d_pe, LaplacianKind::Combinatorial)
}

/// Eigenvectors for the `d_pe` smallest nonzero Laplacian eigenvalues.
///
/// Each vector's largest-magnitude entry is made positive; equal eigenvalues
/// are ordered by the lexicographic order of their sign-fixed vectors. When
/// the graph has fewer than `d_pe` nonzero eigenvalues the remaining columns
/// are zero.
pub fn lappe_with(g: &Graph, d_pe: usize, kind: LaplacianKind) -> Result<PosEncoding> {
    let n = g.num_nodes();
    if n > LAPPE_MAX_NODES {
        return Err(GmnError::Capacity {
            n,
            cap: LAPPE_MAX_NODES,
        });
    }
    if d_pe >= n.max(1) {
        return Err(GmnError::Config(format!(
            "lappe dimension {d_pe} must be below the node count {n}"
        )));
    }
    let l = laplacian(g, kind);
    let (values, vecs) = jacobi_eigen(&l);
    let mut pairs: Vec<(f64, Vec<f64>)> = values
        .iter()
        .enumerate()
        .filter(|(_, &lam)| lam > ZERO_EIGENVALUE_TOL)
        .map(|(k, &lam)| {
            let mut q: Vec<f64> = (0..n).map(|i| vecs.get(i, k)).collect();
            fix_sign(&mut q);
            (lam, q)
        })
        .collect();
    pairs.sort_by(|a, b| {
        if (a.0 - b.0).abs() <= ZERO_EIGENVALUE_TOL {
            lexicographic(&a.1, &b.1)
        } else {
            a.0.total_cmp(&b.0)
        }
    });
    let mut vectors = Matrix::zeros(n, d_pe);
    for (col, (_, q)) in pairs.iter().take(d_pe).enumerate() {
        for (i, &x) in q.iter().enumerate() {
            vectors.set(i, col, x);
        }
    }
    Ok(PosEncoding {
        vectors,
        mode: PeMode::Lappe,
        d_pe,
    })
}

/// Ascending nonzero Laplacian eigenvalues; exposed for diagnostics.
pub fn laplacian_spectrum(g: &Graph, kind: LaplacianKind) -> Vec<f64> {
    let (mut values, _) = jacobi_eigen(&laplacian(g, kind));
    values.retain(|&v| v > ZERO_EIGENVALUE_TOL);
    values.sort_by(f64::total_cmp);
    values
}

pub fn laplacian(g: &Graph, kind: LaplacianKind) -> Matrix {
    let n = g.num_nodes();
    let mut l = Matrix::zeros(n, n);
    for u in 0..n {
        let du = g.degree(u) as f64;
        match kind {
            LaplacianKind::Combinatorial => {
                l.set(u, u, du);
                for &w in g.neighbors(u) {
                    l.set(u, w, l.get(u, w) - 1.0);
                }
            }
            LaplacianKind::Normalized => {
                if du > 0.0 {
                    l.set(u, u, 1.0);
                }
                for &w in g.neighbors(u) {
                    let dw = g.degree(w) as f64;
                    l.set(u, w, l.get(u, w) - 1.0 / (du * dw).sqrt());
                }
            }
        }
    }
    l
}

fn fix_sign(q: &mut [f64]) {
    let mut best = 0;
    for (i, x) in q.iter().enumerate() {
        if x.abs() > q[best].abs() + 1e-12 {
            best = i;
        }
    }
    if q.get(best).is_some_and(|&x| x < 0.0) {
        q.iter_mut().for_each(|x| *x = -*x);
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

/// `[X | P]`: appends the encoding columns to the node features.
pub fn concat_pe(g: &Graph, pe: &PosEncoding) -> Result<Graph> {
    if pe.vectors.rows != g.num_nodes() {
        return Err(GmnError::shape(
            "concat_pe",
            format!("{} encoding rows for {} nodes", pe.vectors.rows, g.num_nodes()),
        ));
    }
    if pe.mode == PeMode::None || pe.d_pe == 0 {
        return Ok(g.clone());
    }
    let x = g.node_features().hcat(&pe.vectors)?;
    g.clone().with_node_features(x)
}
