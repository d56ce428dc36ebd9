//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every op records its inputs and whatever it needs to run backwards.
//! Parameters live in a [`ParamStore`] and enter a tape by id, so the
//! gradient map comes back keyed by the same ids (and names).

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GmnError, Result};
use crate::ssm::{discretize_backward, discretize_raw, scan_recurrent, scan_recurrent_backward};
use crate::tensor::{matmul_nt_acc, matmul_tn_acc, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub values: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Gradients {
            values: store
                .values
                .iter()
                .map(|v| Matrix::zeros(v.rows, v.cols))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.values {
            v.data.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn named(&self, store: &ParamStore) -> BTreeMap<String, Matrix> {
        store
            .ids()
            .map(|id| (store.name(id).to_string(), self.get(id).clone()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

/// Sparse linear map on rows: `out[i] = Σ w·x[j]` over the entries of row
/// `i`. Gathers, reversals, permutations and mean pools are all row mixes.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMix {
    in_rows: usize,
    offsets: Vec<usize>,
    src: Vec<usize>,
    weight: Vec<f64>,
}

impl RowMix {
    pub fn new(in_rows: usize) -> Self {
        RowMix {
            in_rows,
            offsets: vec![0],
            src: Vec::new(),
            weight: Vec::new(),
        }
    }

    /// Appends an output row.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (j, w) in entries {
            assert!(j < self.in_rows, "row mix source {j} out of range");
            self.src.push(j);
            self.weight.push(w);
        }
        self.offsets.push(self.src.len());
    }

    /// `out[i] = x[idx[i]]`.
    pub fn gather(in_rows: usize, idx: &[usize]) -> Self {
        let mut mix = RowMix::new(in_rows);
        for &j in idx {
            mix.push_row([(j, 1.0)]);
        }
        mix
    }

    /// One output row per group: the mean of that group's consecutive rows.
    pub fn segment_mean(lengths: &[usize]) -> Self {
        let mut mix = RowMix::new(lengths.iter().sum());
        let mut start = 0;
        for &len in lengths {
            let w = 1.0 / len.max(1) as f64;
            mix.push_row((start..start + len).map(|j| (j, w)));
            start += len;
        }
        mix
    }

    /// Reverses row order inside each consecutive segment.
    pub fn reverse_segments(lengths: &[usize]) -> Self {
        let total = lengths.iter().sum();
        let mut idx = Vec::with_capacity(total);
        let mut start = 0;
        for &len in lengths {
            idx.extend((start..start + len).rev());
            start += len;
        }
        RowMix::gather(total, &idx)
    }

    /// Mean over graph neighbors; isolated nodes get a zero row.
    pub fn neighbor_mean(adj: &[&[usize]]) -> Self {
        let mut mix = RowMix::new(adj.len());
        for nb in adj {
            let w = 1.0 / nb.len().max(1) as f64;
            mix.push_row(nb.iter().map(|&j| (j, w)));
        }
        mix
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        self.src[a..b].iter().copied().zip(self.weight[a..b].iter().copied())
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows != self.in_rows {
            return Err(GmnError::shape(
                "row_mix",
                format!("expects {} rows, got {}", self.in_rows, x.rows),
            ));
        }
        let cols = x.cols;
        let mut out = Matrix::zeros(self.out_rows(), cols);
        let fill = |(i, orow): (usize, &mut [f64])| {
            for (j, w) in self.entries(i) {
                for (o, v) in orow.iter_mut().zip(x.row(j)) {
                    *o += w * v;
                }
            }
        };
        if cols > 0 {
            if self.out_rows() >= 4096 {
                out.data.par_chunks_mut(cols).enumerate().for_each(fill);
            } else {
                out.data.chunks_mut(cols).enumerate().for_each(fill);
            }
        }
        Ok(out)
    }

    /// `out += Mᵀ·g`.
    fn apply_transpose_acc(&self, g: &Matrix, out: &mut Matrix) {
        for i in 0..self.out_rows() {
            let grow = g.row(i);
            for (j, w) in self.entries(i) {
                for (o, v) in out.row_mut(j).iter_mut().zip(grow) {
                    *o += w * v;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate backward bugs used to show the gradient checker catches them.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SiluDerivative,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Softplus(Var),
    NegExp(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
        segments: Arc<Vec<usize>>,
    },
    Scan {
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        segments: Arc<Vec<usize>>,
    },
    RowMix(Var, Arc<RowMix>),
    CrossEntropy {
        logits: Var,
        targets: Arc<Vec<(usize, usize)>>,
        probs: Matrix,
    },
    L1 {
        pred: Var,
        target: Arc<Matrix>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Silu(_) => "silu",
            Op::Softplus(_) => "softplus",
            Op::NegExp(_) => "neg_exp",
            Op::Sum(_) => "sum",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CausalConv { .. } => "causal_conv",
            Op::Scan { .. } => "selective_scan",
            Op::RowMix(..) => "row_mix",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L1 { .. } => "l1_loss",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn map(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn segment_starts(segments: &[usize]) -> Vec<usize> {
    let mut starts = Vec::with_capacity(segments.len());
    let mut acc = 0;
    for &len in segments {
        starts.push(acc);
        acc += len;
    }
    starts
}

/// Recorded computation. Values are kept for every node.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GmnError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `x + 1·bias` for a `1×c` bias row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.shape(x);
        if self.shape(bias) != (1, cols) {
            return Err(GmnError::shape(
                "add_row",
                format!("bias {:?} for {cols} columns", self.shape(bias)),
            ));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data.clone();
        if cols > 0 {
            for row in value.data.chunks_mut(cols) {
                for (v, bv) in row.iter_mut().zip(&b) {
                    *v += bv;
                }
            }
        }
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = map(self.value(x), |v| k * v);
        self.push(value, Op::Scale(x, k))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = map(self.value(x), silu);
        self.push(value, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = map(self.value(x), crate::ssm::softplus);
        self.push(value, Op::Softplus(x))
    }

    /// `−exp(x)`, the stable parameterization of a diagonal state matrix.
    pub fn neg_exp(&mut self, x: Var) -> Var {
        let value = map(self.value(x), |v| -v.exp());
        self.push(value, Op::NegExp(x))
    }

    /// Sum of all entries as a `1×1` matrix.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        self.push(Matrix::filled(1, 1, total), Op::Sum(x))
    }

    /// Row-wise layer norm with `1×c` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if self.shape(gamma) != (1, cols) || self.shape(beta) != (1, cols) {
            return Err(GmnError::shape("layer_norm", "scale/shift must be 1×cols"));
        }
        let xv = self.value(x);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = Matrix::zeros(rows, cols);
        let mut value = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.data[r * cols + c] = h;
                value.data[r * cols + c] = g[c] * h + b[c];
            }
        }
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Causal depthwise convolution inside each segment:
    /// `y_t = b + Σ_j w_j ⊙ x_{t−j}`, with zero left padding.
    pub fn causal_conv(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        segments: Arc<Vec<usize>>,
    ) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        let (k, wc) = self.shape(w);
        if wc != cols || self.shape(b) != (1, cols) || segments.iter().sum::<usize>() != rows {
            return Err(GmnError::shape(
                "causal_conv",
                format!("x {rows}x{cols}, kernel {k}x{wc}, bias {:?}", self.shape(b)),
            ));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut value = Matrix::zeros(rows, cols);
        for (start, &len) in segment_starts(&segments).iter().zip(segments.iter()) {
            for t in 0..len {
                let out = &mut value.data[(start + t) * cols..(start + t + 1) * cols];
                out.copy_from_slice(bv.row(0));
                for j in 0..k.min(t + 1) {
                    let src = xv.row(start + t - j);
                    for ((o, &xs), &wj) in out.iter_mut().zip(src).zip(wv.row(j)) {
                        *o += wj * xs;
                    }
                }
            }
        }
        Ok(self.push(value, Op::CausalConv { x, w, b, segments }))
    }

    /// Selective scan per segment: discretize `(A, Δ, B)` by ZOH and run the
    /// recurrence on `u` read out through `C`.
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        segments: Arc<Vec<usize>>,
    ) -> Result<Var> {
        let (rows, d) = self.shape(u);
        let (ad, n) = self.shape(a);
        if self.shape(delta) != (rows, d)
            || ad != d
            || self.shape(b) != (rows, n)
            || self.shape(c) != (rows, n)
            || segments.iter().sum::<usize>() != rows
        {
            return Err(GmnError::shape(
                "selective_scan",
                format!(
                    "u {rows}x{d}, Δ {:?}, A {ad}x{n}, B {:?}, C {:?}",
                    self.shape(delta),
                    self.shape(b),
                    self.shape(c)
                ),
            ));
        }
        let (uv, dv, av, bv, cv) = (
            self.value(u),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
        );
        let starts = segment_starts(&segments);
        let parts: Vec<Matrix> = starts
            .par_iter()
            .zip(segments.par_iter())
            .map(|(&s, &len)| {
                let e = s + len;
                let disc = discretize_raw(av, &dv.slice_rows(s, e), &bv.slice_rows(s, e))?;
                scan_recurrent(&disc, &cv.slice_rows(s, e), &uv.slice_rows(s, e))
            })
            .collect::<Result<_>>()?;
        let value = if parts.is_empty() {
            Matrix::zeros(0, d)
        } else {
            Matrix::vstack(&parts)?
        };
        Ok(self.push(
            value,
            Op::Scan {
                u,
                delta,
                a,
                b,
                c,
                segments,
            },
        ))
    }

    pub fn row_mix(&mut self, x: Var, mix: Arc<RowMix>) -> Result<Var> {
        let value = mix.apply(self.value(x))?;
        Ok(self.push(value, Op::RowMix(x, mix)))
    }

    /// Mean softmax cross-entropy over the listed `(row, class)` pairs.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = lv.shape();
        if targets.is_empty() {
            return Err(GmnError::Labels("cross-entropy over zero targets".into()));
        }
        if let Some(&(r, c)) = targets.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(GmnError::Labels(format!(
                "target ({r}, {c}) outside {rows}x{cols} logits"
            )));
        }
        let probs = softmax_rows(lv);
        let loss = targets
            .iter()
            .map(|&(r, c)| log_sum_exp(lv.row(r)) - lv.get(r, c))
            .sum::<f64>()
            / targets.len() as f64;
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: Arc<Matrix>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || pv.is_empty() {
            return Err(GmnError::shape(
                "l1_loss",
                format!("pred {:?} vs target {:?}", pv.shape(), target.shape()),
            ));
        }
        let loss = pv
            .data
            .iter()
            .zip(&target.data)
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / pv.len() as f64;
        Ok(self.push(Matrix::filled(1, 1, loss), Op::L1 { pred, target }))
    }

    /// Reverse pass from a scalar output seeded with `1`.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        self.backward_with(loss, 1.0, store)
    }

    /// Reverse pass seeded with `seed`, returning gradients per parameter.
    pub fn backward_with(&self, loss: Var, seed: f64, store: &ParamStore) -> Result<Gradients> {
        let adjoints = self.adjoints(loss, seed)?;
        let mut grads = Gradients::zeros(store);
        for (node, adj) in self.nodes.iter().zip(adjoints) {
            if let (Op::Param(id), Some(g)) = (&node.op, adj) {
                grads.values[id.0].add_assign(&g);
            }
        }
        Ok(grads)
    }

    /// Adjoint of every node reachable backwards from `loss`.
    pub fn adjoints(&self, loss: Var, seed: f64) -> Result<Vec<Option<Matrix>>> {
        if self.shape(loss) != (1, 1) {
            return Err(GmnError::shape("backward", "loss must be 1×1"));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::filled(1, 1, seed));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let contributions = self.node_backward(i, &g)?;
            for (v, m) in &contributions {
                if !m.is_finite() {
                    return Err(GmnError::NonFiniteGradient {
                        op: self.nodes[i].op.name(),
                        node: i,
                    });
                }
                debug_assert!(v.0 < i, "tape edges point backwards");
            }
            for (v, m) in contributions {
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&m),
                    slot => *slot = Some(m),
                }
            }
            adj[i] = Some(g);
        }
        Ok(adj)
    }

    fn node_backward(&self, i: usize, g: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let node = &self.nodes[i];
        let out = match &node.op {
            Op::Constant | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(av.rows, av.cols);
                matmul_nt_acc(g, bv, &mut ga);
                let mut gb = Matrix::zeros(bv.rows, bv.cols);
                matmul_tn_acc(av, g, &mut gb);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(x, bias) => {
                let mut gb = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                vec![(*x, g.clone()), (*bias, gb)]
            }
            Op::Mul(a, b) => vec![
                (*a, zip_map(g, self.value(*b), |x, y| x * y)),
                (*b, zip_map(g, self.value(*a), |x, y| x * y)),
            ],
            Op::Scale(x, k) => vec![(*x, map(g, |v| k * v))],
            Op::Silu(x) => {
                let faulty = self.fault == Some(Fault::SiluDerivative);
                let d = map(self.value(*x), |v| {
                    let s = sigmoid(v);
                    if faulty {
                        s
                    } else {
                        s * (1.0 + v * (1.0 - s))
                    }
                });
                vec![(*x, zip_map(g, &d, |a, b| a * b))]
            }
            Op::Softplus(x) => vec![(*x, zip_map(g, self.value(*x), |a, v| a * sigmoid(v)))],
            Op::NegExp(x) => vec![(*x, zip_map(g, &node.value, |a, y| a * y))],
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                vec![(*x, Matrix::filled(r, c, g.data[0]))]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let gam = &self.value(*gamma).data;
                let mut gx = Matrix::zeros(rows, cols);
                let mut gg = Matrix::zeros(1, cols);
                let mut gbeta = Matrix::zeros(1, cols);
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let mut mean_gh = 0.0;
                    let mut mean_ghh = 0.0;
                    for c in 0..cols {
                        let gh = gr[c] * gam[c];
                        mean_gh += gh;
                        mean_ghh += gh * hr[c];
                        gg.data[c] += gr[c] * hr[c];
                        gbeta.data[c] += gr[c];
                    }
                    mean_gh /= cols as f64;
                    mean_ghh /= cols as f64;
                    for c in 0..cols {
                        let gh = gr[c] * gam[c];
                        gx.data[r * cols + c] = inv_std[r] * (gh - mean_gh - hr[c] * mean_ghh);
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::CausalConv { x, w, b, segments } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, cols) = wv.shape();
                let mut gx = Matrix::zeros(xv.rows, cols);
                let mut gw = Matrix::zeros(k, cols);
                let mut gb = Matrix::zeros(1, cols);
                for (start, &len) in segment_starts(segments).iter().zip(segments.iter()) {
                    for t in 0..len {
                        let gr = g.row(start + t);
                        for (o, v) in gb.data.iter_mut().zip(gr) {
                            *o += v;
                        }
                        for j in 0..k.min(t + 1) {
                            let src = start + t - j;
                            for c in 0..cols {
                                gx.data[src * cols + c] += wv.get(j, c) * gr[c];
                                gw.data[j * cols + c] += gr[c] * xv.get(src, c);
                            }
                        }
                    }
                }
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Scan {
                u,
                delta,
                a,
                b,
                c,
                segments,
            } => {
                let (uv, dv, av, bv, cv) = (
                    self.value(*u),
                    self.value(*delta),
                    self.value(*a),
                    self.value(*b),
                    self.value(*c),
                );
                let starts = segment_starts(segments);
                let parts: Vec<(Matrix, Matrix, Matrix, Matrix, Matrix)> = starts
                    .par_iter()
                    .zip(segments.par_iter())
                    .map(|(&s, &len)| {
                        let e = s + len;
                        let (ds, bs, cs, us) = (
                            dv.slice_rows(s, e),
                            bv.slice_rows(s, e),
                            cv.slice_rows(s, e),
                            uv.slice_rows(s, e),
                        );
                        let disc = discretize_raw(av, &ds, &bs)?;
                        let sg = scan_recurrent_backward(&disc, &cs, &us, &g.slice_rows(s, e))?;
                        let (ga, gd, gb) = discretize_backward(av, &ds, &bs, &sg.a_bar, &sg.b_bar);
                        Ok((sg.x, gd, ga, gb, sg.c))
                    })
                    .collect::<Result<_>>()?;
                let mut ga = Matrix::zeros(av.rows, av.cols);
                let (mut gu, mut gd, mut gb, mut gc) = (
                    Vec::with_capacity(parts.len()),
                    Vec::with_capacity(parts.len()),
                    Vec::with_capacity(parts.len()),
                    Vec::with_capacity(parts.len()),
                );
                for (pu, pd, pa, pb, pc) in parts {
                    ga.add_assign(&pa);
                    gu.push(pu);
                    gd.push(pd);
                    gb.push(pb);
                    gc.push(pc);
                }
                let stack = |blocks: Vec<Matrix>, cols: usize| -> Result<Matrix> {
                    if blocks.is_empty() {
                        Ok(Matrix::zeros(0, cols))
                    } else {
                        Matrix::vstack(&blocks)
                    }
                };
                vec![
                    (*u, stack(gu, uv.cols)?),
                    (*delta, stack(gd, dv.cols)?),
                    (*a, ga),
                    (*b, stack(gb, bv.cols)?),
                    (*c, stack(gc, cv.cols)?),
                ]
            }
            Op::RowMix(x, mix) => {
                let (r, c) = self.shape(*x);
                let mut gx = Matrix::zeros(r, c);
                mix.apply_transpose_acc(g, &mut gx);
                vec![(*x, gx)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.data[0] / targets.len() as f64;
                let mut gl = Matrix::zeros(probs.rows, probs.cols);
                for &(r, c) in targets.iter() {
                    for (o, p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o += scale * p;
                    }
                    gl.data[r * probs.cols + c] -= scale;
                }
                vec![(*logits, gl)]
            }
            Op::L1 { pred, target } => {
                let pv = self.value(*pred);
                let scale = g.data[0] / pv.len() as f64;
                let gp = zip_map(pv, target, |p, t| {
                    if p > t {
                        scale
                    } else if p < t {
                        -scale
                    } else {
                        0.0
                    }
                });
                vec![(*pred, gp)]
            }
        };
        Ok(out)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    if m.cols == 0 {
        return out;
    }
    for row in out.data.chunks_mut(m.cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Central differences of `f` over every entry of every parameter.
    fn check(store: &ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Var, tol: f64) {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store);
        let grads = tape.backward(loss, store).unwrap();
        let h = 1e-5;
        for id in store.ids() {
            for k in 0..store.get(id).len() {
                let eval = |delta: f64| {
                    let mut s = store.clone();
                    s.get_mut(id).data[k] += delta;
                    let mut t = Tape::new();
                    let l = f(&mut t, &s);
                    t.value(l).data[0]
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = grads.get(id).data[k];
                let err = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                assert!(err < tol, "{} [{k}]: {ana} vs {num}", store.name(id));
            }
        }
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::filled(1, 1, 3.0));
        let mut tape = Tape::new();
        let x = tape.param(&store, w);
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss, &store).unwrap();
        assert!((g.get(w).data[0] - 6.0).abs() < 1e-12);
        check(&store, |t, s| {
            let x = t.param(s, w);
            let y = t.mul(x, x).unwrap();
            t.sum(y)
        }, 1e-8);
    }

    #[test]
    fn elementwise_and_matmul_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.add("a", random(4, 3, &mut rng));
        let b = store.add("b", random(3, 5, &mut rng));
        let bias = store.add("bias", random(1, 5, &mut rng));
        let gamma = store.add("gamma", random(1, 5, &mut rng));
        let beta = store.add("beta", random(1, 5, &mut rng));
        check(&store, |t, s| {
            let (a, b) = (t.param(s, a), t.param(s, b));
            let p = t.matmul(a, b).unwrap();
            let bias = t.param(s, bias);
            let p = t.add_row(p, bias).unwrap();
            let (g, be) = (t.param(s, gamma), t.param(s, beta));
            let n = t.layer_norm(p, g, be).unwrap();
            let q = t.silu(n);
            let r = t.softplus(p);
            let m = t.mul(q, r).unwrap();
            let e = t.neg_exp(m);
            let z = t.scale(e, 0.7);
            let z = t.add(z, q).unwrap();
            let w = t.mul(z, z).unwrap();
            t.sum(w)
        }, 1e-6);
    }

    #[test]
    fn conv_scan_and_mix_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let segs = Arc::new(vec![3, 1, 4]);
        let (rows, d, n) = (8, 3, 2);
        let mut store = ParamStore::new();
        let x = store.add("x", random(rows, d, &mut rng));
        let w = store.add("w", random(4, d, &mut rng));
        let b = store.add("b", random(1, d, &mut rng));
        let dt = store.add("dt", random(rows, d, &mut rng));
        let alog = store.add("alog", random(d, n, &mut rng));
        let bm = store.add("bm", random(rows, n, &mut rng));
        let cm = store.add("cm", random(rows, n, &mut rng));
        let rev = Arc::new(RowMix::reverse_segments(&segs));
        let pool = Arc::new(RowMix::segment_mean(&segs));
        check(&store, |t, s| {
            let xv = t.param(s, x);
            let xr = t.row_mix(xv, rev.clone()).unwrap();
            let (wv, bv) = (t.param(s, w), t.param(s, b));
            let u = t.causal_conv(xr, wv, bv, segs.clone()).unwrap();
            let dtv = t.param(s, dt);
            let delta = t.softplus(dtv);
            let al = t.param(s, alog);
            let a = t.neg_exp(al);
            let (bv, cv) = (t.param(s, bm), t.param(s, cm));
            let y = t.selective_scan(u, delta, a, bv, cv, segs.clone()).unwrap();
            let p = t.row_mix(y, pool.clone()).unwrap();
            let q = t.mul(p, p).unwrap();
            t.sum(q)
        }, 1e-6);
    }

    #[test]
    fn losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let z = store.add("z", random(3, 4, &mut rng));
        let targets = Arc::new(vec![(0, 1), (2, 3)]);
        check(&store, |t, s| {
            let zv = t.param(s, z);
            t.cross_entropy(zv, targets.clone()).unwrap()
        }, 1e-7);
        let target = Arc::new(random(3, 4, &mut rng));
        check(&store, |t, s| {
            let zv = t.param(s, z);
            t.l1_loss(zv, target.clone()).unwrap()
        }, 1e-7);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::new();
        let z = tape.constant(Matrix::zeros(2, 4));
        let l = tape.cross_entropy(z, Arc::new(vec![(0, 0), (1, 2)])).unwrap();
        assert!((tape.value(l).data[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_op() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::filled(1, 1, 800.0));
        let mut tape = Tape::new();
        let x = tape.param(&store, w);
        let e = tape.neg_exp(x);
        let l = tape.sum(e);
        let err = tape.backward(l, &store).unwrap_err();
        assert!(matches!(err, GmnError::NonFiniteGradient { op: "neg_exp", .. }), "{err}");
    }

    #[test]
    fn scan_adjoint_hand_example() {
        // Ā = 0.5 from Δ = ln 2 and a = −1; B̄ = 1 needs B = 1/(1 − 0.5) = 2.
        let mut tape = Tape::new();
        let u = tape.constant(Matrix::from_vec(3, 1, vec![1.0, 0.0, 0.0]).unwrap());
        let delta = tape.constant(Matrix::filled(3, 1, 2f64.ln()));
        let a = tape.constant(Matrix::filled(1, 1, -1.0));
        let b = tape.constant(Matrix::filled(3, 1, 2.0));
        let c = tape.constant(Matrix::filled(3, 1, 1.0));
        let y = tape.selective_scan(u, delta, a, b, c, Arc::new(vec![3])).unwrap();
        assert!((tape.value(y).data[2] - 0.25).abs() < 1e-12);
        let l = tape.sum(y);
        let adj = tape.adjoints(l, 1.0).unwrap();
        let gu = adj[u.0].as_ref().unwrap();
        assert!((gu.data[0] - 1.75).abs() < 1e-12);
    }

    #[test]
    fn row_mix_builders() {
        let x = Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let rev = RowMix::reverse_segments(&[1, 3]).apply(&x).unwrap();
        assert_eq!(rev.data, vec![1.0, 4.0, 3.0, 2.0]);
        let mean = RowMix::segment_mean(&[2, 2]).apply(&x).unwrap();
        assert_eq!(mean.data, vec![1.5, 3.5]);
        let nb: Vec<&[usize]> = vec![&[1], &[0, 2], &[]];
        let m = RowMix::neighbor_mean(&nb).apply(&x.slice_rows(0, 3)).unwrap();
        assert_eq!(m.data, vec![2.0, 2.0, 0.0]);
    }
}
