//! Losses, Adam, the finite-difference gradient checker, the training loop,
//! metric history and checkpoints.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Fault, Gradients, ParamId, ParamStore, Tape, Var};
use crate::config::{AdamConfig, Task, TrainConfig};
use crate::error::{GmnError, Result};
use crate::graph::{Graph, Labels};
use crate::model::{GmnModel, ModelDims, PreparedGraph, Target};
use crate::tensor::Matrix;
use crate::tokenizer::{derive_seed, graph_params, tokenize_graph, TokenSequenceSpec};

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, _, v)| Matrix::zeros(v.rows, v.cols))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    adam: &AdamConfig,
) -> Result<()> {
    if grads.values.len() != store.len() || state.m.len() != store.len() {
        return Err(GmnError::shape("adam_step", "gradients do not match parameters"));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let p = store.get_mut(id);
        if g.shape() != p.shape() {
            return Err(GmnError::shape("adam_step", "gradient shape differs"));
        }
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m.data[k] = adam.beta1 * m.data[k] + (1.0 - adam.beta1) * gk;
            v.data[k] = adam.beta2 * v.data[k] + (1.0 - adam.beta2) * gk * gk;
            let m_hat = m.data[k] / c1;
            let v_hat = v.data[k] / c2;
            p.data[k] -= lr * m_hat / (v_hat.sqrt() + adam.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Finite-difference checking.

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Check a seeded random subset of this many coordinates (at least 200)
    /// when the parameter vector is larger; `None` checks everything.
    pub max_coords: Option<usize>,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tolerance: 1e-4,
            max_coords: None,
            seed: 0,
            fault: None,
        }
    }
}

/// Relative error with a floor that keeps near-zero gradients from
/// turning roundoff into large ratios.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoordFailure {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub failures: Vec<CoordFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }

    pub fn coords_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

/// Central differences of `loss` against its reverse-mode gradient.
pub fn finite_diff_check<F>(store: &ParamStore, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var> + Sync,
{
    let mut tape = match opts.fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let out = loss(&mut tape, store)?;
    let grads = tape.backward(out, store)?;
    drop(tape);

    let mut coords: Vec<(ParamId, usize)> = store
        .iter()
        .flat_map(|(id, _, v)| (0..v.len()).map(move |k| (id, k)))
        .collect();
    if let Some(limit) = opts.max_coords {
        let limit = limit.max(200);
        if coords.len() > limit {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            coords.shuffle(&mut rng);
            coords.truncate(limit);
            coords.sort();
        }
    }
    let eval = |id: ParamId, k: usize, delta: f64| -> Result<f64> {
        let mut s = store.clone();
        s.get_mut(id).data[k] += delta;
        let mut t = Tape::new();
        let v = loss(&mut t, &s)?;
        Ok(t.value(v).data[0])
    };
    let results: Vec<(ParamId, usize, f64, f64)> = coords
        .par_iter()
        .map(|&(id, k)| {
            let numeric = (eval(id, k, opts.h)? - eval(id, k, -opts.h)?) / (2.0 * opts.h);
            Ok((id, k, grads.get(id).data[k], numeric))
        })
        .collect::<Result<_>>()?;

    let mut params: Vec<ParamCheck> = Vec::new();
    let mut failures = Vec::new();
    for (id, k, analytic, numeric) in results {
        let name = store.name(id);
        let err = rel_err(analytic, numeric);
        match params.last_mut() {
            Some(p) if p.name == name => {
                p.checked += 1;
                p.max_rel_err = p.max_rel_err.max(err);
            }
            _ => params.push(ParamCheck {
                name: name.to_string(),
                checked: 1,
                max_rel_err: err,
            }),
        }
        if !(err <= opts.tolerance) {
            failures.push(CoordFailure {
                name: name.to_string(),
                index: k,
                analytic,
                numeric,
                rel_err: err,
            });
        }
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        params,
        failures,
    })
}

/// Gradient check of a model's full loss on one prepared graph.
pub fn model_grad_check(
    model: &GmnModel,
    pg: &PreparedGraph,
    target: &Target,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    finite_diff_check(
        &model.store,
        |tape, store| model.loss_tape(tape, store, pg, target),
        opts,
    )
}

// ---------------------------------------------------------------------------
// Data preparation.

/// Output width implied by the task and the dataset's labels.
pub fn infer_dims(graphs: &[Graph], cfg: &TrainConfig) -> Result<ModelDims> {
    let first = graphs
        .first()
        .ok_or_else(|| GmnError::Config("empty dataset".into()))?;
    let fdim = first.feature_dim();
    let edim = first.edge_features().map_or(0, |e| e.cols);
    if graphs.iter().any(|g| g.feature_dim() != fdim) {
        return Err(GmnError::InvalidGraph("graphs disagree on feature width".into()));
    }
    if graphs.iter().any(|g| g.edge_features().map_or(0, |e| e.cols) != edim) {
        return Err(GmnError::InvalidGraph("graphs disagree on edge feature width".into()));
    }
    let outputs = match cfg.task {
        Task::GraphReg => 1,
        Task::GraphClass | Task::NodeClass => {
            let mut max = -1i64;
            for (i, g) in graphs.iter().enumerate() {
                for c in class_labels(g, cfg.task, i)?.into_iter().flatten() {
                    max = max.max(c as i64);
                }
            }
            if max < 0 {
                return Err(GmnError::Labels("no labeled examples".into()));
            }
            (max + 1).max(2) as usize
        }
    };
    Ok(ModelDims {
        in_features: fdim + cfg.pe.dim(),
        edge_features: edim,
        outputs,
    })
}

/// Class per node (`None` = unlabeled) or the single graph class.
fn class_labels(g: &Graph, task: Task, index: usize) -> Result<Vec<Option<usize>>> {
    let missing = || GmnError::Labels(format!("graph {index} has no labels for task {task:?}"));
    match (task, g.labels()) {
        (Task::NodeClass, Some(Labels::Nodes(l))) => {
            Ok(l.iter().map(|&c| (c >= 0).then_some(c as usize)).collect())
        }
        (Task::GraphClass, Some(Labels::Graph(y))) => {
            if *y < 0.0 || y.fract() != 0.0 {
                return Err(GmnError::Labels(format!(
                    "graph {index}: class label {y} is not a non-negative integer"
                )));
            }
            Ok(vec![Some(*y as usize)])
        }
        _ => Err(missing()),
    }
}

/// Examples assigned to each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    /// Graph-level tasks: graph indices. Node tasks: `(graph, node)`.
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
}

const SPLIT_TAG: u64 = 0x5917;
const EPOCH_TAG: u64 = 0xe90c;
const RESAMPLE_TAG: u64 = 0x7e5a;

/// Seeded train/validation split over graphs or labeled nodes.
pub fn split_dataset(graphs: &[Graph], cfg: &TrainConfig) -> Result<Split> {
    let mut items: Vec<(usize, usize)> = Vec::new();
    for (i, g) in graphs.iter().enumerate() {
        match cfg.task {
            Task::NodeClass => {
                for (v, c) in class_labels(g, cfg.task, i)?.into_iter().enumerate() {
                    if c.is_some() {
                        items.push((i, v));
                    }
                }
            }
            Task::GraphClass => {
                class_labels(g, cfg.task, i)?;
                items.push((i, 0));
            }
            Task::GraphReg => {
                if !matches!(g.labels(), Some(Labels::Graph(_))) {
                    return Err(GmnError::Labels(format!("graph {i} has no regression target")));
                }
                items.push((i, 0));
            }
        }
    }
    if items.is_empty() {
        return Err(GmnError::Labels("no labeled examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, SPLIT_TAG]));
    items.shuffle(&mut rng);
    let n_val = if items.len() >= 2 {
        ((items.len() as f64 * cfg.val_fraction).round() as usize).min(items.len() - 1)
    } else {
        0
    };
    let mut val = items.split_off(items.len() - n_val);
    items.sort_unstable();
    val.sort_unstable();
    Ok(Split { train: items, val })
}

/// Targets of graph `index` restricted to the split members `members`.
fn targets_for(
    g: &Graph,
    task: Task,
    index: usize,
    members: &[(usize, usize)],
) -> Result<Option<Target>> {
    let mine: Vec<usize> = members
        .iter()
        .filter(|(gi, _)| *gi == index)
        .map(|&(_, v)| v)
        .collect();
    if mine.is_empty() {
        return Ok(None);
    }
    Ok(Some(match task {
        Task::GraphReg => match g.labels() {
            Some(Labels::Graph(y)) => Target::Values(Arc::new(Matrix::filled(1, 1, *y))),
            _ => return Err(GmnError::Labels(format!("graph {index} has no target"))),
        },
        Task::GraphClass => {
            let c = class_labels(g, task, index)?[0].expect("graph class present");
            Target::Classes(Arc::new(vec![(0, c)]))
        }
        Task::NodeClass => {
            let labels = class_labels(g, task, index)?;
            Target::Classes(Arc::new(
                mine.iter()
                    .map(|&v| (v, labels[v].expect("split holds labeled nodes")))
                    .collect(),
            ))
        }
    }))
}

fn target_count(t: &Target) -> usize {
    match t {
        Target::Classes(c) => c.len(),
        Target::Values(v) => v.len(),
    }
}

/// Frozen tokens for every graph, with per-graph derived seeds.
pub fn tokenize_dataset(graphs: &[Graph], cfg: &TrainConfig, seed: u64) -> Result<Vec<Vec<TokenSequenceSpec>>> {
    let p = crate::tokenizer::TokenizerParams {
        seed,
        ..cfg.tokenizer_params()
    };
    graphs
        .iter()
        .enumerate()
        .map(|(i, g)| tokenize_graph(g, &graph_params(&p, i)))
        .collect()
}

pub fn prepare_all(
    model: &GmnModel,
    graphs: &[Graph],
    tokens: &[Vec<TokenSequenceSpec>],
) -> Result<Vec<PreparedGraph>> {
    if tokens.len() != graphs.len() {
        return Err(GmnError::Contract("one token set per graph".into()));
    }
    graphs
        .par_iter()
        .zip(tokens.par_iter())
        .map(|(g, t)| PreparedGraph::new(model, g, t))
        .collect()
}

// ---------------------------------------------------------------------------
// Metrics.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// Accuracy for classification, mean absolute error for regression.
    pub metric: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("epoch,split,loss,metric\n");
    for r in rows {
        writeln!(out, "{},{},{:e},{:e}", r.epoch, r.split, r.loss, r.metric).expect("string write");
    }
    out
}

/// Loss and task metric of `model` over the given targets.
pub fn evaluate(
    model: &GmnModel,
    prepared: &[PreparedGraph],
    targets: &[Option<Target>],
) -> Result<Option<(f64, f64)>> {
    let per_graph: Vec<Option<(f64, f64, usize)>> = prepared
        .par_iter()
        .zip(targets.par_iter())
        .map(|(pg, t)| {
            let Some(t) = t else { return Ok(None) };
            let mut tape = Tape::new();
            let enc = model.forward_tape(&mut tape, &model.store, pg)?;
            let out = model.head_tape(&mut tape, &model.store, pg, enc)?;
            let loss = match t {
                Target::Values(v) => tape.l1_loss(out, v.clone())?,
                Target::Classes(c) => tape.cross_entropy(out, c.clone())?,
            };
            let z = tape.value(out);
            let loss = tape.value(loss).data[0];
            let count = target_count(t);
            let metric_sum = match t {
                Target::Values(v) => z.data.iter().zip(&v.data).map(|(a, b)| (a - b).abs()).sum(),
                Target::Classes(c) => c
                    .iter()
                    .filter(|&&(r, cls)| argmax(z.row(r)) == cls)
                    .count() as f64,
            };
            Ok(Some((loss * count as f64, metric_sum, count)))
        })
        .collect::<Result<_>>()?;
    let (mut loss, mut metric, mut count) = (0.0, 0.0, 0usize);
    for (l, m, c) in per_graph.into_iter().flatten() {
        loss += l;
        metric += m;
        count += c;
    }
    Ok((count > 0).then(|| (loss / count as f64, metric / count as f64)))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Training.

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: GmnModel,
    pub history: Vec<MetricRow>,
    pub split: Split,
}

/// Trains on `graphs`, tokenizing them once with the config's seed.
pub fn train(graphs: &[Graph], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let tokens = tokenize_dataset(graphs, cfg, cfg.seed)?;
    train_with_tokens(graphs, cfg, tokens)
}

/// Trains with precomputed (for example cached) tokens.
pub fn train_with_tokens(
    graphs: &[Graph],
    cfg: &TrainConfig,
    tokens: Vec<Vec<TokenSequenceSpec>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = infer_dims(graphs, cfg)?;
    let mut model = GmnModel::new(cfg.clone(), dims)?;
    let split = split_dataset(graphs, cfg)?;
    let train_t: Vec<Option<Target>> = graphs
        .iter()
        .enumerate()
        .map(|(i, g)| targets_for(g, cfg.task, i, &split.train))
        .collect::<Result<_>>()?;
    let val_t: Vec<Option<Target>> = graphs
        .iter()
        .enumerate()
        .map(|(i, g)| targets_for(g, cfg.task, i, &split.val))
        .collect::<Result<_>>()?;
    let mut prepared = prepare_all(&model, graphs, &tokens)?;
    let train_graphs: Vec<usize> = (0..graphs.len()).filter(|&i| train_t[i].is_some()).collect();

    let mut history = Vec::new();
    let record = |model: &GmnModel, prepared: &[PreparedGraph], epoch: usize, history: &mut Vec<MetricRow>| -> Result<()> {
        for (name, targets) in [("train", &train_t), ("val", &val_t)] {
            if let Some((loss, metric)) = evaluate(model, prepared, targets)? {
                history.push(MetricRow {
                    epoch,
                    split: name.to_string(),
                    loss,
                    metric,
                });
            }
        }
        Ok(())
    };
    record(&model, &prepared, 0, &mut history)?;

    let mut adam = AdamState::new(&model.store);
    for epoch in 1..=cfg.epochs {
        if cfg.resample_tokens && epoch > 1 {
            let seed = derive_seed(&[cfg.seed, RESAMPLE_TAG, epoch as u64]);
            let fresh = tokenize_dataset(graphs, cfg, seed)?;
            prepared = prepare_all(&model, graphs, &fresh)?;
        }
        let mut order = train_graphs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, EPOCH_TAG, epoch as u64]));
        order.shuffle(&mut rng);
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&i| {
                    let target = train_t[i].as_ref().expect("training graph has targets");
                    let mut tape = Tape::new();
                    let loss = model.loss_tape(&mut tape, &model.store, &prepared[i], target)?;
                    let value = tape.value(loss).data[0];
                    if !value.is_finite() {
                        return Ok((value, Gradients::zeros(&model.store)));
                    }
                    Ok((value, tape.backward(loss, &model.store)?))
                })
                .collect::<Result<_>>()?;
            let mut grads = Gradients::zeros(&model.store);
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                grads.add_assign(g);
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            if !loss.is_finite() {
                return Err(GmnError::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss,
                });
            }
            grads.scale(scale);
            adam_step(&mut model.store, &grads, &mut adam, cfg.lr, &cfg.adam)?;
        }
        record(&model, &prepared, epoch, &mut history)?;
    }
    Ok(TrainOutcome {
        model,
        history,
        split,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints.

pub const CHECKPOINT_FORMAT: &str = "gmn_ckpt_v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &GmnModel) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config.clone(),
            dims: model.dims,
            tensors: model
                .store
                .iter()
                .map(|(_, name, m)| TensorRecord {
                    name: name.to_string(),
                    shape: [m.rows, m.cols],
                    data: m.data.clone(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<GmnModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(GmnError::Parse(format!("unknown checkpoint format {}", self.format)));
        }
        let mut model = GmnModel::new(self.config, self.dims)?;
        if self.tensors.len() != model.store.len() {
            return Err(GmnError::Parse(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                model.store.len()
            )));
        }
        for t in self.tensors {
            let id = model
                .store
                .id(&t.name)
                .ok_or_else(|| GmnError::Parse(format!("unexpected tensor {}", t.name)))?;
            let slot = model.store.get_mut(id);
            if [slot.rows, slot.cols] != t.shape || t.data.len() != slot.len() {
                return Err(GmnError::Parse(format!("tensor {} has the wrong shape", t.name)));
            }
            slot.data = t.data;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|source| GmnError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|source| GmnError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| GmnError::Parse(format!("checkpoint: {e}")))
    }
}
