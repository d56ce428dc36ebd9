//! Directional Mamba blocks, the bidirectional wrapper, and the full
//! network: token encoding, token layers, node layers, optional message
//! passing, and task heads.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, ParamId, ParamStore, RowMix, Tape, Var};
use crate::config::{Task, TrainConfig};
use crate::encoder::{
    build_walk_features, mpnn_states, mpnn_tape, neighbor_mix, rwf_tape, walk_feature_width,
    Activation, EncoderConfig, MpnnVars, MpnnWeights, RwfBatch, WalkFeatures,
};
use crate::error::{GmnError, Result};
use crate::graph::{induce_subgraph, node_ordering, Graph, NodeOrdering};
use crate::posenc::{compute_pe, concat_pe};
use crate::ssm::{inverse_softplus, SsmParams};
use crate::tensor::Matrix;
use crate::tokenizer::{derive_seed, TokenSequenceSpec};

/// Parameters of one directional Mamba module.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlockWeights {
    pub ln_scale: Matrix,
    pub ln_shift: Matrix,
    /// `d_model × d_inner`.
    pub w_input: Matrix,
    /// `k × d_inner`, row `j` multiplies the input `j` steps back.
    pub conv_kernel: Matrix,
    pub conv_bias: Matrix,
    /// `d_inner × N`.
    pub w_b: Matrix,
    pub w_c: Matrix,
    /// `d_inner × d_inner`.
    pub w_delta: Matrix,
    /// `A` (`d_inner × N`) and the pre-softplus step bias.
    pub ssm: SsmParams,
    /// `d_model × d_inner`.
    pub w_gate: Matrix,
    /// `d_inner × d_model`.
    pub w_out_proj: Matrix,
}

impl MambaBlockWeights {
    pub fn d_model(&self) -> usize {
        self.w_input.rows
    }

    pub fn d_inner(&self) -> usize {
        self.w_input.cols
    }

    fn check(&self) -> Result<()> {
        let (d, di, n) = (self.d_model(), self.d_inner(), self.ssm.d_state);
        let ok = self.ln_scale.shape() == (1, d)
            && self.ln_shift.shape() == (1, d)
            && self.conv_kernel.cols == di
            && self.conv_bias.shape() == (1, di)
            && self.w_b.shape() == (di, n)
            && self.w_c.shape() == (di, n)
            && self.w_delta.shape() == (di, di)
            && self.ssm.a.shape() == (di, n)
            && self.ssm.log_delta_bias.len() == di
            && self.w_gate.shape() == (d, di)
            && self.w_out_proj.shape() == (di, d);
        if ok {
            Ok(())
        } else {
            Err(GmnError::shape("mamba_block", "inconsistent block weights"))
        }
    }

    /// Seeded random block in the same layout the trainer uses.
    pub fn random(d_model: usize, d_inner: usize, d_state: usize, conv_width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = init_block(&mut rng, d_model, d_inner, d_state, conv_width);
        raw.into_weights()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiMambaWeights {
    pub forward: MambaBlockWeights,
    pub backward: MambaBlockWeights,
    /// `d_model × d_model`.
    pub w_out: Matrix,
    pub tie_directions: bool,
}

impl BiMambaWeights {
    fn backward_block(&self) -> &MambaBlockWeights {
        if self.tie_directions {
            &self.forward
        } else {
            &self.backward
        }
    }
}

/// One stacked layer: `LayerNorm(x + bimamba(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub bimamba: BiMambaWeights,
    pub norm_scale: Matrix,
    pub norm_shift: Matrix,
}

pub(crate) struct BlockVars {
    ln_scale: Var,
    ln_shift: Var,
    w_input: Var,
    conv_kernel: Var,
    conv_bias: Var,
    w_b: Var,
    w_c: Var,
    w_delta: Var,
    delta_bias: Var,
    a: Var,
    w_gate: Var,
    w_out_proj: Var,
}

impl BlockVars {
    fn constants(tape: &mut Tape, w: &MambaBlockWeights) -> BlockVars {
        BlockVars {
            ln_scale: tape.constant(w.ln_scale.clone()),
            ln_shift: tape.constant(w.ln_shift.clone()),
            w_input: tape.constant(w.w_input.clone()),
            conv_kernel: tape.constant(w.conv_kernel.clone()),
            conv_bias: tape.constant(w.conv_bias.clone()),
            w_b: tape.constant(w.w_b.clone()),
            w_c: tape.constant(w.w_c.clone()),
            w_delta: tape.constant(w.w_delta.clone()),
            delta_bias: tape.constant(Matrix::row_vector(&w.ssm.log_delta_bias)),
            a: tape.constant(w.ssm.a.clone()),
            w_gate: tape.constant(w.w_gate.clone()),
            w_out_proj: tape.constant(w.w_out_proj.clone()),
        }
    }
}

/// A sequence layout: lengths of consecutive independent sequences.
#[derive(Clone, Debug)]
pub(crate) struct SeqPlan {
    segments: Arc<Vec<usize>>,
    reverse: Arc<RowMix>,
}

impl SeqPlan {
    fn new(segments: Vec<usize>) -> SeqPlan {
        let reverse = Arc::new(RowMix::reverse_segments(&segments));
        SeqPlan {
            segments: Arc::new(segments),
            reverse,
        }
    }
}

pub(crate) fn mamba_tape(tape: &mut Tape, x: Var, w: &BlockVars, plan: &SeqPlan) -> Result<Var> {
    let ln = tape.layer_norm(x, w.ln_scale, w.ln_shift)?;
    let xin = tape.matmul(ln, w.w_input)?;
    let conv = tape.causal_conv(xin, w.conv_kernel, w.conv_bias, plan.segments.clone())?;
    let xc = tape.silu(conv);
    let b = tape.matmul(xc, w.w_b)?;
    let c = tape.matmul(xc, w.w_c)?;
    let dt = tape.matmul(xc, w.w_delta)?;
    let dt = tape.add_row(dt, w.delta_bias)?;
    let delta = tape.softplus(dt);
    let y = tape.selective_scan(xc, delta, w.a, b, c, plan.segments.clone())?;
    let gate_in = tape.matmul(ln, w.w_gate)?;
    let gate = tape.silu(gate_in);
    let gated = tape.mul(y, gate)?;
    tape.matmul(gated, w.w_out_proj)
}

pub(crate) fn bimamba_tape(
    tape: &mut Tape,
    x: Var,
    fwd: &BlockVars,
    bwd: &BlockVars,
    w_out: Var,
    plan: &SeqPlan,
) -> Result<Var> {
    let yf = mamba_tape(tape, x, fwd, plan)?;
    let xr = tape.row_mix(x, plan.reverse.clone())?;
    let yb = mamba_tape(tape, xr, bwd, plan)?;
    let yb = tape.row_mix(yb, plan.reverse.clone())?;
    let sum = tape.add(yf, yb)?;
    tape.matmul(sum, w_out)
}

fn check_sequence(x: &Matrix, d: usize) -> Result<()> {
    if x.rows == 0 || x.cols != d {
        return Err(GmnError::shape(
            "mamba_block",
            format!("sequence {}x{} for d_model {d}", x.rows, x.cols),
        ));
    }
    Ok(())
}

/// One directional block on a single sequence (`L×d_model`).
pub fn mamba_block(x: &Matrix, w: &MambaBlockWeights) -> Result<Matrix> {
    w.check()?;
    check_sequence(x, w.d_model())?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = BlockVars::constants(&mut tape, w);
    let y = mamba_tape(&mut tape, xv, &vars, &SeqPlan::new(vec![x.rows]))?;
    Ok(tape.value(y).clone())
}

/// `W_out·(fwd(x) + reverse(bwd(reverse(x))))` on a single sequence.
pub fn bimamba(x: &Matrix, w: &BiMambaWeights) -> Result<Matrix> {
    w.forward.check()?;
    w.backward_block().check()?;
    check_sequence(x, w.forward.d_model())?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = BlockVars::constants(&mut tape, &w.forward);
    let bwd = BlockVars::constants(&mut tape, w.backward_block());
    let w_out = tape.constant(w.w_out.clone());
    let y = bimamba_tape(&mut tape, xv, &fwd, &bwd, w_out, &SeqPlan::new(vec![x.rows]))?;
    Ok(tape.value(y).clone())
}

/// `LayerNorm(x + bimamba(x))` on a single sequence.
pub fn stacked_layer(x: &Matrix, w: &LayerWeights) -> Result<Matrix> {
    w.bimamba.forward.check()?;
    w.bimamba.backward_block().check()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    check_sequence(x, w.bimamba.forward.d_model())?;
    let vars = LayerVars {
        fwd: BlockVars::constants(&mut tape, &w.bimamba.forward),
        bwd: Some(BlockVars::constants(&mut tape, w.bimamba.backward_block())),
        w_out: tape.constant(w.bimamba.w_out.clone()),
        norm_scale: tape.constant(w.norm_scale.clone()),
        norm_shift: tape.constant(w.norm_shift.clone()),
    };
    let y = layer_tape(&mut tape, xv, &vars, &SeqPlan::new(vec![x.rows]))?;
    Ok(tape.value(y).clone())
}

struct LayerVars {
    fwd: BlockVars,
    /// `None` when directions are tied.
    bwd: Option<BlockVars>,
    w_out: Var,
    norm_scale: Var,
    norm_shift: Var,
}

fn layer_tape(tape: &mut Tape, x: Var, w: &LayerVars, plan: &SeqPlan) -> Result<Var> {
    let bwd = w.bwd.as_ref().unwrap_or(&w.fwd);
    let y = bimamba_tape(tape, x, &w.fwd, bwd, w.w_out, plan)?;
    let sum = tape.add(x, y)?;
    tape.layer_norm(sum, w.norm_scale, w.norm_shift)
}

/// Per-node message passing on the whole graph.
pub fn mpnn_augment(g: &Graph, features: &Matrix, weights: &MpnnWeights) -> Result<Matrix> {
    mpnn_states(g, features, weights)
}

/// Task head: `W`, `b` map `d_model` to the number of outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Node-level: per-node softmax. Graph-level: mean pool, then the linear
/// head (softmax for classification, raw values for regression).
pub fn readout(encodings: &Matrix, task: Task, head: &HeadWeights) -> Result<Matrix> {
    if encodings.rows == 0 {
        return Err(GmnError::shape("readout", "no node encodings"));
    }
    let pooled = match task {
        Task::NodeClass => encodings.clone(),
        _ => RowMix::segment_mean(&[encodings.rows]).apply(encodings)?,
    };
    let mut tape = Tape::new();
    let x = tape.constant(pooled);
    let w = tape.constant(head.weight.clone());
    let b = tape.constant(head.bias.clone());
    let z = tape.matmul(x, w)?;
    let z = tape.add_row(z, b)?;
    let z = tape.value(z);
    Ok(match task {
        Task::GraphReg => z.clone(),
        _ => softmax_rows(z),
    })
}

// ---------------------------------------------------------------------------
// Parameter layout and initialization.

struct RawBlock {
    ln_scale: Matrix,
    ln_shift: Matrix,
    w_input: Matrix,
    conv_kernel: Matrix,
    conv_bias: Matrix,
    w_b: Matrix,
    w_c: Matrix,
    w_delta: Matrix,
    delta_bias: Matrix,
    a_log: Matrix,
    w_gate: Matrix,
    w_out_proj: Matrix,
}

impl RawBlock {
    fn into_weights(self) -> MambaBlockWeights {
        let a = Matrix {
            rows: self.a_log.rows,
            cols: self.a_log.cols,
            data: self.a_log.data.iter().map(|v| -v.exp()).collect(),
        };
        MambaBlockWeights {
            ssm: SsmParams {
                d_state: a.cols,
                d_model: a.rows,
                a,
                log_delta_bias: self.delta_bias.data,
            },
            ln_scale: self.ln_scale,
            ln_shift: self.ln_shift,
            w_input: self.w_input,
            conv_kernel: self.conv_kernel,
            conv_bias: self.conv_bias,
            w_b: self.w_b,
            w_c: self.w_c,
            w_delta: self.w_delta,
            w_gate: self.w_gate,
            w_out_proj: self.w_out_proj,
        }
    }

    fn entries(self) -> [(&'static str, Matrix); 12] {
        [
            ("ln_scale", self.ln_scale),
            ("ln_shift", self.ln_shift),
            ("w_input", self.w_input),
            ("conv_kernel", self.conv_kernel),
            ("conv_bias", self.conv_bias),
            ("w_b", self.w_b),
            ("w_c", self.w_c),
            ("w_delta", self.w_delta),
            ("delta_bias", self.delta_bias),
            ("a_log", self.a_log),
            ("w_gate", self.w_gate),
            ("w_out_proj", self.w_out_proj),
        ]
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
        .collect();
    Matrix {
        rows,
        cols,
        data,
    }
}

fn fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    uniform(rng, rows, cols, 1.0 / (rows.max(1) as f64).sqrt())
}

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

fn init_block(rng: &mut ChaCha8Rng, d: usize, di: usize, n: usize, k: usize) -> RawBlock {
    let mut a_log = Matrix::zeros(di, n);
    for c in 0..di {
        for s in 0..n {
            a_log.set(c, s, ((s + 1) as f64).ln());
        }
    }
    let delta_bias = Matrix::row_vector(
        &(0..di)
            .map(|_| {
                let dt = rng.gen_range(DT_MIN.ln()..DT_MAX.ln()).exp();
                inverse_softplus(dt)
            })
            .collect::<Vec<_>>(),
    );
    let conv_bound = 1.0 / (k as f64).sqrt();
    RawBlock {
        ln_scale: Matrix::filled(1, d, 1.0),
        ln_shift: Matrix::zeros(1, d),
        w_input: fan_in(rng, d, di),
        conv_kernel: uniform(rng, k, di, conv_bound),
        conv_bias: uniform(rng, 1, di, conv_bound),
        w_b: fan_in(rng, di, n),
        w_c: fan_in(rng, di, n),
        w_delta: fan_in(rng, di, di),
        delta_bias,
        a_log,
        w_gate: fan_in(rng, d, di),
        w_out_proj: fan_in(rng, di, d),
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln_scale: ParamId,
    ln_shift: ParamId,
    w_input: ParamId,
    conv_kernel: ParamId,
    conv_bias: ParamId,
    w_b: ParamId,
    w_c: ParamId,
    w_delta: ParamId,
    delta_bias: ParamId,
    a_log: ParamId,
    w_gate: ParamId,
    w_out_proj: ParamId,
}

impl BlockIds {
    fn register(store: &mut ParamStore, prefix: &str, raw: RawBlock) -> BlockIds {
        let ids: Vec<ParamId> = raw
            .entries()
            .into_iter()
            .map(|(name, m)| store.add(format!("{prefix}.{name}"), m))
            .collect();
        BlockIds {
            ln_scale: ids[0],
            ln_shift: ids[1],
            w_input: ids[2],
            conv_kernel: ids[3],
            conv_bias: ids[4],
            w_b: ids[5],
            w_c: ids[6],
            w_delta: ids[7],
            delta_bias: ids[8],
            a_log: ids[9],
            w_gate: ids[10],
            w_out_proj: ids[11],
        }
    }

    fn vars(&self, tape: &mut Tape, store: &ParamStore) -> BlockVars {
        let a_log = tape.param(store, self.a_log);
        BlockVars {
            ln_scale: tape.param(store, self.ln_scale),
            ln_shift: tape.param(store, self.ln_shift),
            w_input: tape.param(store, self.w_input),
            conv_kernel: tape.param(store, self.conv_kernel),
            conv_bias: tape.param(store, self.conv_bias),
            w_b: tape.param(store, self.w_b),
            w_c: tape.param(store, self.w_c),
            w_delta: tape.param(store, self.w_delta),
            delta_bias: tape.param(store, self.delta_bias),
            a: tape.neg_exp(a_log),
            w_gate: tape.param(store, self.w_gate),
            w_out_proj: tape.param(store, self.w_out_proj),
        }
    }

    fn weights(&self, store: &ParamStore) -> MambaBlockWeights {
        let g = |id| store.get(id).clone();
        RawBlock {
            ln_scale: g(self.ln_scale),
            ln_shift: g(self.ln_shift),
            w_input: g(self.w_input),
            conv_kernel: g(self.conv_kernel),
            conv_bias: g(self.conv_bias),
            w_b: g(self.w_b),
            w_c: g(self.w_c),
            w_delta: g(self.w_delta),
            delta_bias: g(self.delta_bias),
            a_log: g(self.a_log),
            w_gate: g(self.w_gate),
            w_out_proj: g(self.w_out_proj),
        }
        .into_weights()
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    fwd: BlockIds,
    bwd: Option<BlockIds>,
    w_out: ParamId,
    norm_scale: ParamId,
    norm_shift: ParamId,
}

impl LayerIds {
    fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &TrainConfig) -> Self {
        let (d, di, n, k) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.conv_width);
        let fwd = BlockIds::register(store, &format!("{prefix}.fwd"), init_block(rng, d, di, n, k));
        let bwd = (!cfg.tie_directions).then(|| {
            BlockIds::register(store, &format!("{prefix}.bwd"), init_block(rng, d, di, n, k))
        });
        LayerIds {
            fwd,
            bwd,
            w_out: store.add(format!("{prefix}.w_out"), fan_in(rng, d, d)),
            norm_scale: store.add(format!("{prefix}.norm_scale"), Matrix::filled(1, d, 1.0)),
            norm_shift: store.add(format!("{prefix}.norm_shift"), Matrix::zeros(1, d)),
        }
    }

    fn vars(&self, tape: &mut Tape, store: &ParamStore) -> LayerVars {
        LayerVars {
            fwd: self.fwd.vars(tape, store),
            bwd: self.bwd.as_ref().map(|b| b.vars(tape, store)),
            w_out: tape.param(store, self.w_out),
            norm_scale: tape.param(store, self.norm_scale),
            norm_shift: tape.param(store, self.norm_shift),
        }
    }

    fn weights(&self, store: &ParamStore) -> LayerWeights {
        let forward = self.fwd.weights(store);
        let backward = self.bwd.as_ref().map_or_else(|| forward.clone(), |b| b.weights(store));
        LayerWeights {
            bimamba: BiMambaWeights {
                forward,
                backward,
                w_out: store.get(self.w_out).clone(),
                tie_directions: self.bwd.is_none(),
            },
            norm_scale: store.get(self.norm_scale).clone(),
            norm_shift: store.get(self.norm_shift).clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct MpnnIds {
    w_self: ParamId,
    w_nbr: ParamId,
    bias: ParamId,
}

impl MpnnIds {
    fn register_stack(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        d: usize,
        rounds: usize,
    ) -> Vec<MpnnIds> {
        (0..rounds)
            .map(|r| {
                let rows = if r == 0 { in_dim } else { d };
                MpnnIds {
                    w_self: store.add(format!("{prefix}.{r}.w_self"), fan_in(rng, rows, d)),
                    w_nbr: store.add(format!("{prefix}.{r}.w_nbr"), fan_in(rng, rows, d)),
                    bias: store.add(format!("{prefix}.{r}.bias"), Matrix::zeros(1, d)),
                }
            })
            .collect()
    }

    fn vars(ids: &[MpnnIds], tape: &mut Tape, store: &ParamStore) -> Vec<MpnnVars> {
        ids.iter()
            .map(|l| MpnnVars {
                w_self: tape.param(store, l.w_self),
                w_nbr: tape.param(store, l.w_nbr),
                bias: tape.param(store, l.bias),
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
enum EncoderIds {
    /// `m = 0`: tokens are a linear projection of node features.
    Projection { weight: ParamId, bias: ParamId },
    Rwf { kernel: ParamId, bias: ParamId },
    Mpnn { layers: Vec<MpnnIds>, activation: Activation },
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: EncoderIds,
    token_layers: Vec<LayerIds>,
    node_layers: Vec<LayerIds>,
    augment: Vec<MpnnIds>,
    head_weight: ParamId,
    head_bias: ParamId,
}

/// Input and output widths fixed by the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Node feature width after positional encodings are appended.
    pub in_features: usize,
    pub edge_features: usize,
    pub outputs: usize,
}

const INIT_TAG: u64 = 0x1417;

#[derive(Clone, Debug)]
pub struct GmnModel {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub store: ParamStore,
    layout: Layout,
}

impl GmnModel {
    /// Fresh model with seeded initialization.
    pub fn new(config: TrainConfig, dims: ModelDims) -> Result<GmnModel> {
        config.validate()?;
        if dims.in_features == 0 || dims.outputs == 0 {
            return Err(GmnError::Config("model needs input features and outputs".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, INIT_TAG]));
        let mut store = ParamStore::new();
        let d = config.d_model;
        let encoder = if config.m == 0 {
            EncoderIds::Projection {
                weight: store.add("encoder.proj.weight", fan_in(&mut rng, dims.in_features, d)),
                bias: store.add("encoder.proj.bias", Matrix::zeros(1, d)),
            }
        } else {
            match config.encoder {
                EncoderConfig::Rwf { window } => {
                    let rows = window * walk_feature_width(dims.in_features, dims.edge_features, window);
                    EncoderIds::Rwf {
                        kernel: store.add("encoder.rwf.kernel", fan_in(&mut rng, rows, d)),
                        bias: store.add("encoder.rwf.bias", Matrix::zeros(1, d)),
                    }
                }
                EncoderConfig::Mpnn { rounds, activation } => EncoderIds::Mpnn {
                    layers: MpnnIds::register_stack(
                        &mut store,
                        &mut rng,
                        "encoder.mpnn",
                        dims.in_features,
                        d,
                        rounds,
                    ),
                    activation,
                },
            }
        };
        let token_layers = (0..config.token_layers())
            .map(|i| LayerIds::register(&mut store, &mut rng, &format!("token.{i}"), &config))
            .collect();
        let node_layers = (0..config.n_node_layers)
            .map(|i| LayerIds::register(&mut store, &mut rng, &format!("node.{i}"), &config))
            .collect();
        let head_weight = store.add("head.weight", fan_in(&mut rng, d, dims.outputs));
        let head_bias = store.add("head.bias", Matrix::zeros(1, dims.outputs));
        // Drawn last so that toggling augmentation leaves every other
        // tensor's initialization unchanged.
        let augment = config.mpnn_augment.map_or_else(Vec::new, |aug| {
            MpnnIds::register_stack(&mut store, &mut rng, "augment", dims.in_features, d, aug.rounds)
        });
        Ok(GmnModel {
            config,
            dims,
            store,
            layout: Layout {
                encoder,
                token_layers,
                node_layers,
                augment,
                head_weight,
                head_bias,
            },
        })
    }

    pub fn token_layer_weights(&self) -> Vec<LayerWeights> {
        self.layout.token_layers.iter().map(|l| l.weights(&self.store)).collect()
    }

    pub fn node_layer_weights(&self) -> Vec<LayerWeights> {
        self.layout.node_layers.iter().map(|l| l.weights(&self.store)).collect()
    }

    pub fn head_weights(&self) -> HeadWeights {
        HeadWeights {
            weight: self.store.get(self.layout.head_weight).clone(),
            bias: self.store.get(self.layout.head_bias).clone(),
        }
    }

    /// `(weight, bias)` of the `m = 0` token projection.
    pub fn projection_weights(&self) -> Option<(Matrix, Matrix)> {
        match &self.layout.encoder {
            EncoderIds::Projection { weight, bias } => {
                Some((self.store.get(*weight).clone(), self.store.get(*bias).clone()))
            }
            _ => None,
        }
    }

    pub fn augment_weights(&self) -> Option<MpnnWeights> {
        (!self.layout.augment.is_empty()).then(|| MpnnWeights {
            layers: self
                .layout
                .augment
                .iter()
                .map(|l| crate::encoder::MpnnLayer {
                    w_self: self.store.get(l.w_self).clone(),
                    w_nbr: self.store.get(l.w_nbr).clone(),
                    bias: self.store.get(l.bias).clone(),
                })
                .collect(),
            activation: Activation::Silu,
        })
    }

    /// Token vectors (one row per token, in sequence order) on `tape`.
    fn encode_tokens(&self, tape: &mut Tape, store: &ParamStore, pg: &PreparedGraph) -> Result<Var> {
        match (&self.layout.encoder, &pg.tokens) {
            (EncoderIds::Projection { weight, bias }, TokenInput::Nodes) => {
                let x = tape.constant(pg.features.clone());
                let w = tape.param(store, *weight);
                let b = tape.param(store, *bias);
                let h = tape.matmul(x, w)?;
                tape.add_row(h, b)
            }
            (EncoderIds::Rwf { kernel, bias }, TokenInput::Rwf { unfolded, pool }) => {
                let u = tape.constant(unfolded.clone());
                let k = tape.param(store, *kernel);
                let b = tape.param(store, *bias);
                rwf_tape(tape, u, pool.clone(), k, b)
            }
            (EncoderIds::Mpnn { layers, activation }, TokenInput::Mpnn { x, nbr, pool }) => {
                let xv = tape.constant(x.clone());
                let vars = MpnnIds::vars(layers, tape, store);
                let h = mpnn_tape(tape, xv, nbr, &vars, *activation)?;
                tape.row_mix(h, pool.clone())
            }
            _ => Err(GmnError::Contract(
                "prepared graph was built for a different encoder".into(),
            )),
        }
    }

    /// Node encodings (`n×d_model`) recorded on `tape` with parameters
    /// read from `store`.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, pg: &PreparedGraph) -> Result<Var> {
        let mut h = self.encode_tokens(tape, store, pg)?;
        if let Some(plan) = &pg.token_plan {
            for layer in &self.layout.token_layers {
                let vars = layer.vars(tape, store);
                h = layer_tape(tape, h, &vars, plan)?;
            }
            h = tape.row_mix(h, pg.last_token.clone())?;
        }
        if !self.layout.node_layers.is_empty() {
            let mut seq = tape.row_mix(h, pg.order.clone())?;
            for layer in &self.layout.node_layers {
                let vars = layer.vars(tape, store);
                seq = layer_tape(tape, seq, &vars, &pg.node_plan)?;
            }
            h = tape.row_mix(seq, pg.unorder.clone())?;
        }
        if !self.layout.augment.is_empty() {
            let x = tape.constant(pg.features.clone());
            let vars = MpnnIds::vars(&self.layout.augment, tape, store);
            let psi = mpnn_tape(tape, x, &pg.graph_nbr, &vars, Activation::Silu)?;
            h = tape.add(h, psi)?;
        }
        Ok(h)
    }

    /// Logits (classification) or predictions (regression): one row per
    /// node for node tasks, a single row for graph tasks.
    pub fn head_tape(&self, tape: &mut Tape, store: &ParamStore, pg: &PreparedGraph, enc: Var) -> Result<Var> {
        let x = if self.config.task.is_graph_level() {
            tape.row_mix(enc, pg.mean_pool.clone())?
        } else {
            enc
        };
        let w = tape.param(store, self.layout.head_weight);
        let b = tape.param(store, self.layout.head_bias);
        let z = tape.matmul(x, w)?;
        tape.add_row(z, b)
    }

    /// Scalar training loss for one graph.
    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pg: &PreparedGraph,
        target: &Target,
    ) -> Result<Var> {
        let enc = self.forward_tape(tape, store, pg)?;
        let out = self.head_tape(tape, store, pg, enc)?;
        match (self.config.task, target) {
            (Task::GraphReg, Target::Values(v)) => tape.l1_loss(out, v.clone()),
            (Task::NodeClass | Task::GraphClass, Target::Classes(c)) => {
                tape.cross_entropy(out, c.clone())
            }
            _ => Err(GmnError::Labels("target kind does not match the task".into())),
        }
    }

    /// Node encodings as a plain matrix.
    pub fn encode(&self, pg: &PreparedGraph) -> Result<Matrix> {
        let mut tape = Tape::new();
        let h = self.forward_tape(&mut tape, &self.store, pg)?;
        Ok(tape.value(h).clone())
    }

    /// Raw head outputs (logits or regression values).
    pub fn predict(&self, pg: &PreparedGraph) -> Result<Matrix> {
        let mut tape = Tape::new();
        let h = self.forward_tape(&mut tape, &self.store, pg)?;
        let z = self.head_tape(&mut tape, &self.store, pg, h)?;
        Ok(tape.value(z).clone())
    }

    /// Checks that `pg` was prepared for this model's sequence layout.
    pub fn accepts(&self, pg: &PreparedGraph) -> bool {
        pg.features.cols == self.dims.in_features
            && (pg.token_plan.is_some() == (self.config.m > 0))
    }
}

/// Supervision for one graph.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// `(row, class)` pairs; rows are nodes or `0` for graph tasks.
    Classes(Arc<Vec<(usize, usize)>>),
    Values(Arc<Matrix>),
}

#[derive(Clone, Debug)]
enum TokenInput {
    Nodes,
    Rwf {
        unfolded: Matrix,
        pool: Arc<RowMix>,
    },
    Mpnn {
        x: Matrix,
        nbr: Arc<RowMix>,
        pool: Arc<RowMix>,
    },
}

/// Everything about one graph that does not depend on the weights: the
/// feature matrix `X‖P`, the frozen token inputs and the row maps that
/// arrange sequences.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub num_nodes: usize,
    pub features: Matrix,
    tokens: TokenInput,
    token_plan: Option<SeqPlan>,
    last_token: Arc<RowMix>,
    node_plan: SeqPlan,
    order: Arc<RowMix>,
    unorder: Arc<RowMix>,
    graph_nbr: Arc<RowMix>,
    mean_pool: Arc<RowMix>,
}

fn check_tokens(cfg: &TrainConfig, tokens: &[TokenSequenceSpec], n: usize) -> Result<()> {
    if tokens.len() != n {
        return Err(GmnError::Contract(format!(
            "{} token sequences for {n} nodes",
            tokens.len()
        )));
    }
    let expected = cfg.s * cfg.m + 1;
    for (v, spec) in tokens.iter().enumerate() {
        spec.validate()?;
        if spec.origin != v {
            return Err(GmnError::Contract(format!(
                "sequence {v} belongs to node {}",
                spec.origin
            )));
        }
        let max_len = spec.tokens.iter().map(|t| t.length).max().unwrap_or(0);
        if spec.tokens.len() != expected || max_len != cfg.m {
            return Err(GmnError::Contract(format!(
                "node {v}: {} tokens up to length {max_len}, config wants {expected} up to {}",
                spec.tokens.len(),
                cfg.m
            )));
        }
        if spec.tokens.iter().any(|t| t.walks.len() != cfg.num_walks) {
            return Err(GmnError::Contract(format!("node {v}: walk count differs from M")));
        }
    }
    Ok(())
}

impl PreparedGraph {
    /// Uses the ordering mode from the model's config.
    pub fn new(model: &GmnModel, g: &Graph, tokens: &[TokenSequenceSpec]) -> Result<PreparedGraph> {
        let ordering = node_ordering(g, model.config.ordering)?;
        PreparedGraph::with_ordering(model, g, tokens, &ordering)
    }

    pub fn with_ordering(
        model: &GmnModel,
        g: &Graph,
        tokens: &[TokenSequenceSpec],
        ordering: &NodeOrdering,
    ) -> Result<PreparedGraph> {
        let cfg = &model.config;
        let n = g.num_nodes();
        if n == 0 {
            return Err(GmnError::InvalidGraph("graph has no nodes".into()));
        }
        if !ordering.is_valid(n) {
            return Err(GmnError::Contract("node ordering is not a permutation".into()));
        }
        let pe = compute_pe(g, &cfg.pe)?;
        let gx = concat_pe(g, &pe)?;
        let features = gx.node_features().clone();
        if features.cols != model.dims.in_features {
            return Err(GmnError::shape(
                "gmn_forward",
                format!(
                    "graph has {} feature columns with encodings, model expects {}",
                    features.cols, model.dims.in_features
                ),
            ));
        }
        let edge_dim = g.edge_features().map_or(0, |e| e.cols);
        if edge_dim != model.dims.edge_features {
            return Err(GmnError::shape("gmn_forward", "edge feature width differs from model"));
        }
        let (tokens, token_plan, last_token) = if cfg.m == 0 {
            (TokenInput::Nodes, None, Arc::new(RowMix::new(0)))
        } else {
            check_tokens(cfg, tokens, n)?;
            let len = cfg.s * cfg.m + 1;
            let input = match cfg.encoder {
                EncoderConfig::Rwf { window } => rwf_input(&gx, tokens, window)?,
                EncoderConfig::Mpnn { .. } => mpnn_input(&gx, tokens)?,
            };
            let last: Vec<usize> = (0..n).map(|v| v * len + len - 1).collect();
            (
                input,
                Some(SeqPlan::new(vec![len; n])),
                Arc::new(RowMix::gather(n * len, &last)),
            )
        };
        let perm = &ordering.permutation;
        let mut inverse = vec![0; n];
        for (k, &v) in perm.iter().enumerate() {
            inverse[v] = k;
        }
        Ok(PreparedGraph {
            num_nodes: n,
            features,
            tokens,
            token_plan,
            last_token,
            node_plan: SeqPlan::new(vec![n]),
            order: Arc::new(RowMix::gather(n, perm)),
            unorder: Arc::new(RowMix::gather(n, &inverse)),
            graph_nbr: Arc::new(neighbor_mix(g)),
            mean_pool: Arc::new(RowMix::segment_mean(&[n])),
        })
    }
}

fn rwf_input(gx: &Graph, tokens: &[TokenSequenceSpec], window: usize) -> Result<TokenInput> {
    let per_node: Vec<Vec<Vec<WalkFeatures>>> = tokens
        .par_iter()
        .map(|spec| {
            spec.tokens
                .iter()
                .map(|t| {
                    t.walks
                        .iter()
                        .map(|w| build_walk_features(gx, w, window))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let edge_dim = gx.edge_features().map_or(0, |e| e.cols);
    let width = window * walk_feature_width(gx.feature_dim(), edge_dim, window);
    let batch = RwfBatch::build(per_node.iter().flatten().map(Vec::as_slice), width)?;
    Ok(TokenInput::Rwf {
        unfolded: batch.unfolded,
        pool: Arc::new(batch.pool),
    })
}

fn mpnn_input(gx: &Graph, tokens: &[TokenSequenceSpec]) -> Result<TokenInput> {
    let subs = tokens
        .iter()
        .flat_map(|spec| spec.tokens.iter())
        .map(|t| induce_subgraph(gx, &t.visited).map(|s| s.graph))
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = subs.iter().map(Graph::num_nodes).collect();
    let blocks: Vec<Matrix> = subs.iter().map(|s| s.node_features().clone()).collect();
    let total: usize = sizes.iter().sum();
    let mut nbr = RowMix::new(total);
    let mut offset = 0;
    for sub in &subs {
        for v in 0..sub.num_nodes() {
            let nb = sub.neighbors(v);
            let w = 1.0 / nb.len().max(1) as f64;
            nbr.push_row(nb.iter().map(|&u| (offset + u, w)));
        }
        offset += sub.num_nodes();
    }
    Ok(TokenInput::Mpnn {
        x: Matrix::vstack(&blocks)?,
        nbr: Arc::new(nbr),
        pool: Arc::new(RowMix::segment_mean(&sizes)),
    })
}

/// Node encodings of `g` under `model`, for explicit tokens and ordering.
pub fn gmn_forward(
    g: &Graph,
    model: &GmnModel,
    tokens: &[TokenSequenceSpec],
    ordering: &NodeOrdering,
) -> Result<Matrix> {
    let pg = PreparedGraph::with_ordering(model, g, tokens, ordering)?;
    model.encode(&pg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators;
    use crate::graph::OrderingMode;
    use crate::posenc::PeConfig;
    use crate::tokenizer::tokenize_graph;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(&mut rng, rows, cols, 1.0)
    }

    fn zero_block(d: usize, di: usize, n: usize) -> MambaBlockWeights {
        let mut w = MambaBlockWeights::random(d, di, n, 4, 1);
        w.conv_bias = Matrix::zeros(1, di);
        w
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let w = zero_block(4, 8, 3);
        let y = mamba_block(&Matrix::zeros(5, 4), &w).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn single_step_matches_hand_composition() {
        let w = MambaBlockWeights::random(3, 6, 2, 4, 7);
        let x = random_matrix(1, 3, 11);
        let got = mamba_block(&x, &w).unwrap();

        let row = x.row(0);
        let mean = row.iter().sum::<f64>() / 3.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        let ln: Vec<f64> = (0..3)
            .map(|c| (row[c] - mean) / (var + 1e-5).sqrt() * w.ln_scale.data[c] + w.ln_shift.data[c])
            .collect();
        let ln = Matrix::row_vector(&ln);
        let xin = ln.matmul(&w.w_input).unwrap();
        let silu = crate::autodiff::silu;
        let xc: Vec<f64> = (0..6)
            .map(|c| silu(w.conv_bias.data[c] + w.conv_kernel.get(0, c) * xin.data[c]))
            .collect();
        let xc = Matrix::row_vector(&xc);
        let b = xc.matmul(&w.w_b).unwrap();
        let cm = xc.matmul(&w.w_c).unwrap();
        let dt = xc.matmul(&w.w_delta).unwrap();
        let gate = ln.matmul(&w.w_gate).unwrap();
        let mut y = vec![0.0; 6];
        for c in 0..6 {
            let delta = crate::ssm::softplus(dt.data[c] + w.ssm.log_delta_bias[c]);
            for s in 0..2 {
                let (_, scale) = crate::ssm::zoh(delta, w.ssm.a.get(c, s));
                // h_1 = B̄·x since h_0 = 0.
                y[c] += cm.data[s] * scale * b.data[s] * xc.data[c];
            }
            y[c] *= silu(gate.data[c]);
        }
        let want = Matrix::row_vector(&y).matmul(&w.w_out_proj).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-14, "{got:?} vs {want:?}");
    }

    #[test]
    fn causal_in_time() {
        let w = MambaBlockWeights::random(3, 6, 4, 4, 2);
        let x = random_matrix(7, 3, 3);
        let base = mamba_block(&x, &w).unwrap();
        for t in 0..7 {
            let mut xp = x.clone();
            xp.data[t * 3 + 1] += 0.5;
            let y = mamba_block(&xp, &w).unwrap();
            for r in 0..7 {
                let changed = y.row(r) != base.row(r);
                assert_eq!(changed, r >= t, "row {r} after perturbing {t}");
            }
        }
    }

    fn tied(seed: u64) -> BiMambaWeights {
        let forward = MambaBlockWeights::random(4, 8, 3, 4, seed);
        BiMambaWeights {
            backward: forward.clone(),
            forward,
            w_out: random_matrix(4, 4, seed + 1),
            tie_directions: true,
        }
    }

    #[test]
    fn bimamba_examples() {
        let w = tied(5);
        let x = random_matrix(1, 4, 6);
        let y = bimamba(&x, &w).unwrap();
        let single = mamba_block(&x, &w.forward).unwrap();
        let mut doubled = single.clone();
        doubled.data.iter_mut().for_each(|v| *v *= 2.0);
        let want = doubled.matmul(&w.w_out).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-14);

        let x = random_matrix(6, 4, 7);
        let lhs = bimamba(&x.reversed_rows(), &w).unwrap();
        let rhs = bimamba(&x, &w).unwrap().reversed_rows();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-12);

        let untied = BiMambaWeights {
            backward: MambaBlockWeights::random(4, 8, 3, 4, 99),
            tie_directions: false,
            ..w.clone()
        };
        let fwd_only = mamba_block(&x, &untied.forward).unwrap().matmul(&untied.w_out).unwrap();
        let both = bimamba(&x, &untied).unwrap();
        assert!(fwd_only.max_abs_diff(&both) > 1e-6);
        assert!(bimamba(&Matrix::zeros(3, 5), &w).is_err());
    }

    #[test]
    fn readout_examples() {
        let enc = random_matrix(3, 4, 1);
        let zero = HeadWeights {
            weight: Matrix::zeros(4, 5),
            bias: Matrix::zeros(1, 5),
        };
        let p = readout(&enc, Task::NodeClass, &zero).unwrap();
        assert!(p.data.iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let head = HeadWeights {
            weight: random_matrix(4, 3, 2),
            bias: random_matrix(1, 3, 3),
        };
        let p = readout(&enc, Task::NodeClass, &head).unwrap();
        for r in 0..3 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        let e = Matrix::row_vector(&[0.3, -1.0, 2.0, 0.5]);
        let same = Matrix::vstack(&[e.clone(), e.clone(), e.clone()]).unwrap();
        let reg = HeadWeights {
            weight: random_matrix(4, 1, 4),
            bias: Matrix::filled(1, 1, 0.25),
        };
        let got = readout(&same, Task::GraphReg, &reg).unwrap();
        let want = e.matmul(&reg.weight).unwrap().data[0] + 0.25;
        assert!((got.data[0] - want).abs() < 1e-14);
    }

    fn tiny_config(m: usize) -> TrainConfig {
        TrainConfig {
            num_walks: 3,
            m,
            s: if m == 0 { 0 } else { 2 },
            n_token_layers: 1,
            n_node_layers: 1,
            d_model: 4,
            d_state: 3,
            pe: PeConfig::Rwse { k: 3 },
            ordering: OrderingMode::Degree,
            task: Task::NodeClass,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    fn dims(outputs: usize) -> ModelDims {
        ModelDims {
            in_features: 1 + 3,
            edge_features: 0,
            outputs,
        }
    }

    #[test]
    fn output_shape_for_any_sampling() {
        let g = generators::cycle(6);
        for (m, s) in [(0, 0), (1, 1), (2, 3)] {
            for encoder in [EncoderConfig::Rwf { window: 2 }, EncoderConfig::Mpnn { rounds: 2, activation: Activation::Silu }] {
                let cfg = TrainConfig { s, encoder, ..tiny_config(m) };
                let model = GmnModel::new(cfg.clone(), dims(2)).unwrap();
                let tokens = tokenize_graph(&g, &cfg.tokenizer_params()).unwrap();
                let ordering = node_ordering(&g, cfg.ordering).unwrap();
                let out = gmn_forward(&g, &model, &tokens, &ordering).unwrap();
                assert_eq!(out.shape(), (6, 4));
                assert!(out.is_finite());
            }
        }
    }

    #[test]
    fn single_node_m0_is_one_bimamba_layer() {
        let g = Graph::new(1, &[]).unwrap();
        let cfg = tiny_config(0);
        let model = GmnModel::new(cfg, dims(2)).unwrap();
        let ordering = NodeOrdering::identity(1);
        let out = gmn_forward(&g, &model, &[], &ordering).unwrap();
        let (w, b) = model.projection_weights().unwrap();
        let x = Matrix::row_vector(&[1.0, 0.0, 0.0, 0.0]);
        let mut h = x.matmul(&w).unwrap();
        h.add_assign(&b);
        let want = stacked_layer(&h, &model.node_layer_weights()[0]).unwrap();
        assert_eq!(out, want);
    }

    #[test]
    fn misplaced_length_zero_token_is_rejected() {
        let g = generators::cycle(5);
        let cfg = tiny_config(2);
        let model = GmnModel::new(cfg.clone(), dims(2)).unwrap();
        let mut tokens = tokenize_graph(&g, &cfg.tokenizer_params()).unwrap();
        let pg = PreparedGraph::new(&model, &g, &tokens);
        assert!(pg.is_ok());
        tokens[2].tokens.swap(0, 4);
        let err = PreparedGraph::new(&model, &g, &tokens).unwrap_err();
        assert!(matches!(err, GmnError::TokenOrder(_)), "{err}");
    }

    #[test]
    fn permuting_inner_tokens_changes_the_encoding() {
        let g = generators::path(5);
        let cfg = TrainConfig { n_node_layers: 0, ..tiny_config(2) };
        let model = GmnModel::new(cfg.clone(), dims(2)).unwrap();
        let tokens = tokenize_graph(&g, &cfg.tokenizer_params()).unwrap();
        let base = model.encode(&PreparedGraph::new(&model, &g, &tokens).unwrap()).unwrap();
        let mut swapped = tokens.clone();
        assert_ne!(swapped[2].tokens[0].walks, swapped[2].tokens[1].walks);
        swapped[2].tokens.swap(0, 1);
        let out = model.encode(&PreparedGraph::new(&model, &g, &swapped).unwrap()).unwrap();
        assert!((0..4).any(|c| (out.get(2, c) - base.get(2, c)).abs() > 1e-9));
        assert!((0..5).filter(|&v| v != 2).all(|v| out.row(v) == base.row(v)));
    }

    #[test]
    fn zero_augmentation_changes_nothing() {
        let g = generators::cycle(5);
        let cfg = TrainConfig {
            mpnn_augment: Some(crate::config::AugmentConfig { rounds: 2 }),
            ..tiny_config(1)
        };
        let mut model = GmnModel::new(cfg.clone(), dims(2)).unwrap();
        let tokens = tokenize_graph(&g, &cfg.tokenizer_params()).unwrap();
        let pg = PreparedGraph::new(&model, &g, &tokens).unwrap();
        let ids: Vec<ParamId> = model
            .store
            .iter()
            .filter(|(_, name, _)| name.starts_with("augment."))
            .map(|(id, _, _)| id)
            .collect();
        for id in ids {
            model.store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let psi = mpnn_augment(&g, &pg.features, &model.augment_weights().unwrap()).unwrap();
        assert_eq!(psi.max_abs(), 0.0);
        let plain = GmnModel::new(TrainConfig { mpnn_augment: None, ..cfg }, dims(2)).unwrap();
        let want = plain.encode(&PreparedGraph::new(&plain, &g, &tokens).unwrap()).unwrap();
        assert_eq!(model.encode(&pg).unwrap(), want);
    }

    #[test]
    fn augmentation_on_edgeless_graph_uses_self_path_only() {
        let g = Graph::new(3, &[]).unwrap();
        let x = Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let w = |nbr: f64| MpnnWeights {
            layers: vec![crate::encoder::MpnnLayer {
                w_self: Matrix::filled(1, 2, 0.5),
                w_nbr: Matrix::filled(1, 2, nbr),
                bias: Matrix::zeros(1, 2),
            }],
            activation: Activation::Silu,
        };
        assert_eq!(mpnn_augment(&g, &x, &w(0.0)).unwrap(), mpnn_augment(&g, &x, &w(9.0)).unwrap());
    }

    #[test]
    fn twin_nodes_get_equal_encodings() {
        // Nodes 0 and 1 of a 4-cycle are swapped by the reflection 0↔1,
        // 2↔3. Mirroring node 0's walks onto node 1 makes the two token
        // sequences images of each other.
        let g = generators::cycle(4);
        let cfg = TrainConfig { n_node_layers: 0, ..tiny_config(2) };
        let model = GmnModel::new(cfg.clone(), dims(2)).unwrap();
        let mut tokens = tokenize_graph(&g, &cfg.tokenizer_params()).unwrap();
        let mirror = [1usize, 0, 3, 2];
        let mut twin = tokens[0].clone();
        twin.origin = 1;
        for t in &mut twin.tokens {
            t.origin = 1;
            for w in &mut t.walks {
                w.iter_mut().for_each(|v| *v = mirror[*v]);
            }
            t.visited = t.visited.iter().map(|&v| mirror[v]).collect();
            t.visited.sort_unstable();
        }
        tokens[1] = twin;
        let out = model.encode(&PreparedGraph::new(&model, &g, &tokens).unwrap()).unwrap();
        for c in 0..4 {
            assert!((out.get(0, c) - out.get(1, c)).abs() < 1e-12);
        }
    }
}
