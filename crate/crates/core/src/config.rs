//! Training and model hyperparameters, read from a single JSON document.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{GmnError, Result};
use crate::graph::OrderingMode;
use crate::posenc::PeConfig;
use crate::tokenizer::TokenizerParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    NodeClass,
    GraphClass,
    GraphReg,
}

impl Task {
    pub fn is_graph_level(self) -> bool {
        !matches!(self, Task::NodeClass)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Message passing on the whole graph, added to the node-layer output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(rename = "M")]
    pub num_walks: usize,
    pub m: usize,
    pub s: usize,
    pub n_token_layers: usize,
    pub n_node_layers: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub conv_width: usize,
    pub expansion: usize,
    pub ordering: OrderingMode,
    pub pe: PeConfig,
    pub encoder: EncoderConfig,
    pub mpnn_augment: Option<AugmentConfig>,
    pub task: Task,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Share weights between the two scan directions.
    pub tie_directions: bool,
    pub val_fraction: f64,
    /// Draw fresh walks every epoch instead of freezing them up front.
    pub resample_tokens: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_walks: 4,
            m: 2,
            s: 1,
            n_token_layers: 2,
            n_node_layers: 1,
            d_model: 16,
            d_state: 16,
            conv_width: 4,
            expansion: 2,
            ordering: OrderingMode::Degree,
            pe: PeConfig::default(),
            encoder: EncoderConfig::default(),
            mpnn_augment: None,
            task: Task::GraphClass,
            lr: 0.001,
            epochs: 100,
            batch_size: 8,
            seed: 0,
            adam: AdamConfig::default(),
            tie_directions: false,
            val_fraction: 0.2,
            resample_tokens: false,
        }
    }
}

const M_GRID: [usize; 6] = [1, 2, 4, 8, 16, 32];
const S_GRID: [usize; 6] = [0, 1, 2, 4, 8, 16];
const LAYER_GRID: [usize; 4] = [3, 4, 5, 6];
const LR_GRID: f64 = 0.001;
const MAX_EPOCHS: usize = 300;

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| GmnError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| GmnError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        TrainConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(GmnError::Config(msg));
        if self.d_model == 0 || self.d_state == 0 || self.conv_width == 0 || self.expansion == 0 {
            return fail("d_model, d_state, conv_width and expansion must be positive".into());
        }
        if self.num_walks == 0 {
            return fail("M must be at least 1".into());
        }
        if self.m > 0 && self.s == 0 {
            return fail("s = 0 is only meaningful with m = 0".into());
        }
        if self.m > 0 && self.n_token_layers == 0 {
            return fail("m >= 1 needs at least one token layer".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return fail("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        self.encoder.validate()?;
        if let Some(aug) = self.mpnn_augment {
            if aug.rounds == 0 {
                return fail("mpnn_augment.rounds must be at least 1".into());
            }
        }
        Ok(())
    }

    /// Token layers actually built: none when `m = 0`.
    pub fn token_layers(&self) -> usize {
        if self.m == 0 {
            0
        } else {
            self.n_token_layers
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expansion * self.d_model
    }

    pub fn tokenizer_params(&self) -> TokenizerParams {
        TokenizerParams {
            num_walks: self.num_walks,
            m: self.m,
            s: self.s,
            seed: self.seed,
        }
    }

    /// Human-readable notes for values outside the usual search space.
    pub fn off_grid(&self) -> Vec<String> {
        let mut notes = Vec::new();
        if !M_GRID.contains(&self.num_walks) {
            notes.push(format!("M = {} is off-grid {M_GRID:?}", self.num_walks));
        }
        if !S_GRID.contains(&self.s) {
            notes.push(format!("s = {} is off-grid {S_GRID:?}", self.s));
        }
        let layers = self.token_layers() + self.n_node_layers;
        if !LAYER_GRID.contains(&layers) {
            notes.push(format!("{layers} layers is off-grid {LAYER_GRID:?}"));
        }
        if self.lr != LR_GRID {
            notes.push(format!("lr = {} differs from {LR_GRID}", self.lr));
        }
        if self.epochs > MAX_EPOCHS {
            notes.push(format!("{} epochs exceeds {MAX_EPOCHS}", self.epochs));
        }
        notes
    }
}
