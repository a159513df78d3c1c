//! Training configuration, read from JSON with snake_case keys.
//!
//! Fields missing from a config file take the defaults below. Values fixed
//! across every experiment of the method (`alpha = 0.1`, `beta = 0.03`,
//! `lambda = 4000`, Nesterov momentum 0.9, `K = 10`, reprediction every 75
//! epochs) are the defaults; stage lengths and network learning rates are
//! desk-scale choices.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{DataConfig, DataSource};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{Activation, Architecture};
use crate::pseudo_labels::DEFAULT_K;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.1,
            weight_decay: 5e-4,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs_per_round: usize,
    pub rounds: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    /// Epochs between repredictions; a round lasts this long.
    pub reprediction_period: usize,
    pub batch: usize,
    pub labeled_fraction_per_batch: f64,
    pub weight_decay: f64,
    /// Re-initialise unlabeled pseudo-logits from `ŷ` at every round boundary.
    pub repredict: bool,
    /// Multiply the network learning rate by `lr_decay_factor` after each round.
    pub decay_lr: bool,
    /// End a round early once the epoch-mean head gradient norm falls below this.
    pub stop_head_grad_norm: Option<f64>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs_per_round: 75,
            rounds: 3,
            lr0: 0.05,
            lr_decay_factor: 0.1,
            reprediction_period: 75,
            batch: 128,
            labeled_fraction_per_batch: 0.5,
            weight_decay: 5e-4,
            repredict: true,
            decay_lr: true,
            stop_head_grad_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage3Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            batch: 128,
            weight_decay: 5e-4,
        }
    }
}

fn default_arch() -> Architecture {
    Architecture {
        input_dim: 2,
        hidden_dims: vec![32, 32],
        num_classes: 3,
        activation: Activation::Relu,
        head_bias: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub loss: LossConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub momentum: f64,
    /// Scale of the one-hot pseudo-logits of labeled examples.
    pub pseudo_k: f64,
    pub seed: u64,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: default_arch(),
            loss: LossConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            momentum: 0.9,
            pseudo_k: DEFAULT_K,
            seed: 0,
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        self.arch.validate()?;
        self.loss.validate()?;
        let s2 = &self.stage2;
        if s2.rounds == 0 {
            return bad("stage2.rounds must be >= 1".into());
        }
        if s2.reprediction_period == 0 {
            return bad("stage2.reprediction_period must be >= 1".into());
        }
        if s2.repredict && s2.rounds > 1 && s2.reprediction_period != s2.epochs_per_round {
            return bad(format!(
                "stage2.reprediction_period ({}) must equal stage2.epochs_per_round ({}): repredictions happen at round boundaries",
                s2.reprediction_period, s2.epochs_per_round
            ));
        }
        if s2.decay_lr && !(s2.lr_decay_factor > 0.0 && s2.lr_decay_factor < 1.0) {
            return bad(format!("stage2.lr_decay_factor {} outside (0, 1)", s2.lr_decay_factor));
        }
        if !(0.0..=1.0).contains(&s2.labeled_fraction_per_batch) {
            return bad("stage2.labeled_fraction_per_batch outside [0, 1]".into());
        }
        if self.stage1.batch == 0 || s2.batch == 0 || self.stage3.batch == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        let lrs = [self.stage1.lr, s2.lr0, self.stage3.lr];
        let wds = [self.stage1.weight_decay, s2.weight_decay, self.stage3.weight_decay];
        if lrs.iter().chain(&wds).any(|v| !(*v >= 0.0)) {
            return bad("learning rates and weight decays must be >= 0".into());
        }
        if let DataSource::Blobs { n_classes, dim, .. } = &self.data.source {
            if *n_classes != self.arch.num_classes || *dim != self.arch.input_dim {
                return bad(format!(
                    "arch ({} inputs, {} classes) does not match blobs ({dim} dims, {n_classes} classes)",
                    self.arch.input_dim, self.arch.num_classes
                ));
            }
        }
        Ok(())
    }

    /// Parses a JSON config. Errors carry the line and column.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a JSON config and applies `key=value` overrides on dotted paths.
    /// Override values are read as JSON when possible, else as strings. Every
    /// key must name an existing field.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let parsed: Self = serde_json::from_str(text)?;
        if overrides.is_empty() {
            parsed.validate()?;
            return Ok(parsed);
        }
        let mut doc = serde_json::to_value(&parsed)?;
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: Self = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {assignment:?} is not KEY=VALUE")))?;
    let mut node = doc;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::InvalidConfig(format!("override key {key:?} does not exist")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
