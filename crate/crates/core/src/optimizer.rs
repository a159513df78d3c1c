//! SGD with Nesterov momentum for network weights, plain gradient descent for
//! pseudo-logits.
//!
//! The Nesterov step is the look-ahead form
//!
//! ```text
//! d ← g + wd·θ          (wd on weight matrices only)
//! v ← μ·v − lr·d
//! θ ← θ + μ·v − lr·d
//! ```
//!
//! Pseudo-logits use `ỹ ← ỹ − λ·∂L/∂ỹ` with no momentum and no decay.

use crate::error::{invalid_input, Error, Result};
use crate::model::{ModelParams, ParamGrads, TensorKind};
use crate::pseudo_labels::PseudoTable;

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: ParamGrads,
}

impl OptState {
    pub fn new(params: &ModelParams, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid_input!("momentum {momentum} outside [0, 1)"));
        }
        if !(lr >= 0.0) || !(weight_decay >= 0.0) {
            return Err(invalid_input!("lr and weight decay must be >= 0"));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: ParamGrads::zeros_like(params),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn velocity(&self) -> &ParamGrads {
        &self.velocity
    }
}

/// One Nesterov update of a single tensor.
pub fn nesterov_update(theta: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let d = g + weight_decay * *t;
        *v = momentum * *v - lr * d;
        *t += momentum * *v - lr * d;
    }
}

pub fn sgd_nesterov_step(params: &mut ModelParams, grads: &ParamGrads, state: &mut OptState) -> Result<()> {
    let (lr, mu, wd) = (state.lr, state.momentum, state.weight_decay);
    let grads = grads.tensors();
    let mut velocity = state.velocity.tensors_mut();
    let mut tensors = params.tensors_mut();
    if grads.len() != tensors.len() || velocity.len() != tensors.len() {
        return Err(invalid_input!("gradient layout does not match parameters"));
    }
    for ((theta, kind), ((g, _), (v, _))) in tensors.iter_mut().zip(grads.iter().zip(velocity.iter_mut())) {
        if theta.len() != g.len() || theta.len() != v.len() {
            return Err(invalid_input!("gradient shape does not match parameters"));
        }
        let decay = if *kind == TensorKind::Weight { wd } else { 0.0 };
        nesterov_update(theta, g, v, lr, mu, decay);
    }
    Ok(())
}

/// Multiplies the network learning rate by `factor`. Velocities are kept.
pub fn decay_lr(state: &mut OptState, factor: f64) -> Result<()> {
    if !(factor > 0.0 && factor < 1.0) {
        return Err(invalid_input!("decay factor {factor} outside (0, 1)"));
    }
    state.lr *= factor;
    Ok(())
}

/// `ỹ_i ← ỹ_i − λ·g_i` for every `(i, g_i)` on an unfrozen row. Frozen rows
/// are skipped. Returns the largest change of a row sum `|Σỹ_after − Σỹ_before|`.
pub fn pseudo_step(table: &mut PseudoTable, grads: &[(usize, Vec<f64>)], lambda: f64) -> Result<f64> {
    let n = table.num_classes();
    let mut max_change: f64 = 0.0;
    for (i, g) in grads {
        if *i >= table.len() || g.len() != n {
            return Err(invalid_input!("pseudo gradient for row {i} has the wrong shape"));
        }
        if table.is_frozen(*i) {
            continue;
        }
        let row = table.row_mut(*i).map_err(|e| Error::InvalidState(e.to_string()))?;
        let before: f64 = row.iter().sum();
        for (y, gn) in row.iter_mut().zip(g) {
            *y -= lambda * gn;
        }
        let after: f64 = row.iter().sum();
        max_change = max_change.max((after - before).abs());
    }
    Ok(max_change)
}
