use serde::{Deserialize, Serialize};

use super::model::{GradScope, Gradient, Model};
use crate::error::{invalid, Result};

/// Momentum SGD with weight decay folded into the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 0.005, momentum: 0.9, weight_decay: 5e-3 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return invalid(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        Ok(())
    }
}

/// One update over a flat parameter slice:
/// `v ← momentum·v + g + decay·θ`, `θ ← θ − lr·v`.
///
/// `lr` is passed separately so schedules can scale it; `decay` selects
/// whether weight decay applies (weights yes, biases no).
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    cfg: &SgdConfig,
    lr: f64,
    decay: bool,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return invalid(format!(
            "shape mismatch: {} params, {} grads, {} velocity",
            params.len(),
            grads.len(),
            velocity.len()
        ));
    }
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Applies [`sgd_step`] to every parameter in `scope`. `velocity` must have
/// been created with [`Gradient::zeros`] for the same scope.
pub fn apply_sgd(
    model: &mut Model,
    grad: &Gradient,
    velocity: &mut Gradient,
    scope: GradScope,
    cfg: &SgdConfig,
    lr: f64,
) -> Result<()> {
    // weights, bias alternate in both the parameter visit and the gradient layout
    let grads = layer_slices(grad);
    let mut vels = layer_slices_mut(velocity);
    if grads.len() != vels.len() {
        return invalid("gradient and velocity layouts differ");
    }
    let mut idx = 0;
    let mut result = Ok(());
    model.visit_params_mut(scope, |params| {
        if result.is_err() {
            return;
        }
        if idx >= grads.len() {
            result = invalid("gradient has fewer blocks than the parameter scope");
            return;
        }
        let decay = idx % 2 == 0;
        result = sgd_step(params, grads[idx], vels[idx], cfg, lr, decay);
        idx += 1;
    });
    result?;
    if idx != grads.len() {
        return invalid("gradient has more blocks than the parameter scope");
    }
    Ok(())
}

fn layer_slices(g: &Gradient) -> Vec<&[f64]> {
    g.feature.iter().chain(g.heads.iter().flatten()).flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()]).collect()
}

fn layer_slices_mut(g: &mut Gradient) -> Vec<&mut [f64]> {
    g.feature
        .iter_mut()
        .chain(g.heads.iter_mut().flatten())
        .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
        .collect()
}
