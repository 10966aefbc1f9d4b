//! Dense numerical kernel: matrices, softmax, cross-entropy, the linear
//! feature layer with classifier heads, analytic gradients and momentum SGD.

mod matrix;
mod model;
mod sgd;

pub use matrix::DenseMatrix;
pub use model::{
    backward_weighted_ce, forward, Activation, AffineLayer, FeatureMap, Forward, GradScope, Gradient, Head, HeadSet,
    InputSpace, LayerGrad, Model, WeightedSample,
};
pub use sgd::{apply_sgd, sgd_step, SgdConfig};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Floor applied to probabilities inside [`cross_entropy`].
pub const PROB_EPSILON: f64 = 1e-12;

/// A discrete distribution over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Wraps `values` after checking that they form a distribution.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("probability vector must not be empty");
        }
        if values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return invalid("probabilities must lie in [0, 1]");
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("probabilities sum to {total}, expected 1"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest probability.
    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// First index of the maximum of `values`. Returns 0 for an empty slice.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbabilityVector> {
    if logits.is_empty() {
        return invalid("softmax of an empty vector");
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return invalid("softmax input must be finite");
    }
    Ok(ProbabilityVector(softmax_unchecked(logits)))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// `-ln p[target]` with `p` floored at [`PROB_EPSILON`].
pub fn cross_entropy(p: &ProbabilityVector, target: usize) -> Result<f64> {
    match p.values().get(target) {
        Some(&q) => Ok(-q.max(PROB_EPSILON).ln()),
        None => invalid(format!("target class {target} out of range for {} probabilities", p.len())),
    }
}
