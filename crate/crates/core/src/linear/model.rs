use serde::{Deserialize, Serialize};

use super::matrix::{axpy, DenseMatrix};
use super::{cross_entropy, softmax_unchecked, ProbabilityVector};
use crate::error::{invalid, Result};

/// Fixed nonlinearity applied after the affine feature layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

/// `act(W x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub trainable: bool,
}

impl AffineLayer {
    /// Square layer initialised to the identity map.
    pub fn identity_init(dim: usize, activation: Activation, trainable: bool) -> Self {
        Self { weights: DenseMatrix::identity(dim), bias: vec![0.0; dim], activation, trainable }
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.weights.matvec(x);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o = self.activation.apply(*o + b);
        }
        out
    }
}

/// The feature map applied before the classifier heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    Identity { dim: usize },
    Affine(AffineLayer),
}

impl FeatureMap {
    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Affine(l) => l.weights.cols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Affine(l) => l.weights.rows(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, FeatureMap::Affine(l) if l.trainable)
    }
}

/// One task's linear classifier over the feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    /// Global class ids, in logit order.
    pub classes: Vec<usize>,
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Head {
    pub fn zeros(classes: Vec<usize>, feature_dim: usize) -> Self {
        let n = classes.len();
        Self { classes, weights: DenseMatrix::zeros(n, feature_dim), bias: vec![0.0; n] }
    }

    fn logits(&self, features: &[f64]) -> Vec<f64> {
        let mut z = self.weights.matvec(features);
        for (zi, b) in z.iter_mut().zip(&self.bias) {
            *zi += b;
        }
        z
    }
}

/// Feature map plus one classifier head per task seen so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub feature: FeatureMap,
    pub heads: Vec<Head>,
}

/// Which heads take part in the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSet {
    All,
    Only(usize),
}

/// Whether batch inputs are raw inputs (passed through the feature map) or
/// already live in feature space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSpace {
    Raw,
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradScope {
    pub heads: HeadSet,
    pub input: InputSpace,
}

/// Output of [`forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// Logits of every registered head, concatenated in head order.
    pub logits: Vec<f64>,
    /// Softmax over the logits of the requested head set.
    pub probs: ProbabilityVector,
}

impl Model {
    pub fn new(feature: FeatureMap) -> Self {
        Self { feature, heads: Vec::new() }
    }

    pub fn input_dim(&self) -> usize {
        self.feature.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature.output_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.heads.iter().map(|h| h.classes.len()).sum()
    }

    /// Registers a zero-initialised head and returns its index.
    pub fn add_head(&mut self, classes: Vec<usize>) -> usize {
        self.heads.push(Head::zeros(classes, self.feature_dim()));
        self.heads.len() - 1
    }

    /// Global class ids in concatenated logit order.
    pub fn class_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.heads.iter().flat_map(|h| h.classes.iter().copied())
    }

    /// Position of a global class id in the concatenated logits.
    pub fn logit_index(&self, class_id: usize) -> Option<usize> {
        self.class_ids().position(|c| c == class_id)
    }

    fn head_offset(&self, head: usize) -> usize {
        self.heads[..head].iter().map(|h| h.classes.len()).sum()
    }

    /// Applies the feature map.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return invalid(format!("input has dimension {}, model expects {}", x.len(), self.input_dim()));
        }
        Ok(match &self.feature {
            FeatureMap::Identity { .. } => x.to_vec(),
            FeatureMap::Affine(l) => l.eval(x),
        })
    }

    /// Concatenated logits of all heads for a feature vector.
    pub fn head_logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim() {
            return invalid(format!("feature has dimension {}, heads expect {}", features.len(), self.feature_dim()));
        }
        Ok(self.heads.iter().flat_map(|h| h.logits(features)).collect())
    }

    fn active_range(&self, heads: HeadSet) -> Result<std::ops::Range<usize>> {
        if self.heads.is_empty() {
            return invalid("model has no classifier heads");
        }
        match heads {
            HeadSet::All => Ok(0..self.num_classes()),
            HeadSet::Only(h) if h < self.heads.len() => {
                let start = self.head_offset(h);
                Ok(start..start + self.heads[h].classes.len())
            }
            HeadSet::Only(h) => invalid(format!("head {h} is not registered")),
        }
    }

    /// Softmax over `heads` for an input given in `space`.
    pub fn probabilities(&self, x: &[f64], heads: HeadSet, space: InputSpace) -> Result<ProbabilityVector> {
        let f = match space {
            InputSpace::Raw => self.features(x)?,
            InputSpace::Feature => x.to_vec(),
        };
        let range = self.active_range(heads)?;
        let logits = self.head_logits(&f)?;
        Ok(ProbabilityVector(softmax_unchecked(&logits[range])))
    }

    /// Top-1 global class id over all heads.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let p = self.probabilities(x, HeadSet::All, InputSpace::Raw)?;
        Ok(self.class_ids().nth(p.argmax()).expect("argmax within class range"))
    }

    /// Visits every trainable parameter slice in gradient order: the feature
    /// layer (weights, bias) when trainable, then each head (weights, bias).
    pub fn visit_params_mut(&mut self, scope: GradScope, mut f: impl FnMut(&mut [f64])) {
        if scope.input == InputSpace::Raw {
            if let FeatureMap::Affine(l) = &mut self.feature {
                if l.trainable {
                    f(l.weights.as_mut_slice());
                    f(&mut l.bias);
                }
            }
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            if head_active(scope.heads, i) {
                f(h.weights.as_mut_slice());
                f(&mut h.bias);
            }
        }
    }
}

fn head_active(set: HeadSet, i: usize) -> bool {
    match set {
        HeadSet::All => true,
        HeadSet::Only(h) => h == i,
    }
}

/// Forward pass: logits from every head and probabilities over `heads`.
pub fn forward(model: &Model, x: &[f64], heads: HeadSet) -> Result<Forward> {
    let f = model.features(x)?;
    let logits = model.head_logits(&f)?;
    let range = model.active_range(heads)?;
    let probs = ProbabilityVector(softmax_unchecked(&logits[range]));
    Ok(Forward { logits, probs })
}

/// Gradient of one affine block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { weights: DenseMatrix::zeros(rows, cols), bias: vec![0.0; rows] }
    }

    fn add_assign(&mut self, other: &LayerGrad) {
        axpy(1.0, other.weights.as_slice(), self.weights.as_mut_slice());
        axpy(1.0, &other.bias, &mut self.bias);
    }
}

/// Gradient with the same layout as the trainable parameters of a [`Model`].
/// Entries are `None` for parameters outside the gradient scope.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub feature: Option<LayerGrad>,
    pub heads: Vec<Option<LayerGrad>>,
}

impl Gradient {
    pub fn zeros(model: &Model, scope: GradScope) -> Self {
        let feature = match (&model.feature, scope.input) {
            (FeatureMap::Affine(l), InputSpace::Raw) if l.trainable => {
                Some(LayerGrad::zeros(l.weights.rows(), l.weights.cols()))
            }
            _ => None,
        };
        let heads = model
            .heads
            .iter()
            .enumerate()
            .map(|(i, h)| head_active(scope.heads, i).then(|| LayerGrad::zeros(h.classes.len(), model.feature_dim())))
            .collect();
        Self { feature, heads }
    }

    /// Elementwise sum; both gradients must share a scope.
    pub fn add_assign(&mut self, other: &Gradient) {
        if let (Some(a), Some(b)) = (&mut self.feature, &other.feature) {
            a.add_assign(b);
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            if let (Some(a), Some(b)) = (a, b) {
                a.add_assign(b);
            }
        }
    }

    /// All entries in [`Model::visit_params_mut`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let layers = self.feature.iter().chain(self.heads.iter().flatten());
        for l in layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|g| *g == 0.0)
    }
}

/// One term of a weighted cross-entropy batch. `target` indexes the softmax
/// of the active head set.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSample<'a> {
    pub input: &'a [f64],
    pub target: usize,
    pub weight: f64,
}

/// Loss `(1/|batch|) Σ wᵢ H(pᵢ, yᵢ)` and its analytic gradient with respect
/// to every parameter in `scope`.
pub fn backward_weighted_ce(model: &Model, batch: &[WeightedSample<'_>], scope: GradScope) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let range = model.active_range(scope.heads)?;
    let mut grad = Gradient::zeros(model, scope);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;

    for s in batch {
        if s.weight < 0.0 || !s.weight.is_finite() {
            return invalid(format!("sample weight {} must be finite and >= 0", s.weight));
        }
        if s.target >= range.len() {
            return invalid(format!("target {} out of range for {} active classes", s.target, range.len()));
        }
        let feats = match scope.input {
            InputSpace::Raw => model.features(s.input)?,
            InputSpace::Feature => {
                if s.input.len() != model.feature_dim() {
                    return invalid("feature dimension mismatch");
                }
                s.input.to_vec()
            }
        };
        let logits = model.head_logits(&feats)?;
        let probs = ProbabilityVector(softmax_unchecked(&logits[range.clone()]));
        loss += scale * s.weight * cross_entropy(&probs, s.target)?;
        if s.weight == 0.0 {
            continue;
        }

        // dL/dz over the active logits
        let mut delta = probs.into_inner();
        delta[s.target] -= 1.0;
        for d in &mut delta {
            *d *= scale * s.weight;
        }

        let mut dfeat = grad.feature.is_some().then(|| vec![0.0; model.feature_dim()]);
        let mut offset = range.start;
        for (i, head) in model.heads.iter().enumerate() {
            let n = head.classes.len();
            let Some(g) = grad.heads[i].as_mut() else {
                continue;
            };
            let local = &delta[offset - range.start..offset - range.start + n];
            g.weights.add_outer(1.0, local, &feats);
            axpy(1.0, local, &mut g.bias);
            if let Some(df) = dfeat.as_mut() {
                axpy(1.0, &head.weights.matvec_t(local), df);
            }
            offset += n;
        }

        if let (Some(df), Some(g), FeatureMap::Affine(l)) = (dfeat, grad.feature.as_mut(), &model.feature) {
            let dpre: Vec<f64> =
                df.iter().zip(&feats).map(|(d, f)| d * l.activation.derivative_from_output(*f)).collect();
            g.weights.add_outer(1.0, &dpre, s.input);
            axpy(1.0, &dpre, &mut g.bias);
        }
    }
    Ok((loss, grad))
}
