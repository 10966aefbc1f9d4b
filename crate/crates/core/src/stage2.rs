//! Classifier alignment: per-class Gaussian statistics in feature space,
//! kept across tasks in a [`StatsBank`], and fine-tuning of every head on
//! features sampled from them.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::linear::{
    apply_sgd, backward_weighted_ce, DenseMatrix, GradScope, Gradient, HeadSet, InputSpace, Model, SgdConfig,
    WeightedSample,
};
use crate::rng::Rng;
use crate::stream::{Sample, TaskData};
use crate::threshold::confident_mask;

/// Mean and covariance of one class in feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClassStatsRepr", into = "ClassStatsRepr")]
pub struct ClassStats {
    pub class_id: usize,
    pub mu: Vec<f64>,
    pub sigma: DenseMatrix,
    /// Number of samples the statistics were estimated from.
    pub support: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassStatsRepr {
    class_id: usize,
    mu: Vec<f64>,
    /// Row-major `d × d`.
    sigma: Vec<f64>,
    support: usize,
}

impl From<ClassStats> for ClassStatsRepr {
    fn from(s: ClassStats) -> Self {
        Self { class_id: s.class_id, mu: s.mu, sigma: s.sigma.as_slice().to_vec(), support: s.support }
    }
}

impl TryFrom<ClassStatsRepr> for ClassStats {
    type Error = Error;

    fn try_from(r: ClassStatsRepr) -> Result<Self> {
        let d = r.mu.len();
        Ok(Self { class_id: r.class_id, sigma: DenseMatrix::from_vec(d, d, r.sigma)?, mu: r.mu, support: r.support })
    }
}

/// Statistics of every class seen so far.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsBank {
    classes: BTreeMap<usize, ClassStats>,
}

impl StatsBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, class_id: usize) -> Option<&ClassStats> {
        self.classes.get(&class_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassStats> {
        self.classes.values()
    }

    /// Adds the statistics of a new task. Existing classes are never
    /// overwritten.
    pub fn insert_task(&mut self, stats: Vec<ClassStats>) -> Result<()> {
        if let Some(s) = stats.iter().find(|s| self.classes.contains_key(&s.class_id)) {
            return invalid(format!("class {} already has statistics", s.class_id));
        }
        for s in stats {
            self.classes.insert(s.class_id, s);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.classes.values().collect::<Vec<_>>())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let list: Vec<ClassStats> = serde_json::from_str(text)?;
        let mut bank = Self::new();
        bank.insert_task(list)?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::experiment::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    #[default]
    Full,
    /// Off-diagonal entries zeroed.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub samples_per_class_per_epoch: usize,
    pub batch_size: usize,
    /// Ridge `λ·I` added to every covariance estimate.
    pub cov_regularizer: f64,
    pub covariance: CovarianceMode,
    pub sgd: SgdConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 5,
            samples_per_class_per_epoch: 64,
            batch_size: 64,
            cov_regularizer: 1e-4,
            covariance: CovarianceMode::Full,
            sgd: SgdConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.batch_size == 0 {
            return invalid("stage-2 batch size must be >= 1");
        }
        if !(self.cov_regularizer >= 0.0) {
            return invalid("cov_regularizer must be >= 0");
        }
        Ok(())
    }
}

/// Labeled samples plus every unlabeled sample whose maximum probability
/// under the task's head exceeds `thr`, relabeled with its argmax class.
pub fn expand_label_set(task: &TaskData, model: &Model, thr: f64) -> Result<Vec<Sample>> {
    let head = model
        .heads
        .iter()
        .position(|h| h.classes == task.class_set)
        .ok_or_else(|| Error::InvalidArgument(format!("no head for task {}", task.task_id)))?;
    let probs = task
        .unlabeled
        .iter()
        .map(|s| model.probabilities(&s.features, HeadSet::Only(head), InputSpace::Raw))
        .collect::<Result<Vec<_>>>()?;
    let (mask, labels) = confident_mask(&probs, thr);
    let mut out = task.labeled.clone();
    for ((s, m), y) in task.unlabeled.iter().zip(mask).zip(labels) {
        if m {
            out.push(Sample { features: s.features.clone(), class_id: task.class_set[y], task_id: s.task_id });
        }
    }
    Ok(out)
}

/// Maps sample inputs through the feature layer of `model`.
pub fn to_feature_space(model: &Model, samples: &[Sample]) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| Ok(Sample { features: model.features(&s.features)?, class_id: s.class_id, task_id: s.task_id }))
        .collect()
}

/// Sample mean and unbiased covariance (zero for a single sample) plus
/// `reg · I` for each class of `class_set`.
pub fn estimate_stats(
    samples: &[Sample],
    class_set: &[usize],
    reg: f64,
    mode: CovarianceMode,
) -> Result<Vec<ClassStats>> {
    class_set
        .iter()
        .map(|&class_id| {
            let members: Vec<&[f64]> =
                samples.iter().filter(|s| s.class_id == class_id).map(|s| s.features.as_slice()).collect();
            let Some(first) = members.first() else {
                return invalid(format!("class {class_id} has no samples"));
            };
            let d = first.len();
            if members.iter().any(|m| m.len() != d) {
                return invalid(format!("class {class_id} mixes feature dimensions"));
            }
            let n = members.len();
            let mut mu = vec![0.0; d];
            for m in &members {
                for (a, b) in mu.iter_mut().zip(*m) {
                    *a += b;
                }
            }
            for a in &mut mu {
                *a /= n as f64;
            }
            let mut sigma = DenseMatrix::zeros(d, d);
            if n >= 2 {
                for m in &members {
                    let c: Vec<f64> = m.iter().zip(&mu).map(|(x, u)| x - u).collect();
                    sigma.add_outer(1.0 / (n - 1) as f64, &c, &c);
                }
            }
            for i in 0..d {
                for j in 0..d {
                    if i != j && mode == CovarianceMode::Diagonal {
                        sigma.set(i, j, 0.0);
                    }
                }
                sigma.set(i, i, sigma.get(i, i) + reg);
            }
            // exact symmetry despite accumulation order
            for i in 0..d {
                for j in 0..i {
                    let v = 0.5 * (sigma.get(i, j) + sigma.get(j, i));
                    sigma.set(i, j, v);
                    sigma.set(j, i, v);
                }
            }
            Ok(ClassStats { class_id, mu, sigma, support: n })
        })
        .collect()
}

/// Draws `μ + L ε` where `L Lᵀ = Σ` comes from an eigendecomposition with
/// negative eigenvalues clamped to zero.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: Vec<f64>,
    factor: DenseMatrix,
}

impl GaussianSampler {
    pub fn new(stats: &ClassStats) -> Result<Self> {
        let d = stats.mu.len();
        let sigma = &stats.sigma;
        if sigma.rows() != d || sigma.cols() != d {
            return invalid("covariance shape does not match mean");
        }
        let scale = sigma.as_slice().iter().fold(1.0f64, |a, v| a.max(v.abs()));
        if !sigma.is_symmetric(1e-9 * scale) {
            return invalid(format!("covariance of class {} is not symmetric", stats.class_id));
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, sigma.as_slice()));
        let mut factor = DenseMatrix::zeros(d, d);
        for j in 0..d {
            let root = eig.eigenvalues[j].max(0.0).sqrt();
            for i in 0..d {
                factor.set(i, j, eig.eigenvectors[(i, j)] * root);
            }
        }
        Ok(Self { mean: stats.mu.clone(), factor })
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.mean.len()).map(|_| rng.sample(StandardNormal)).collect();
        let mut z = self.factor.matvec(&eps);
        for (zi, m) in z.iter_mut().zip(&self.mean) {
            *zi += m;
        }
        z
    }
}

/// `n` draws from `N(μ, Σ)` of `stats`.
pub fn sample_gaussian(stats: &ClassStats, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let sampler = GaussianSampler::new(stats)?;
    Ok((0..n).map(|_| sampler.sample(rng)).collect())
}

/// Mean alignment loss per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub epoch_loss: Vec<f64>,
}

/// Fine-tunes every head on class-balanced Gaussian feature draws from
/// `bank`, with the softmax over all seen classes. The feature layer is
/// never touched.
pub fn align_classifiers(
    model: &mut Model,
    bank: &StatsBank,
    cfg: &Stage2Config,
    rng: &mut Rng,
) -> Result<AlignReport> {
    cfg.validate()?;
    if bank.is_empty() {
        return invalid("statistics bank is empty");
    }
    let samplers = model
        .class_ids()
        .map(|c| match bank.get(c) {
            Some(stats) => GaussianSampler::new(stats),
            None => invalid(format!("no statistics for class {c}")),
        })
        .collect::<Result<Vec<_>>>()?;

    let scope = GradScope { heads: HeadSet::All, input: InputSpace::Feature };
    let mut velocity = Gradient::zeros(model, scope);
    let mut report = AlignReport { epoch_loss: Vec::with_capacity(cfg.epochs) };
    for _ in 0..cfg.epochs {
        let mut draws: Vec<(Vec<f64>, usize)> = Vec::new();
        for (k, sampler) in samplers.iter().enumerate() {
            for _ in 0..cfg.samples_per_class_per_epoch {
                draws.push((sampler.sample(rng), k));
            }
        }
        draws.shuffle(rng);
        let mut loss = 0.0;
        let mut steps = 0;
        for chunk in draws.chunks(cfg.batch_size) {
            let batch: Vec<WeightedSample> =
                chunk.iter().map(|(z, k)| WeightedSample { input: z, target: *k, weight: 1.0 }).collect();
            let (l, grad) = backward_weighted_ce(model, &batch, scope)?;
            apply_sgd(model, &grad, &mut velocity, scope, &cfg.sgd, cfg.sgd.learning_rate)?;
            loss += l;
            steps += 1;
        }
        report.epoch_loss.push(if steps > 0 { loss / steps as f64 } else { 0.0 });
    }
    Ok(report)
}
