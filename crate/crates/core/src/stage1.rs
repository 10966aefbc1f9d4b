//! Feature-representation learning on one task: warmup on the labeled loss,
//! then class-weighted supervised plus confidence-gated pseudo-label losses,
//! with the class-weight histogram refreshed after every epoch.

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linear::{
    apply_sgd, backward_weighted_ce, GradScope, Gradient, HeadSet, InputSpace, Model, ProbabilityVector, SgdConfig,
    WeightedSample,
};
use crate::rng::Rng;
use crate::stream::{augment, Sample, TaskData};
use crate::threshold::{confident_mask, ThresholdSchedule};

/// Normalized confident-sample histogram `ζ` and the derived class weights
/// `ζ̄ = 2 − ζ`, indexed by position in the task's class set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeightState {
    zeta: Vec<f64>,
    zeta_bar: Vec<f64>,
}

impl ClassWeightState {
    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    pub fn zeta_bar(&self) -> &[f64] {
        &self.zeta_bar
    }

    pub fn num_classes(&self) -> usize {
        self.zeta.len()
    }

    /// Max-normalizes `counts` into `ζ`. All-zero counts leave the state as is.
    pub fn with_counts(&self, counts: &[usize]) -> Result<Self> {
        if counts.len() != self.zeta.len() {
            return invalid(format!("histogram has {} bins, state has {} classes", counts.len(), self.zeta.len()));
        }
        let max = counts.iter().copied().max().unwrap_or(0);
        if max == 0 {
            return Ok(self.clone());
        }
        let zeta: Vec<f64> = counts.iter().map(|&c| c as f64 / max as f64).collect();
        let zeta_bar = zeta.iter().map(|z| 2.0 - z).collect();
        Ok(Self { zeta, zeta_bar })
    }

    /// Weight for a class given by its position in the task class set.
    pub fn weight(&self, local_class: usize) -> Result<f64> {
        match self.zeta_bar.get(local_class) {
            Some(w) => Ok(*w),
            None => invalid(format!("class index {local_class} out of range for {} task classes", self.zeta_bar.len())),
        }
    }
}

/// Uniform start: `ζ = 1`, hence `ζ̄ = 1` for every class.
pub fn init_class_weights(num_classes: usize) -> Result<ClassWeightState> {
    if num_classes == 0 {
        return invalid("class weight state needs at least one class");
    }
    Ok(ClassWeightState { zeta: vec![1.0; num_classes], zeta_bar: vec![1.0; num_classes] })
}

/// Per-sample weights `w^l = ζ̄[y]` and `w^ul = ζ̄[argmax p]`.
pub fn assign_weights(
    state: &ClassWeightState,
    labeled_targets: &[usize],
    pseudo_labels: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let lookup = |ys: &[usize]| ys.iter().map(|&y| state.weight(y)).collect::<Result<Vec<_>>>();
    Ok((lookup(labeled_targets)?, lookup(pseudo_labels)?))
}

/// Outcome of gating a set of unlabeled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidentCounts {
    /// Confident samples per pseudo-label.
    pub per_class: Vec<usize>,
    pub total: usize,
    /// Confident samples whose pseudo-label matches the hidden class.
    pub correct: usize,
}

impl ConfidentCounts {
    pub fn confident(&self) -> usize {
        self.per_class.iter().sum()
    }

    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.confident() as f64 / self.total as f64
        }
    }

    pub fn precision(&self) -> Option<f64> {
        let n = self.confident();
        (n > 0).then(|| self.correct as f64 / n as f64)
    }
}

/// Gates `unlabeled` under the softmax of `head` and counts pseudo-labels.
/// Hidden labels are read only to fill [`ConfidentCounts::correct`].
pub fn confident_counts(model: &Model, head: usize, unlabeled: &[Sample], thr: f64) -> Result<ConfidentCounts> {
    let probs = head_probabilities(model, head, unlabeled.iter().map(|s| s.features.as_slice()))?;
    let (mask, labels) = confident_mask(&probs, thr);
    let classes = &model.heads[head].classes;
    let mut per_class = vec![0; classes.len()];
    let mut correct = 0;
    for ((m, y), s) in mask.iter().zip(&labels).zip(unlabeled) {
        if *m {
            per_class[*y] += 1;
            if classes[*y] == s.class_id {
                correct += 1;
            }
        }
    }
    Ok(ConfidentCounts { per_class, total: unlabeled.len(), correct })
}

/// Recomputes `ζ` from the confident pseudo-labels of `unlabeled`.
pub fn update_histogram(
    state: &ClassWeightState,
    model: &Model,
    head: usize,
    unlabeled: &[Sample],
    thr: f64,
) -> Result<ClassWeightState> {
    state.with_counts(&confident_counts(model, head, unlabeled, thr)?.per_class)
}

fn head_probabilities<'a>(
    model: &Model,
    head: usize,
    xs: impl Iterator<Item = &'a [f64]>,
) -> Result<Vec<ProbabilityVector>> {
    xs.map(|x| model.probabilities(x, HeadSet::Only(head), InputSpace::Raw)).collect()
}

/// How the gated unsupervised term is averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnsupMean {
    /// Mean over the samples that pass the threshold.
    #[default]
    Gated,
    /// Sum over gated samples divided by the full unlabeled batch size.
    FullBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    /// Labeled-only steps before the first epoch. `None` means as many
    /// steps as one epoch has.
    pub warmup_iterations: Option<usize>,
    pub batch_size_labeled: usize,
    pub batch_size_unlabeled: usize,
    /// Learning rate is divided by `lr_drop_factor` after this epoch.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    /// Standard deviation of the feature noise used as augmentation.
    pub augment_noise: f64,
    pub unsup_mean: UnsupMean,
    pub sgd: SgdConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 10,
            warmup_iterations: None,
            batch_size_labeled: 16,
            batch_size_unlabeled: 32,
            lr_drop_epoch: 8,
            lr_drop_factor: 10.0,
            augment_noise: 0.5,
            unsup_mean: UnsupMean::Gated,
            sgd: SgdConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.batch_size_labeled == 0 || self.batch_size_unlabeled == 0 {
            return invalid("stage-1 batch sizes must be >= 1");
        }
        if self.lr_drop_epoch > self.epochs {
            return invalid(format!("lr_drop_epoch {} exceeds epochs {}", self.lr_drop_epoch, self.epochs));
        }
        if !(self.lr_drop_factor > 0.0) {
            return invalid("lr_drop_factor must be > 0");
        }
        if !(self.augment_noise >= 0.0) {
            return invalid("augment_noise must be >= 0");
        }
        Ok(())
    }
}

/// One stage-1 minibatch. `augmented[i]` is the perturbed copy of
/// `unlabeled[i]`; labeled targets index the task class set.
#[derive(Debug, Clone)]
pub struct Stage1Batch<'a> {
    pub labeled: Vec<(&'a [f64], usize)>,
    pub unlabeled: Vec<&'a [f64]>,
    pub augmented: Vec<&'a [f64]>,
}

#[derive(Debug, Clone)]
pub struct Stage1Step {
    pub loss: f64,
    pub grad: Gradient,
    /// Unlabeled samples that passed the threshold.
    pub gated: usize,
}

/// Total stage-1 loss of a batch and its gradient over `head` (and a
/// trainable feature layer):
///
/// `mean_l(w^l · H(p^l, y)) + mean_gated(w^ul · H(p̂^ul, argmax p^ul))`
///
/// Pseudo-labels come from the clean inputs, the loss from the augmented
/// ones. `weights = None` means every weight is 1.
pub fn stage1_loss(
    model: &Model,
    head: usize,
    batch: &Stage1Batch<'_>,
    thr: f64,
    weights: Option<&ClassWeightState>,
    unsup_mean: UnsupMean,
) -> Result<Stage1Step> {
    if batch.unlabeled.len() != batch.augmented.len() {
        return invalid("every unlabeled sample needs exactly one augmented copy");
    }
    let scope = GradScope { heads: HeadSet::Only(head), input: InputSpace::Raw };
    let probs = head_probabilities(model, head, batch.unlabeled.iter().copied())?;
    let (mask, pseudo) = confident_mask(&probs, thr);
    let targets: Vec<usize> = batch.labeled.iter().map(|(_, y)| *y).collect();
    let (w_l, w_ul) = match weights {
        Some(state) => assign_weights(state, &targets, &pseudo)?,
        None => (vec![1.0; targets.len()], vec![1.0; pseudo.len()]),
    };

    let sup: Vec<WeightedSample> = batch
        .labeled
        .iter()
        .zip(&w_l)
        .map(|(&(input, target), &weight)| WeightedSample { input, target, weight })
        .collect();
    let (mut loss, mut grad) = backward_weighted_ce(model, &sup, scope)?;

    let gated = mask.iter().filter(|m| **m).count();
    if gated > 0 {
        let rescale = match unsup_mean {
            UnsupMean::Gated => 1.0,
            UnsupMean::FullBatch => gated as f64 / mask.len() as f64,
        };
        let unsup: Vec<WeightedSample> = (0..mask.len())
            .filter(|&j| mask[j])
            .map(|j| WeightedSample { input: batch.augmented[j], target: pseudo[j], weight: w_ul[j] * rescale })
            .collect();
        let (loss_u, grad_u) = backward_weighted_ce(model, &unsup, scope)?;
        loss += loss_u;
        grad.add_assign(&grad_u);
    }
    Ok(Stage1Step { loss, grad, gated })
}

/// Diagnostics of one stage-1 run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub threshold: f64,
    /// Confident fraction of the unlabeled pool after warmup.
    pub warmup_confident_fraction: f64,
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Confident fraction of the unlabeled pool after each epoch.
    pub confident_fraction: Vec<f64>,
    /// Share of confident pseudo-labels that match the hidden class.
    pub pseudo_label_precision: Vec<Option<f64>>,
    pub zeta_bar: Vec<f64>,
}

/// Trains the most recently added head (and a trainable feature layer) on
/// `task`. Earlier heads are left untouched.
///
/// `class_weights` enables the `ζ̄` weighting of both loss terms; when off
/// every weight is 1 while the histogram is still tracked for the report.
pub fn train_task_stage1(
    model: &mut Model,
    task: &TaskData,
    sched: &ThresholdSchedule,
    cfg: &Stage1Config,
    class_weights: bool,
    rng: &mut Rng,
) -> Result<Stage1Report> {
    cfg.validate()?;
    if task.labeled.is_empty() {
        return invalid(format!("task {} has no labeled samples", task.task_id));
    }
    let head = match model.heads.len() {
        0 => return invalid("model has no head for the current task"),
        n => n - 1,
    };
    if model.heads[head].classes != task.class_set {
        return invalid("current head does not match the task class set");
    }
    let targets: Vec<usize> = task
        .labeled
        .iter()
        .map(|s| {
            task.local_index(s.class_id)
                .ok_or_else(|| crate::Error::InvalidArgument(format!("labeled class {} not in task", s.class_id)))
        })
        .collect::<Result<_>>()?;

    let thr = sched.threshold_at(task.task_id)?;
    let scope = GradScope { heads: HeadSet::Only(head), input: InputSpace::Raw };
    let mut velocity = Gradient::zeros(model, scope);
    let mut state = init_class_weights(task.class_set.len())?;
    let n_l = task.labeled.len();
    let n_ul = task.unlabeled.len();
    let b_l = cfg.batch_size_labeled.min(n_l);
    let mut lr = cfg.sgd.learning_rate;

    let iterations = n_ul.div_ceil(cfg.batch_size_unlabeled).max(1);
    let warmup = cfg.warmup_iterations.unwrap_or(iterations);
    for _ in 0..warmup {
        let idx = index::sample(rng, n_l, b_l);
        let batch: Vec<WeightedSample> = idx
            .iter()
            .map(|i| WeightedSample { input: &task.labeled[i].features, target: targets[i], weight: 1.0 })
            .collect();
        let (_, grad) = backward_weighted_ce(model, &batch, scope)?;
        apply_sgd(model, &grad, &mut velocity, scope, &cfg.sgd, lr)?;
    }
    let warmup_confident_fraction = confident_counts(model, head, &task.unlabeled, thr)?.fraction();

    let mut report = Stage1Report {
        threshold: thr,
        warmup_confident_fraction,
        epoch_loss: Vec::with_capacity(cfg.epochs),
        confident_fraction: Vec::with_capacity(cfg.epochs),
        pseudo_label_precision: Vec::with_capacity(cfg.epochs),
        zeta_bar: state.zeta_bar().to_vec(),
    };

    let mut order: Vec<usize> = (0..n_ul).collect();
    for epoch in 1..=cfg.epochs {
        if epoch == cfg.lr_drop_epoch + 1 {
            lr /= cfg.lr_drop_factor;
        }
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for it in 0..iterations {
            let lab_idx = index::sample(rng, n_l, b_l);
            let ul_idx = order.chunks(cfg.batch_size_unlabeled).nth(it).unwrap_or(&[]);
            let augmented: Vec<Vec<f64>> =
                ul_idx.iter().map(|&i| augment(&task.unlabeled[i].features, cfg.augment_noise, rng)).collect();
            let batch = Stage1Batch {
                labeled: lab_idx.iter().map(|i| (task.labeled[i].features.as_slice(), targets[i])).collect(),
                unlabeled: ul_idx.iter().map(|&i| task.unlabeled[i].features.as_slice()).collect(),
                augmented: augmented.iter().map(Vec::as_slice).collect(),
            };
            let weights = class_weights.then_some(&state);
            let step = stage1_loss(model, head, &batch, thr, weights, cfg.unsup_mean)?;
            loss_sum += step.loss;
            apply_sgd(model, &step.grad, &mut velocity, scope, &cfg.sgd, lr)?;
        }

        let counts = confident_counts(model, head, &task.unlabeled, thr)?;
        state = state.with_counts(&counts.per_class)?;
        report.epoch_loss.push(loss_sum / iterations as f64);
        report.confident_fraction.push(counts.fraction());
        report.pseudo_label_precision.push(counts.precision());
        log::debug!(
            "task {} epoch {epoch}: loss {:.4}, confident {:.3}",
            task.task_id,
            loss_sum / iterations as f64,
            counts.fraction()
        );
    }
    report.zeta_bar = state.zeta_bar().to_vec();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn init_is_uniform() {
        let s = init_class_weights(10).unwrap();
        assert_eq!(s.zeta_bar(), &[1.0; 10]);
        let s = init_class_weights(1).unwrap();
        assert_eq!((s.zeta(), s.zeta_bar()), (&[1.0][..], &[1.0][..]));
        assert!(init_class_weights(0).is_err());
    }

    #[test]
    fn histogram_normalization() {
        let s = init_class_weights(3).unwrap().with_counts(&[50, 20, 0]).unwrap();
        assert_eq!(s.zeta(), &[1.0, 0.4, 0.0]);
        assert_eq!(s.zeta_bar(), &[1.0, 1.6, 2.0]);
    }

    #[test]
    fn empty_histogram_keeps_state() {
        let s = init_class_weights(3).unwrap().with_counts(&[4, 2, 1]).unwrap();
        assert_eq!(s.with_counts(&[0, 0, 0]).unwrap(), s);
    }

    #[test]
    fn equal_counts_give_unit_weights() {
        let s = init_class_weights(4).unwrap().with_counts(&[7; 4]).unwrap();
        assert_eq!(s.zeta_bar(), &[1.0; 4]);
    }

    #[test]
    fn weight_lookup() {
        let s = init_class_weights(3).unwrap().with_counts(&[50, 20, 0]).unwrap();
        let (wl, wu) = assign_weights(&s, &[2], &[0, 1]).unwrap();
        assert_eq!(wl, vec![2.0]);
        assert_eq!(wu, vec![1.0, 1.6]);
        assert!(assign_weights(&s, &[3], &[]).is_err());
        let u = init_class_weights(3).unwrap();
        assert_eq!(assign_weights(&u, &[0, 1, 2], &[2]).unwrap(), (vec![1.0; 3], vec![1.0]));
    }

    proptest! {
        #[test]
        fn weight_contract(counts in prop::collection::vec(0usize..500, 1..12)) {
            let s = init_class_weights(counts.len()).unwrap().with_counts(&counts).unwrap();
            let max = *counts.iter().max().unwrap();
            for (k, (&z, &zb)) in s.zeta().iter().zip(s.zeta_bar()).enumerate() {
                prop_assert_eq!(zb, 2.0 - z);
                prop_assert!((1.0..=2.0).contains(&zb));
                if max > 0 && counts[k] == max {
                    prop_assert_eq!(zb, 1.0);
                }
                if max > 0 && counts[k] == 0 {
                    prop_assert_eq!(zb, 2.0);
                }
            }
        }
    }
}
