//! Confidence gating: the task-adaptive inverse-sigmoid threshold, the fixed
//! baseline, and the average confidence score diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linear::{HeadSet, InputSpace, Model, ProbabilityVector};
use crate::stream::Sample;

/// Threshold applied to the maximum class probability of an unlabeled sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdSchedule {
    /// `α / (1 + e^{αt}) + β`, decreasing in the task index `t`.
    Adaptive { alpha: f64, beta: f64 },
    /// Constant `γ` for every task.
    Fixed { gamma: f64 },
    /// Threshold 1.0: no probability exceeds it, so nothing is ever gated in.
    Off,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        ThresholdSchedule::Adaptive { alpha: 0.5, beta: 0.65 }
    }
}

impl ThresholdSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdSchedule::Adaptive { alpha, beta } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return invalid(format!("alpha {alpha} must be > 0"));
                }
                if !(beta > 0.0 && beta < 1.0) {
                    return invalid(format!("beta {beta} must lie in (0, 1)"));
                }
                if beta + alpha / (1.0 + alpha.exp()) >= 1.0 {
                    return invalid(format!("alpha {alpha}, beta {beta} give a threshold >= 1 at t = 1"));
                }
                Ok(())
            }
            ThresholdSchedule::Fixed { gamma } if !(gamma > 0.0 && gamma < 1.0) => {
                invalid(format!("fixed gamma {gamma} must lie in (0, 1)"))
            }
            _ => Ok(()),
        }
    }

    /// Threshold for the 1-based task index `t`.
    pub fn threshold_at(&self, t: usize) -> Result<f64> {
        if t < 1 {
            return invalid("task index is 1-based");
        }
        Ok(match *self {
            ThresholdSchedule::Adaptive { alpha, beta } => alpha / (1.0 + (alpha * t as f64).exp()) + beta,
            ThresholdSchedule::Fixed { gamma } => gamma,
            ThresholdSchedule::Off => 1.0,
        })
    }
}

/// `mask[i] = max(pᵢ) > thr` and `labels[i] = argmax(pᵢ)` (first maximum).
pub fn confident_mask(probs: &[ProbabilityVector], thr: f64) -> (Vec<bool>, Vec<usize>) {
    probs.iter().map(|p| (p.max() > thr, p.argmax())).unzip()
}

/// Which softmax the confidence score is read from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcsScope {
    /// Softmax over every class seen so far.
    #[default]
    AllSeen,
    /// Softmax over the most recent head only.
    CurrentTask,
}

/// Mean over `unlabeled` of the maximum softmax probability.
pub fn average_confidence_score(model: &Model, unlabeled: &[Sample], scope: AcsScope) -> Result<f64> {
    if unlabeled.is_empty() {
        return invalid("average confidence score of an empty set");
    }
    let heads = match scope {
        AcsScope::AllSeen => HeadSet::All,
        AcsScope::CurrentTask => HeadSet::Only(model.heads.len().saturating_sub(1)),
    };
    let mut total = 0.0;
    for s in unlabeled {
        total += model.probabilities(&s.features, heads, InputSpace::Raw)?.max();
    }
    Ok(total / unlabeled.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::{DenseMatrix, FeatureMap};
    use proptest::prelude::*;

    const DEFAULT: ThresholdSchedule = ThresholdSchedule::Adaptive { alpha: 0.5, beta: 0.65 };

    #[test]
    fn adaptive_reference_values() {
        // 0.5 / (1 + e^0.5) + 0.65 and 0.5 / (1 + e^5) + 0.65
        assert!((DEFAULT.threshold_at(1).unwrap() - 0.83877).abs() < 1e-5);
        assert!((DEFAULT.threshold_at(10).unwrap() - 0.65335).abs() < 1e-5);
    }

    #[test]
    fn fixed_is_constant() {
        let s = ThresholdSchedule::Fixed { gamma: 0.95 };
        for t in [1, 2, 17, 1000] {
            assert_eq!(s.threshold_at(t).unwrap(), 0.95);
        }
    }

    #[test]
    fn task_zero_is_rejected() {
        assert!(DEFAULT.threshold_at(0).is_err());
    }

    #[test]
    fn decreasing_and_converging_to_beta() {
        for t in 1..=50 {
            assert!(DEFAULT.threshold_at(t + 1).unwrap() < DEFAULT.threshold_at(t).unwrap());
        }
        assert!((DEFAULT.threshold_at(1000).unwrap() - 0.65).abs() < 1e-6);
    }

    #[test]
    fn validation() {
        assert!(DEFAULT.validate().is_ok());
        assert!(ThresholdSchedule::Adaptive { alpha: 0.5, beta: 0.9 }.validate().is_err());
        assert!(ThresholdSchedule::Adaptive { alpha: -1.0, beta: 0.5 }.validate().is_err());
        assert!(ThresholdSchedule::Fixed { gamma: 1.0 }.validate().is_err());
        assert!(ThresholdSchedule::Off.validate().is_ok());
    }

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn mask_cases() {
        let (m, _) = confident_mask(&[pv(&[0.9, 0.1])], 0.95);
        assert_eq!(m, vec![false]);
        let (m, l) = confident_mask(&[pv(&[0.96, 0.04])], 0.95);
        assert_eq!((m, l), (vec![true], vec![0]));
        let (m, l) = confident_mask(&[pv(&[0.5, 0.5])], 0.4);
        assert_eq!((m, l), (vec![true], vec![0]));
        // strict inequality
        let (m, _) = confident_mask(&[pv(&[0.5, 0.5])], 0.5);
        assert_eq!(m, vec![false]);
    }

    fn sample(x: Vec<f64>) -> Sample {
        Sample { features: x, class_id: 0, task_id: 1 }
    }

    #[test]
    fn acs_of_zero_model_is_uniform() {
        let mut m = Model::new(FeatureMap::Identity { dim: 2 });
        m.add_head(vec![0, 1]);
        m.add_head(vec![2, 3, 4]);
        let xs: Vec<Sample> = (0..5).map(|i| sample(vec![i as f64, 1.0])).collect();
        let acs = average_confidence_score(&m, &xs, AcsScope::AllSeen).unwrap();
        assert!((acs - 0.2).abs() < 1e-12);
        let acs = average_confidence_score(&m, &xs, AcsScope::CurrentTask).unwrap();
        assert!((acs - 1.0 / 3.0).abs() < 1e-12);
        assert!(average_confidence_score(&m, &[], AcsScope::AllSeen).is_err());
    }

    #[test]
    fn acs_of_saturated_model_is_one() {
        let mut m = Model::new(FeatureMap::Identity { dim: 1 });
        m.add_head(vec![0, 1]);
        m.heads[0].weights = DenseMatrix::from_vec(2, 1, vec![1e4, -1e4]).unwrap();
        let xs: Vec<Sample> = (1..10).map(|i| sample(vec![i as f64])).collect();
        let acs = average_confidence_score(&m, &xs, AcsScope::AllSeen).unwrap();
        assert!((acs - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn beta_shift_moves_schedule(alpha in 0.05f64..1.0, beta in 0.3f64..0.6, delta in 0.0f64..0.05, t in 1usize..100) {
            let a = ThresholdSchedule::Adaptive { alpha, beta };
            let b = ThresholdSchedule::Adaptive { alpha, beta: beta + delta };
            let diff = b.threshold_at(t).unwrap() - a.threshold_at(t).unwrap();
            prop_assert!((diff - delta).abs() < 1e-12);
        }

        #[test]
        fn mask_count_monotone_in_threshold(
            raw in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..30),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let probs: Vec<_> = raw.iter().map(|v| crate::linear::softmax(v).unwrap()).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let count = |thr| confident_mask(&probs, thr).0.iter().filter(|m| **m).count();
            prop_assert!(count(hi) <= count(lo));
        }
    }
}
