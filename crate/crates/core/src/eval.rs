//! Cumulative and average incremental accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linear::Model;
use crate::stream::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task_id: usize,
    /// Top-1 accuracy over the union of test sets of tasks `1..=task_id`.
    pub cumulative_accuracy: f64,
    /// Accuracy per class, in model logit order (`None` without test samples).
    pub per_class_accuracy: Vec<Option<f64>>,
    pub num_test_samples: usize,
}

/// Evaluates `model` on the test sets of tasks `1..=task_id`.
pub fn cumulative_accuracy(model: &Model, test_sets: &[Vec<Sample>], task_id: usize) -> Result<EvalRecord> {
    let samples: Vec<&Sample> = test_sets.iter().flatten().collect();
    if samples.is_empty() {
        return invalid("no test samples to evaluate");
    }
    let classes: Vec<usize> = model.class_ids().collect();
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for s in &samples {
        let hit = model.predict(&s.features)? == s.class_id;
        let e = per_class.entry(s.class_id).or_default();
        e.1 += 1;
        if hit {
            e.0 += 1;
            correct += 1;
        }
    }
    Ok(EvalRecord {
        task_id,
        cumulative_accuracy: correct as f64 / samples.len() as f64,
        per_class_accuracy: classes.iter().map(|c| per_class.get(c).map(|(k, n)| *k as f64 / *n as f64)).collect(),
        num_test_samples: samples.len(),
    })
}

/// Mean of cumulative accuracies; records must cover tasks `1..=T` once each.
pub fn average_incremental_accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return invalid("no evaluation records");
    }
    let mut ids: Vec<usize> = records.iter().map(|r| r.task_id).collect();
    ids.sort_unstable();
    if ids.iter().enumerate().any(|(i, &t)| t != i + 1) {
        return invalid(format!("records must cover tasks 1..={} exactly once, got {ids:?}", records.len()));
    }
    Ok(records.iter().map(|r| r.cumulative_accuracy).sum::<f64>() / records.len() as f64)
}
