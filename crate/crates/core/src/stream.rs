//! Synthetic task streams in feature space, CSV ingestion of external
//! embeddings, and the feature-noise augmentation operator.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    /// Global class index. Hidden from trainers for unlabeled samples.
    pub class_id: usize,
    /// 1-based task index.
    pub task_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub task_id: usize,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub class_set: Vec<usize>,
}

impl TaskData {
    /// Position of `class_id` inside this task's class set.
    pub fn local_index(&self, class_id: usize) -> Option<usize> {
        self.class_set.iter().position(|&c| c == class_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub feature_dim: usize,
    pub tasks: Vec<TaskData>,
    /// Held-out samples per task, drawn from the same class distributions as
    /// the training data. Empty for ingested streams.
    pub test_sets: Vec<Vec<Sample>>,
    /// Generating cluster centres, keyed by class. Empty for ingested streams.
    pub class_centers: BTreeMap<usize, Vec<f64>>,
}

/// How many samples of each class carry labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Fraction of `samples_per_class`, at least one per class.
    Fraction(f64),
    /// A fixed count per class (1 = one-shot).
    LabeledPerClass(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub supervision: Supervision,
    pub feature_dim: usize,
    pub cluster_spread: f64,
    pub cluster_separation: f64,
    /// Minority to majority ratio of the unlabeled pool within each task.
    pub imbalance_ratio: f64,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            classes_per_task: 4,
            samples_per_class: 200,
            supervision: Supervision::Fraction(0.02),
            feature_dim: 16,
            cluster_spread: 1.0,
            cluster_separation: 3.0,
            imbalance_ratio: 1.0,
            test_per_class: 100,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.classes_per_task == 0 || self.feature_dim == 0 {
            return invalid("num_tasks, classes_per_task and feature_dim must be >= 1");
        }
        if self.samples_per_class == 0 {
            return invalid("samples_per_class must be >= 1");
        }
        if !(self.cluster_spread > 0.0) || !(self.cluster_separation > 0.0) {
            return invalid("cluster_spread and cluster_separation must be > 0");
        }
        if !(self.imbalance_ratio > 0.0 && self.imbalance_ratio <= 1.0) {
            return invalid(format!("imbalance_ratio {} must lie in (0, 1]", self.imbalance_ratio));
        }
        match self.supervision {
            Supervision::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                invalid(format!("supervision fraction {f} must lie in (0, 1]"))
            }
            Supervision::LabeledPerClass(0) => invalid("labeled_per_class must be >= 1"),
            Supervision::LabeledPerClass(n) if n > self.samples_per_class => {
                invalid(format!("labeled_per_class {n} exceeds samples_per_class {}", self.samples_per_class))
            }
            _ => Ok(()),
        }
    }

    /// Labeled samples per class.
    pub fn labeled_per_class(&self) -> usize {
        match self.supervision {
            Supervision::Fraction(f) => {
                ((f * self.samples_per_class as f64).round() as usize).clamp(1, self.samples_per_class)
            }
            Supervision::LabeledPerClass(n) => n,
        }
    }
}

/// Per-class counts decaying geometrically from `n_max` to
/// `round(ratio · n_max)`: `counts[k] = round(n_max · ratio^(k/(n−1)))`.
pub fn imbalance_counts(n_max: usize, n_classes: usize, ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return invalid(format!("imbalance ratio {ratio} must lie in (0, 1]"));
    }
    if n_classes == 0 {
        return invalid("n_classes must be >= 1");
    }
    if n_classes == 1 {
        return Ok(vec![n_max]);
    }
    let last = (n_classes - 1) as f64;
    Ok((0..n_classes).map(|k| (n_max as f64 * ratio.powf(k as f64 / last)).round() as usize).collect())
}

/// `x + noise_scale · ε`, `ε ~ N(0, I)`. Always consumes `x.len()` normal
/// draws, even when `noise_scale` is zero.
pub fn augment(x: &[f64], noise_scale: f64, rng: &mut Rng) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let e: f64 = rng.sample(StandardNormal);
            v + noise_scale * e
        })
        .collect()
}

fn gaussian_vector(center: &[f64], spread: f64, rng: &mut Rng) -> Vec<f64> {
    augment(center, spread, rng)
}

/// Generates a deterministic stream of isotropic Gaussian class clusters.
///
/// Class centres are `separation · g / √d` with `g ~ N(0, I_d)`, so the
/// expected squared distance between two centres is `2 · separation²`.
/// Labeled counts are balanced; the unlabeled pool of each task follows
/// [`imbalance_counts`] with the configured ratio.
pub fn generate_stream(cfg: &StreamConfig) -> Result<TaskStream> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed, rng::Stream::Generate);
    let mut test_rng = rng::seeded(cfg.seed, rng::Stream::Test);
    let d = cfg.feature_dim;
    let n_labeled = cfg.labeled_per_class();
    let unlabeled_counts =
        imbalance_counts(cfg.samples_per_class - n_labeled, cfg.classes_per_task, cfg.imbalance_ratio)?;
    let center_scale = cfg.cluster_separation / (d as f64).sqrt();

    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    let mut test_sets = Vec::with_capacity(cfg.num_tasks);
    let mut class_centers = BTreeMap::new();

    for t in 0..cfg.num_tasks {
        let task_id = t + 1;
        let class_set: Vec<usize> = (t * cfg.classes_per_task..(t + 1) * cfg.classes_per_task).collect();
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        let mut test = Vec::new();

        for (k, &class_id) in class_set.iter().enumerate() {
            let center = augment(&vec![0.0; d], center_scale, &mut rng);
            let total = n_labeled + unlabeled_counts[k];
            let mut points: Vec<Vec<f64>> =
                (0..total).map(|_| gaussian_vector(&center, cfg.cluster_spread, &mut rng)).collect();
            points.shuffle(&mut rng);
            let sample = |features| Sample { features, class_id, task_id };
            let rest = points.split_off(n_labeled);
            labeled.extend(points.into_iter().map(sample));
            unlabeled.extend(rest.into_iter().map(sample));
            test.extend(
                (0..cfg.test_per_class).map(|_| sample(gaussian_vector(&center, cfg.cluster_spread, &mut test_rng))),
            );
            class_centers.insert(class_id, center);
        }
        labeled.shuffle(&mut rng);
        unlabeled.shuffle(&mut rng);
        tasks.push(TaskData { task_id, labeled, unlabeled, class_set });
        test_sets.push(test);
    }

    Ok(TaskStream { feature_dim: d, tasks, test_sets, class_centers })
}

/// Checks pairwise disjointness of task class sets and that every sample's
/// class belongs to its task.
pub fn validate_stream(stream: &TaskStream) -> Result<()> {
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    for task in &stream.tasks {
        for &c in &task.class_set {
            if let Some(prev) = owner.insert(c, task.task_id) {
                return Err(Error::Validation(format!("class {c} appears in tasks {prev} and {}", task.task_id)));
            }
        }
        for s in task.labeled.iter().chain(&task.unlabeled) {
            if s.features.len() != stream.feature_dim {
                return Err(Error::Validation(format!(
                    "sample of class {} has dimension {}, expected {}",
                    s.class_id,
                    s.features.len(),
                    stream.feature_dim
                )));
            }
            if task.local_index(s.class_id).is_none() {
                return Err(Error::Validation(format!(
                    "class {} is not in the class set of task {}",
                    s.class_id, task.task_id
                )));
            }
        }
    }
    Ok(())
}

const CSV_FIXED_COLUMNS: [&str; 3] = ["task_id", "class_id", "labeled"];

/// Writes the training samples of `stream` in the embedding CSV schema
/// `task_id,class_id,labeled,f0,...,f{d-1}`.
pub fn write_embeddings<W: Write>(stream: &TaskStream, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = CSV_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..stream.feature_dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for task in &stream.tasks {
        let rows = task.labeled.iter().map(|s| (s, 1)).chain(task.unlabeled.iter().map(|s| (s, 0)));
        for (s, flag) in rows {
            let mut rec = vec![task.task_id.to_string(), s.class_id.to_string(), flag.to_string()];
            rec.extend(s.features.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(io_err("<csv writer>"))?;
    Ok(())
}

/// Reads an embedding CSV file into a stream (tasks ordered by `task_id`).
pub fn ingest_embeddings(path: &Path) -> Result<TaskStream> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    read_embeddings(file, path)
}

/// Reader-based form of [`ingest_embeddings`]; `origin` labels errors.
pub fn read_embeddings<R: Read>(reader: R, origin: &Path) -> Result<TaskStream> {
    let parse_err = |line: usize, message: String| Error::Parse { path: origin.to_path_buf(), line, message };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 4 || header.iter().take(3).ne(CSV_FIXED_COLUMNS) {
        return Err(parse_err(1, "header must start with task_id,class_id,labeled,f0".into()));
    }
    for (i, name) in header.iter().skip(3).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_err(1, format!("expected column f{i}, found {name:?}")));
        }
    }
    let d = header.len() - 3;

    let mut by_task: BTreeMap<usize, TaskData> = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(parse_err(line, format!("row has {} fields, header declares {} features", rec.len(), d)));
        }
        let int = |i: usize| -> Result<usize> {
            rec[i].trim().parse().map_err(|_| {
                parse_err(line, format!("column {} is not a non-negative integer: {:?}", &header[i], &rec[i]))
            })
        };
        let task_id = int(0)?;
        let class_id = int(1)?;
        let labeled = match rec[2].trim() {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(line, format!("labeled must be 0 or 1, got {other:?}"))),
        };
        let features = rec
            .iter()
            .skip(3)
            .map(|v| match v.trim().parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(parse_err(line, format!("feature {v:?} is not a finite number"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let task = by_task.entry(task_id).or_insert_with(|| TaskData {
            task_id,
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            class_set: Vec::new(),
        });
        if !task.class_set.contains(&class_id) {
            task.class_set.push(class_id);
        }
        let s = Sample { features, class_id, task_id };
        if labeled {
            task.labeled.push(s);
        } else {
            task.unlabeled.push(s);
        }
    }

    let mut tasks: Vec<TaskData> = by_task.into_values().collect();
    for (i, task) in tasks.iter_mut().enumerate() {
        // renumber to 1..=T in file order of task ids
        task.task_id = i + 1;
        for s in task.labeled.iter_mut().chain(task.unlabeled.iter_mut()) {
            s.task_id = i + 1;
        }
        task.class_set.sort_unstable();
        let labeled_classes: BTreeSet<usize> = task.labeled.iter().map(|s| s.class_id).collect();
        if let Some(c) = task.class_set.iter().find(|c| !labeled_classes.contains(c)) {
            return Err(Error::Validation(format!("class {c} of task {} has no labeled sample", task.task_id)));
        }
    }
    let stream =
        TaskStream { feature_dim: d, test_sets: vec![Vec::new(); tasks.len()], tasks, class_centers: BTreeMap::new() };
    validate_stream(&stream)?;
    Ok(stream)
}
