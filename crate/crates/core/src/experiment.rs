//! End-to-end runs over a task stream for the three pipelines, ablation
//! switches, seed aggregation, threshold sweeps, persistence and plot data.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, io_err, Error, Result};
use crate::eval::{average_incremental_accuracy, cumulative_accuracy, EvalRecord};
use crate::linear::{Activation, AffineLayer, FeatureMap, Model};
use crate::rng::{self, Rng};
use crate::stage1::{train_task_stage1, Stage1Config};
use crate::stage2::{align_classifiers, estimate_stats, expand_label_set, to_feature_space, Stage2Config, StatsBank};
use crate::stream::{generate_stream, Sample, StreamConfig, TaskData};
use crate::threshold::{average_confidence_score, AcsScope, ThresholdSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Adaptive threshold, class-aware weights, unlabeled statistics
    /// (each switchable through [`Ablation`]).
    Tacle,
    /// Fixed confidence threshold in stage 1.
    FixedThreshold,
    /// Labeled data only in both stages.
    LabeledOnly,
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tacle" => Ok(Pipeline::Tacle),
            "fixed" | "fixed_threshold" => Ok(Pipeline::FixedThreshold),
            "labeled" | "labeled_only" => Ok(Pipeline::LabeledOnly),
            other => Err(Error::Config(format!("unknown pipeline {other:?}"))),
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pipeline::Tacle => "tacle",
            Pipeline::FixedThreshold => "fixed_threshold",
            Pipeline::LabeledOnly => "labeled_only",
        })
    }
}

/// Component switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// C1: task-adaptive threshold instead of the fixed one.
    pub c1_adaptive_threshold: bool,
    /// C2: class-aware loss weights.
    pub c2_class_weights: bool,
    /// C3: confident unlabeled samples in the class statistics.
    pub c3_unlabeled_stats: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { c1_adaptive_threshold: true, c2_class_weights: true, c3_unlabeled_stats: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Identity,
    Affine,
}

/// Shape of the feature layer; affine layers start at the identity map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    pub activation: Activation,
    pub trainable: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { kind: FeatureKind::Identity, activation: Activation::Identity, trainable: false }
    }
}

impl FeatureConfig {
    pub fn build(&self, dim: usize) -> FeatureMap {
        match self.kind {
            FeatureKind::Identity => FeatureMap::Identity { dim },
            FeatureKind::Affine => FeatureMap::Affine(AffineLayer::identity_init(dim, self.activation, self.trainable)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub pipeline: Pipeline,
    pub ablation: Ablation,
    /// Schedule used when C1 is active.
    pub threshold: ThresholdSchedule,
    /// Threshold used when C1 is inactive.
    pub fixed_gamma: f64,
    pub acs_scope: AcsScope,
    pub feature: FeatureConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    /// Each run seed is added to `stream.seed` for data generation and also
    /// seeds the training stream.
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            stream: StreamConfig::default(),
            pipeline: Pipeline::Tacle,
            ablation: Ablation::default(),
            threshold: ThresholdSchedule::default(),
            fixed_gamma: 0.95,
            acs_scope: AcsScope::AllSeen,
            feature: FeatureConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            seeds: vec![0, 1, 2],
            output_dir: None,
        }
    }
}

/// What a pipeline actually does once the ablation switches are applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plan {
    pub schedule: ThresholdSchedule,
    pub class_weights: bool,
    pub unlabeled_stats: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg.normalized())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies the forced switches: `labeled_only` turns every component
    /// off, `fixed_threshold` turns C1 off.
    pub fn normalized(mut self) -> Self {
        match self.pipeline {
            Pipeline::LabeledOnly => {
                self.ablation =
                    Ablation { c1_adaptive_threshold: false, c2_class_weights: false, c3_unlabeled_stats: false };
            }
            Pipeline::FixedThreshold => self.ablation.c1_adaptive_threshold = false,
            Pipeline::Tacle => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.stream.validate().map_err(cfg_err)?;
        self.threshold.validate().map_err(cfg_err)?;
        self.stage1.validate().map_err(cfg_err)?;
        self.stage2.validate().map_err(cfg_err)?;
        if matches!(self.threshold, ThresholdSchedule::Fixed { .. }) {
            return Err(Error::Config(
                "`threshold` holds the C1 schedule; set `fixed_gamma` for a fixed threshold".into(),
            ));
        }
        if !(self.fixed_gamma > 0.0 && self.fixed_gamma < 1.0) {
            return Err(Error::Config(format!("fixed_gamma {} must lie in (0, 1)", self.fixed_gamma)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn plan(&self) -> Plan {
        let cfg = self.clone().normalized();
        let a = cfg.ablation;
        let schedule = match cfg.pipeline {
            Pipeline::LabeledOnly => ThresholdSchedule::Off,
            _ if a.c1_adaptive_threshold => cfg.threshold,
            _ => ThresholdSchedule::Fixed { gamma: cfg.fixed_gamma },
        };
        Plan { schedule, class_weights: a.c2_class_weights, unlabeled_stats: a.c3_unlabeled_stats }
    }

    /// Hash of every field that affects a single run (everything except the
    /// seed list and output directory). Key order and whitespace of the
    /// source document do not matter.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self.clone().normalized()).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("seeds");
            map.remove("output_dir");
        }
        // serde_json maps are sorted by key
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Outcome of one task within a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub eval: EvalRecord,
    pub threshold: f64,
    /// Average confidence score on the task's unlabeled pool after the task.
    pub acs: Option<f64>,
    /// Confident fraction of the unlabeled pool after the last stage-1 epoch.
    pub confident_fraction: Option<f64>,
    pub pseudo_label_precision: Option<f64>,
    /// Samples used to estimate the task's class statistics.
    pub stats_support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    pub seed: u64,
    pub pipeline: Pipeline,
    pub tasks: Vec<TaskResult>,
    pub average_incremental_accuracy: f64,
    /// Not part of the persisted payload, which must be reproducible.
    #[serde(skip)]
    pub wall_clock: Duration,
}

impl RunResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn acs_curve(&self) -> Vec<Option<f64>> {
        self.tasks.iter().map(|t| t.acs).collect()
    }

    pub fn cumulative_curve(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.eval.cumulative_accuracy).collect()
    }
}

/// State carried from one task to the next. Raw samples of finished tasks
/// are not part of it.
struct Learner<'a> {
    cfg: &'a ExperimentConfig,
    plan: Plan,
    model: Model,
    bank: StatsBank,
    rng: Rng,
}

impl Learner<'_> {
    /// Runs both stages on `task`, which is consumed.
    fn learn_task(&mut self, task: TaskData) -> Result<TaskSummary> {
        let cfg = self.cfg;
        self.model.add_head(task.class_set.clone());
        let report = train_task_stage1(
            &mut self.model,
            &task,
            &self.plan.schedule,
            &cfg.stage1,
            self.plan.class_weights,
            &mut self.rng,
        )?;
        let thr = report.threshold;
        let support =
            if self.plan.unlabeled_stats { expand_label_set(&task, &self.model, thr)? } else { task.labeled.clone() };
        let feats = to_feature_space(&self.model, &support)?;
        let stats = estimate_stats(&feats, &task.class_set, cfg.stage2.cov_regularizer, cfg.stage2.covariance)?;
        self.bank.insert_task(stats)?;
        align_classifiers(&mut self.model, &self.bank, &cfg.stage2, &mut self.rng)?;
        let acs = if task.unlabeled.is_empty() {
            None
        } else {
            Some(average_confidence_score(&self.model, &task.unlabeled, cfg.acs_scope)?)
        };
        Ok(TaskSummary {
            task_id: task.task_id,
            threshold: thr,
            acs,
            confident_fraction: report.confident_fraction.last().copied(),
            pseudo_label_precision: report.pseudo_label_precision.last().copied().flatten(),
            stats_support: support.len(),
        })
    }
}

struct TaskSummary {
    task_id: usize,
    threshold: f64,
    acs: Option<f64>,
    confident_fraction: Option<f64>,
    pseudo_label_precision: Option<f64>,
    stats_support: usize,
}

/// One run of the configured pipeline for `seed`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let stream_cfg = StreamConfig { seed: cfg.stream.seed.wrapping_add(seed), ..cfg.stream.clone() };
    let stream = generate_stream(&stream_cfg)?;
    let mut learner = Learner {
        cfg,
        plan: cfg.plan(),
        model: Model::new(cfg.feature.build(stream.feature_dim)),
        bank: StatsBank::new(),
        rng: rng::seeded(seed, rng::Stream::Train),
    };
    let test_sets = stream.test_sets;
    let mut tasks = Vec::with_capacity(test_sets.len());
    for (i, task) in stream.tasks.into_iter().enumerate() {
        let summary = learner.learn_task(task)?;
        let eval = cumulative_accuracy(&learner.model, &test_sets[..=i], summary.task_id)?;
        log::info!("seed {seed} task {}: cumulative accuracy {:.4}", summary.task_id, eval.cumulative_accuracy);
        tasks.push(TaskResult {
            eval,
            threshold: summary.threshold,
            acs: summary.acs,
            confident_fraction: summary.confident_fraction,
            pseudo_label_precision: summary.pseudo_label_precision,
            stats_support: summary.stats_support,
        });
    }
    let records: Vec<EvalRecord> = tasks.iter().map(|t| t.eval.clone()).collect();
    Ok(RunResult {
        config_hash: cfg.config_hash(),
        seed,
        pipeline: cfg.pipeline,
        average_incremental_accuracy: average_incremental_accuracy(&records)?,
        tasks,
        wall_clock: start.elapsed(),
    })
}

/// Runs every seed of `cfg`; persists config and results when
/// `output_dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let cfg = cfg.clone().normalized();
    let results = cfg.seeds.iter().map(|&s| run_seed(&cfg, s)).collect::<Result<Vec<_>>>()?;
    if let Some(dir) = &cfg.output_dir {
        persist(&cfg, &results, dir)?;
    }
    Ok(results)
}

pub fn config_file_name(hash: &str) -> String {
    format!("config-{hash}.json")
}

pub fn result_file_name(hash: &str, seed: u64) -> String {
    format!("run-{hash}-seed{seed}.json")
}

/// Writes the resolved config and one JSON document per seed into `dir`.
/// Wall-clock times go to a separate `timing-*.json` file.
pub fn persist(cfg: &ExperimentConfig, results: &[RunResult], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let hash = cfg.config_hash();
    write_atomic(&dir.join(config_file_name(&hash)), cfg.to_json()?.as_bytes())?;
    for r in results {
        write_atomic(&dir.join(result_file_name(&hash, r.seed)), r.to_json()?.as_bytes())?;
        let timing = serde_json::json!({ "seed": r.seed, "wall_clock_secs": r.wall_clock.as_secs_f64() });
        write_atomic(&dir.join(format!("timing-{hash}-seed{}.json", r.seed)), timing.to_string().as_bytes())?;
    }
    Ok(())
}

/// Loads every `run-*.json` document in `dir`, sorted by file name.
pub fn load_results(dir: &Path) -> Result<Vec<RunResult>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("run-") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(serde_json::from_str(&fs::read_to_string(p).map_err(io_err(p))?)?)).collect()
}

/// Writes through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stddev: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return invalid("cannot aggregate an empty set");
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean, stddev: var.sqrt() })
    }
}

/// Seed aggregate of the average incremental accuracy.
pub fn aggregate_accuracy(results: &[RunResult]) -> Result<Aggregate> {
    Aggregate::of(&results.iter().map(|r| r.average_incremental_accuracy).collect::<Vec<_>>())
}

/// Threshold sweep output: `cells[i][j]` belongs to `alphas[i]`, `betas[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub cells: Vec<Vec<Aggregate>>,
}

impl SweepGrid {
    /// Header `alpha\beta,<betas...>`, then one row of means per alpha.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["alpha\\beta".to_string()];
        header.extend(self.betas.iter().map(f64::to_string));
        w.write_record(&header)?;
        for (a, row) in self.alphas.iter().zip(&self.cells) {
            let mut rec = vec![a.to_string()];
            rec.extend(row.iter().map(|c| c.mean.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        write_atomic(path, &bytes)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let num = |s: &str| {
            s.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("bad number {s:?}"),
            })
        };
        let betas = rdr.headers()?.iter().skip(1).map(num).collect::<Result<Vec<_>>>()?;
        let mut alphas = Vec::new();
        let mut cells = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            alphas.push(num(&rec[0])?);
            cells.push(
                rec.iter().skip(1).map(|v| Ok(Aggregate { mean: num(v)?, stddev: 0.0 })).collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self { alphas, betas, cells })
    }
}

/// Runs the experiment for every `(α, β)` pair and aggregates over seeds.
pub fn sweep_threshold(cfg: &ExperimentConfig, alphas: &[f64], betas: &[f64]) -> Result<SweepGrid> {
    if alphas.is_empty() || betas.is_empty() {
        return invalid("sweep needs at least one alpha and one beta");
    }
    let plan = cfg.plan();
    if !matches!(plan.schedule, ThresholdSchedule::Adaptive { .. }) {
        return Err(Error::Config("threshold sweeps need the tacle pipeline with C1 enabled".into()));
    }
    // validate the whole grid before running anything
    let schedules: Vec<Vec<ThresholdSchedule>> = alphas
        .iter()
        .map(|&alpha| {
            betas
                .iter()
                .map(|&beta| {
                    let s = ThresholdSchedule::Adaptive { alpha, beta };
                    s.validate().map(|_| s)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut cells = Vec::with_capacity(alphas.len());
    for row in schedules {
        let mut out = Vec::with_capacity(betas.len());
        for threshold in row {
            let cell_cfg = ExperimentConfig { threshold, output_dir: None, ..cfg.clone() };
            out.push(aggregate_accuracy(&run_experiment(&cell_cfg)?)?);
        }
        cells.push(out);
    }
    Ok(SweepGrid { alphas: alphas.to_vec(), betas: betas.to_vec(), cells })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    CumulativeCurve,
    AcsCurve,
    SweepGrid,
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cumulative_curve" | "cumulative" => Ok(PlotKind::CumulativeCurve),
            "acs_curve" | "acs" => Ok(PlotKind::AcsCurve),
            "sweep_grid" | "sweep" => Ok(PlotKind::SweepGrid),
            other => Err(Error::Config(format!("unknown plot kind {other:?}"))),
        }
    }
}

/// One row of a per-task curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub task: usize,
    pub mean: f64,
    pub stddev: f64,
}

/// Per-task mean and population stddev over seeds.
pub fn curve(results: &[RunResult], kind: PlotKind) -> Result<Vec<CurvePoint>> {
    let Some(first) = results.first() else {
        return invalid("no results to plot");
    };
    let n = first.tasks.len();
    if results.iter().any(|r| r.tasks.len() != n) {
        return invalid("results cover different numbers of tasks");
    }
    (0..n)
        .map(|t| {
            let values = results
                .iter()
                .map(|r| match kind {
                    PlotKind::CumulativeCurve => Ok(r.tasks[t].eval.cumulative_accuracy),
                    PlotKind::AcsCurve => {
                        r.tasks[t].acs.ok_or_else(|| Error::InvalidArgument(format!("task {} has no ACS", t + 1)))
                    }
                    PlotKind::SweepGrid => invalid("sweep grids are not per-task curves"),
                })
                .collect::<Result<Vec<_>>>()?;
            let a = Aggregate::of(&values)?;
            Ok(CurvePoint { task: t + 1, mean: a.mean, stddev: a.stddev })
        })
        .collect()
}

/// Writes a `task,mean,stddev` CSV for a cumulative-accuracy or ACS curve.
pub fn emit_plot_data(results: &[RunResult], kind: PlotKind, path: &Path) -> Result<()> {
    let points = curve(results, kind)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &points {
        w.serialize(p)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<CurvePoint>, _>>()?)
}

/// Samples of the test sets, exposed so callers can evaluate a model on a
/// stream without running the learner.
pub fn flatten_tests(test_sets: &[Vec<Sample>]) -> Vec<&Sample> {
    test_sets.iter().flatten().collect()
}
