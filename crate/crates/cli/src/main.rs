//! Command-line front end for running, sweeping and plotting experiments.
//!
//! Log verbosity is read from `TACLE_LOG` (`error`, `warn`, `info`, `debug`).

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use tacle::experiment::{
    aggregate_accuracy, emit_plot_data, load_results, run_experiment, sweep_threshold, write_atomic, Ablation,
    ExperimentConfig, Pipeline, PlotKind, SweepGrid,
};
use tacle::stream::{generate_stream, write_embeddings, StreamConfig};

#[derive(Parser)]
#[command(name = "tacle", version, about = "Exemplar-free semi-supervised class-incremental experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a pipeline over every seed and persist the results.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// tacle, fixed or labeled; `fixed` also turns class weights and
        /// unlabeled statistics off
        #[arg(long)]
        pipeline: Option<Pipeline>,
        /// Comma-separated list, e.g. 0,1,2
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid search over the threshold schedule parameters.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.45,0.5,0.55")]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.6,0.65,0.7")]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Directory for sweep.csv and sweep.json
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic stream of a config as an embedding CSV.
    GenStream {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run seed added to the stream seed (defaults to the first config seed)
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn persisted results into plot-ready CSV.
    PlotData {
        #[arg(long)]
        results: PathBuf,
        /// cumulative_curve, acs_curve or sweep_grid
        #[arg(long)]
        kind: PlotKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(
    config: Option<PathBuf>,
    pipeline: Option<Pipeline>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(p) = pipeline {
        cfg.pipeline = p;
        // the fixed-threshold baseline uses unlabeled data in stage 1 only
        if p == Pipeline::FixedThreshold {
            cfg.ablation =
                Ablation { c1_adaptive_threshold: false, c2_class_weights: false, c3_unlabeled_stats: false };
        }
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if out.is_some() {
        cfg.output_dir = out;
    }
    let cfg = cfg.normalized();
    cfg.validate()?;
    info!("config {} pipeline {} seeds {:?}", cfg.config_hash(), cfg.pipeline, cfg.seeds);
    let results = run_experiment(&cfg)?;
    for r in &results {
        let curve: Vec<String> = r.cumulative_curve().iter().map(|a| format!("{a:.4}")).collect();
        println!("seed {}: {:.4}  [{}]", r.seed, r.average_incremental_accuracy, curve.join(" "));
    }
    let agg = aggregate_accuracy(&results)?;
    println!("{} mean {:.4} ± {:.4} over {} seeds", cfg.pipeline, agg.mean, agg.stddev, results.len());
    if let Some(dir) = &cfg.output_dir {
        println!("results written to {}", dir.display());
    }
    Ok(())
}

fn sweep(
    config: Option<PathBuf>,
    alphas: Vec<f64>,
    betas: Vec<f64>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let grid = sweep_threshold(&cfg, &alphas, &betas)?;
    grid.write_csv(&dir.join("sweep.csv"))?;
    write_atomic(&dir.join("sweep.json"), serde_json::to_string_pretty(&grid)?.as_bytes())?;
    for (a, row) in grid.alphas.iter().zip(&grid.cells) {
        let cells: Vec<String> = row.iter().map(|c| format!("{:.4}±{:.4}", c.mean, c.stddev)).collect();
        println!("α={a}: {}", cells.join("  "));
    }
    println!("sweep written to {}", dir.join("sweep.csv").display());
    Ok(())
}

fn gen_stream(config: Option<PathBuf>, seed: Option<u64>, out: PathBuf) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let seed = seed.or_else(|| cfg.seeds.first().copied()).unwrap_or(0);
    let stream = generate_stream(&StreamConfig { seed: cfg.stream.seed.wrapping_add(seed), ..cfg.stream })?;
    let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    write_embeddings(&stream, BufWriter::new(file))?;
    let n: usize = stream.tasks.iter().map(|t| t.labeled.len() + t.unlabeled.len()).sum();
    println!("{n} samples over {} tasks written to {}", stream.tasks.len(), out.display());
    Ok(())
}

fn plot_data(results: PathBuf, kind: PlotKind, out: Option<PathBuf>) -> Result<()> {
    let default_name = match kind {
        PlotKind::CumulativeCurve => "cumulative_curve.csv",
        PlotKind::AcsCurve => "acs_curve.csv",
        PlotKind::SweepGrid => "sweep_grid.csv",
    };
    let out = out.unwrap_or_else(|| results.join(default_name));
    if kind == PlotKind::SweepGrid {
        let path = results.join("sweep.json");
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let grid: SweepGrid = serde_json::from_str(&text)?;
        grid.write_csv(&out)?;
    } else {
        let runs = load_results(&results)?;
        if runs.is_empty() {
            bail!("no run-*.json files in {}", results.display());
        }
        let hashes: std::collections::BTreeSet<&str> = runs.iter().map(|r| r.config_hash.as_str()).collect();
        if hashes.len() > 1 {
            bail!("{} holds results of {} different configs", results.display(), hashes.len());
        }
        emit_plot_data(&runs, kind, &out)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TACLE_LOG", "warn")).init();
    match Cli::parse().command {
        Command::Run { config, pipeline, seeds, out } => run(config, pipeline, seeds, out),
        Command::Sweep { config, alphas, betas, seeds, out } => sweep(config, alphas, betas, seeds, out),
        Command::GenStream { config, seed, out } => gen_stream(config, seed, out),
        Command::PlotData { results, kind, out } => plot_data(results, kind, out),
    }
}
