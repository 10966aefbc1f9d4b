//! Prints the seed-averaged accuracy of every pipeline and ablation row.
//!
//! `cargo run --release --example ablation -- [config.json]`

use tacle::experiment::{aggregate_accuracy, run_experiment, Ablation, ExperimentConfig, Pipeline};

fn main() -> tacle::Result<()> {
    let base = match std::env::args().nth(1) {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig { seeds: (0..5).collect(), ..Default::default() },
    };
    let rows = [
        ("labeled_only", Pipeline::LabeledOnly, Ablation::default()),
        (
            "fixed_threshold",
            Pipeline::FixedThreshold,
            Ablation { c1_adaptive_threshold: false, c2_class_weights: false, c3_unlabeled_stats: false },
        ),
        (
            "C1",
            Pipeline::Tacle,
            Ablation { c1_adaptive_threshold: true, c2_class_weights: false, c3_unlabeled_stats: false },
        ),
        (
            "C1+C2",
            Pipeline::Tacle,
            Ablation { c1_adaptive_threshold: true, c2_class_weights: true, c3_unlabeled_stats: false },
        ),
        ("C1+C2+C3", Pipeline::Tacle, Ablation::default()),
    ];
    for (name, pipeline, ablation) in rows {
        let cfg = ExperimentConfig { pipeline, ablation, ..base.clone() };
        let results = run_experiment(&cfg)?;
        let agg = aggregate_accuracy(&results)?;
        let acs: Vec<String> = (0..results[0].tasks.len())
            .map(|t| {
                let m = results.iter().filter_map(|r| r.tasks[t].acs).sum::<f64>() / results.len() as f64;
                format!("{m:.3}")
            })
            .collect();
        let conf: Vec<String> = (0..results[0].tasks.len())
            .map(|t| {
                let m =
                    results.iter().filter_map(|r| r.tasks[t].confident_fraction).sum::<f64>() / results.len() as f64;
                format!("{m:.2}")
            })
            .collect();
        println!(
            "{name:>16}: {:.4} ± {:.4}  acs [{}] conf [{}] ({:.1}s)",
            agg.mean,
            agg.stddev,
            acs.join(" "),
            conf.join(" "),
            results.iter().map(|r| r.wall_clock.as_secs_f64()).sum::<f64>()
        );
    }
    Ok(())
}
