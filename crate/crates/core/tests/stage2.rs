mod common;

use common::*;
use tacle::linear::{Activation, FeatureMap, Model};
use tacle::rng::{self, Stream};
use tacle::stage1::{train_task_stage1, Stage1Config};
use tacle::stage2::{
    align_classifiers, estimate_stats, expand_label_set, to_feature_space, CovarianceMode, Stage2Config, StatsBank,
};
use tacle::stream::{generate_stream, Sample, StreamConfig};
use tacle::threshold::ThresholdSchedule;

fn separated_bank(rng: &mut tacle::rng::Rng) -> (StatsBank, Vec<Vec<f64>>) {
    let centers = vec![vec![4.0, 0.0], vec![-4.0, 0.0], vec![0.0, 4.0], vec![0.0, -4.0]];
    let mut bank = StatsBank::new();
    for (task, pair) in centers.chunks(2).enumerate() {
        let samples: Vec<Sample> = pair
            .iter()
            .enumerate()
            .flat_map(|(k, c)| {
                let class_id = 2 * task + k;
                (0..50)
                    .map(|_| Sample {
                        features: c.iter().map(|v| v + 0.5 * normal(rng)).collect(),
                        class_id,
                        task_id: task + 1,
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let ids = [2 * task, 2 * task + 1];
        bank.insert_task(estimate_stats(&samples, &ids, 1e-4, CovarianceMode::Full).unwrap()).unwrap();
    }
    (bank, centers)
}

#[test]
fn alignment_separates_stored_classes() {
    let mut rng = rng::seeded(1, Stream::Train);
    let (bank, centers) = separated_bank(&mut rng);
    let mut model = Model::new(FeatureMap::Identity { dim: 2 });
    model.add_head(vec![0, 1]);
    model.add_head(vec![2, 3]);
    let cfg = Stage2Config { epochs: 20, ..Default::default() };
    let rep = align_classifiers(&mut model, &bank, &cfg, &mut rng).unwrap();
    assert!(rep.epoch_loss.last().unwrap() < rep.epoch_loss.first().unwrap());

    let mut hits = 0;
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..100 {
            let x: Vec<f64> = center.iter().map(|v| v + 0.5 * normal(&mut rng)).collect();
            hits += (model.predict(&x).unwrap() == c) as usize;
        }
    }
    assert!(hits as f64 / 400.0 > 0.95, "accuracy {}", hits as f64 / 400.0);
}

#[test]
fn alignment_leaves_feature_layer_alone() {
    let mut rng = rng::seeded(2, Stream::Train);
    let mut model = random_model(&mut rng, 2, &[2, 2], Some(Activation::Tanh));
    let (bank, _) = separated_bank(&mut rng);
    let before = model.feature.clone();
    let heads_before = model.heads.clone();
    align_classifiers(&mut model, &bank, &Stage2Config::default(), &mut rng).unwrap();
    assert_eq!(model.feature, before);
    assert_ne!(model.heads, heads_before);
}

#[test]
fn alignment_needs_every_class() {
    let mut rng = rng::seeded(3, Stream::Train);
    let (bank, _) = separated_bank(&mut rng);
    let mut model = Model::new(FeatureMap::Identity { dim: 2 });
    model.add_head(vec![0, 1]);
    model.add_head(vec![2, 9]);
    assert!(align_classifiers(&mut model, &bank, &Stage2Config::default(), &mut rng).is_err());
}

#[test]
fn bank_is_append_only_and_round_trips() {
    let mut rng = rng::seeded(4, Stream::Train);
    let (mut bank, _) = separated_bank(&mut rng);
    assert_eq!(bank.len(), 4);
    let dup = vec![bank.get(0).unwrap().clone()];
    assert!(bank.insert_task(dup).is_err());
    assert_eq!(bank.len(), 4);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.json");
    bank.save(&path).unwrap();
    assert_eq!(StatsBank::load(&path).unwrap(), bank);
    assert!(bank.iter().all(|s| s.sigma.is_symmetric(0.0)));
}

/// Distance between estimated and true class means, labeled set vs the
/// expanded set, after stage-1 training on the first task.
fn mean_errors(seed: u64) -> (f64, f64) {
    let stream = generate_stream(&StreamConfig { num_tasks: 1, seed, ..Default::default() }).unwrap();
    let task = &stream.tasks[0];
    let mut model = Model::new(FeatureMap::Identity { dim: stream.feature_dim });
    model.add_head(task.class_set.clone());
    let mut rng = rng::seeded(seed, Stream::Train);
    let sched = ThresholdSchedule::default();
    train_task_stage1(&mut model, task, &sched, &Stage1Config::default(), true, &mut rng).unwrap();

    let thr = sched.threshold_at(1).unwrap();
    let expanded = to_feature_space(&model, &expand_label_set(task, &model, thr).unwrap()).unwrap();
    let labeled = to_feature_space(&model, &task.labeled).unwrap();
    let err = |samples: &[Sample]| {
        let stats = estimate_stats(samples, &task.class_set, 0.0, CovarianceMode::Full).unwrap();
        stats
            .iter()
            .map(|s| {
                let c = &stream.class_centers[&s.class_id];
                s.mu.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / stats.len() as f64
    };
    (err(&expanded), err(&labeled))
}

#[test]
fn expanded_set_gives_better_means() {
    let (mut exp, mut lab) = (0.0, 0.0);
    for seed in 0..5 {
        let (e, l) = mean_errors(seed);
        exp += e;
        lab += l;
    }
    assert!(exp <= lab, "expanded {exp:.3} vs labeled {lab:.3}");
}

#[test]
fn expanded_set_contains_labeled_samples() {
    let stream = generate_stream(&StreamConfig { num_tasks: 1, ..Default::default() }).unwrap();
    let task = &stream.tasks[0];
    let mut model = Model::new(FeatureMap::Identity { dim: stream.feature_dim });
    model.add_head(task.class_set.clone());
    // untrained head: uniform probabilities, nothing passes
    let set = expand_label_set(task, &model, 0.5).unwrap();
    assert_eq!(set, task.labeled);
}
