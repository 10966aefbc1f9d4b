use proptest::prelude::*;
use tacle::stream::{
    generate_stream, imbalance_counts, read_embeddings, validate_stream, write_embeddings, StreamConfig, Supervision,
    TaskStream,
};

#[test]
fn same_seed_same_stream() {
    let cfg = StreamConfig { seed: 17, ..Default::default() };
    let a = generate_stream(&cfg).unwrap();
    let b = generate_stream(&cfg).unwrap();
    assert_eq!(a, b);
    let json = serde_json::to_string(&a).unwrap();
    let back: TaskStream = serde_json::from_str(&json).unwrap();
    assert_eq!(back, a);
    assert_ne!(generate_stream(&StreamConfig { seed: 18, ..cfg }).unwrap(), a);
}

#[test]
fn supervision_fraction_sets_labeled_count() {
    for (sup, per_class) in [
        (Supervision::Fraction(0.02), 4),
        (Supervision::Fraction(0.1), 20),
        (Supervision::Fraction(0.0001), 1),
        (Supervision::LabeledPerClass(1), 1),
    ] {
        let cfg = StreamConfig { supervision: sup, num_tasks: 2, ..Default::default() };
        let stream = generate_stream(&cfg).unwrap();
        validate_stream(&stream).unwrap();
        for task in &stream.tasks {
            for &c in &task.class_set {
                let labeled = task.labeled.iter().filter(|s| s.class_id == c).count();
                let unlabeled = task.unlabeled.iter().filter(|s| s.class_id == c).count();
                assert_eq!(labeled, per_class, "{sup:?}");
                assert_eq!(labeled + unlabeled, cfg.samples_per_class);
            }
        }
    }
}

#[test]
fn imbalance_endpoints_500_to_5() {
    let counts = imbalance_counts(500, 10, 0.01).unwrap();
    assert_eq!(counts[0], 500);
    assert_eq!(*counts.last().unwrap(), 5);
}

#[test]
fn imbalanced_pool_follows_profile() {
    let cfg = StreamConfig { imbalance_ratio: 0.05, num_tasks: 2, ..Default::default() };
    let stream = generate_stream(&cfg).unwrap();
    let lpc = cfg.labeled_per_class();
    let expected = imbalance_counts(cfg.samples_per_class - lpc, cfg.classes_per_task, 0.05).unwrap();
    for task in &stream.tasks {
        let got: Vec<usize> =
            task.class_set.iter().map(|c| task.unlabeled.iter().filter(|s| s.class_id == *c).count()).collect();
        assert_eq!(got, expected);
        assert!(task.class_set.iter().all(|c| task.labeled.iter().filter(|s| s.class_id == *c).count() == lpc));
    }
}

#[test]
fn classes_are_disjoint_across_tasks() {
    let stream = generate_stream(&StreamConfig::default()).unwrap();
    let mut all: Vec<usize> = stream.tasks.iter().flat_map(|t| t.class_set.clone()).collect();
    let n = all.len();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), n);
    for (t, set) in stream.test_sets.iter().enumerate() {
        assert!(set.iter().all(|s| stream.tasks[t].class_set.contains(&s.class_id)));
        assert_eq!(set.len(), 100 * stream.tasks[t].class_set.len());
    }
}

#[test]
fn embeddings_round_trip() {
    let stream = generate_stream(&StreamConfig { num_tasks: 2, feature_dim: 3, ..Default::default() }).unwrap();
    let mut buf = Vec::new();
    write_embeddings(&stream, &mut buf).unwrap();
    let back = read_embeddings(buf.as_slice(), "mem.csv".as_ref()).unwrap();
    assert_eq!(back.feature_dim, 3);
    assert_eq!(back.tasks, stream.tasks);
}

#[test]
fn bad_rows_report_their_line() {
    let text = "task_id,class_id,labeled,f0,f1\n1,0,1,0.5,0.1\n1,0,0,abc,0.2\n";
    let err = read_embeddings(text.as_bytes(), "x.csv".as_ref()).unwrap_err().to_string();
    assert!(err.contains("x.csv") && err.contains('3'), "{err}");

    let text = "task_id,class_id,labeled,f0\n1,0,1,0.5\n2,0,1,0.1\n";
    assert!(read_embeddings(text.as_bytes(), "y.csv".as_ref()).is_err());

    let text = "task_id,class_id,labeled,f0\n1,0,1,0.5\n1,1,0,0.1\n";
    assert!(read_embeddings(text.as_bytes(), "z.csv".as_ref()).is_err());
}

proptest! {
    #[test]
    fn imbalance_profile_is_monotone(n_max in 1usize..600, n in 1usize..12, ratio in 0.001f64..=1.0) {
        let counts = imbalance_counts(n_max, n, ratio).unwrap();
        prop_assert_eq!(counts.len(), n);
        prop_assert_eq!(counts[0], n_max);
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        if n > 1 {
            let target = ratio * n_max as f64;
            prop_assert!((*counts.last().unwrap() as f64 - target).abs() <= 0.5 + 1e-9);
        }
    }
}
