use std::collections::BTreeSet;

use fewshot_de::embedstore::{EmbeddingRecord, EmbeddingStore};
use fewshot_de::episodic::{ClassSplit, EpisodeShape};
use fewshot_de::estimator::{CovarianceMode, Method};
use fewshot_de::harness::{self, EvalConfig, SynthSpec, SyntheticStore, WithinClassCov};
use fewshot_de::protocore::ProjectionHead;
use fewshot_de::rng;
use fewshot_de::sampler::{Allocation, AugmentSettings};
use fewshot_de::trainer::{self, EmbeddedEpisode, OptimizerKind, TrainConfig};
use rand::seq::SliceRandom;

fn benchmark(scale: f64, within: WithinClassCov) -> SyntheticStore {
    harness::make_synthetic(&SynthSpec {
        n_classes: 20,
        dim: 16,
        per_class_count: 40,
        class_mean_scale: scale,
        within,
        seed: 2024,
    })
    .unwrap()
}

fn split_of(synth: &SyntheticStore) -> ClassSplit {
    let labels = &synth.labels;
    ClassSplit {
        seen: labels[..12].iter().cloned().collect(),
        valid: BTreeSet::new(),
        unseen: labels[12..].iter().cloned().collect(),
    }
}

fn augment(method: Method, r: usize, n_gen: usize) -> AugmentSettings {
    AugmentSettings {
        method,
        r,
        n_gen,
        allocation: Allocation::Even,
        cov_mode: CovarianceMode::Full,
    }
}

fn train_config(episodes: usize) -> TrainConfig {
    TrainConfig {
        shape: EpisodeShape::new(5, 1, 5).unwrap(),
        augment: augment(Method::Way, 4, 20),
        lambda: 0.1,
        optimizer: OptimizerKind::AdamW,
        learning_rate: 1e-2,
        weight_decay: 0.01,
        episodes,
        seed: 5,
        d_out: None,
        l2_normalize: false,
    }
}

/// Mean L_total over fixed episodes; generation uses fixed streams too.
fn held_out_loss(
    head: &ProjectionHead,
    synth: &SyntheticStore,
    classes: &BTreeSet<String>,
    config: &TrainConfig,
) -> f64 {
    let held_out = TrainConfig {
        seed: 999,
        ..config.clone()
    };
    let mut total = 0.0;
    for t in 0..50 {
        let episode = trainer::training_episode(&synth.store, classes, &held_out, t).unwrap();
        let mut gen_rng = rng::stream(999, "held-out", &[t as u64]);
        let generated = EmbeddedEpisode::new(head, &episode)
            .unwrap()
            .generate(&config.augment, &mut gen_rng)
            .unwrap();
        total += trainer::episode_losses(head, &episode, &generated, config.lambda)
            .unwrap()
            .l_total;
    }
    total / 50.0
}

#[test]
fn training_lowers_held_out_loss() {
    let synth = benchmark(1.5, WithinClassCov::Random { std: 1.0 });
    let split = split_of(&synth);
    let config = train_config(100);
    let start = ProjectionHead::identity(16);
    let before = held_out_loss(&start, &synth, &split.seen, &config);
    let (head, trace) = trainer::train_from(start, &synth.store, &split, &config).unwrap();
    let after = held_out_loss(&head, &synth, &split.seen, &config);
    assert_eq!(trace.rows.len(), 100);
    assert!(after < before, "held-out L_total {before} -> {after}");
}

#[test]
fn zero_episodes_returns_the_initial_head() {
    let synth = benchmark(3.5, WithinClassCov::Random { std: 1.0 });
    let config = train_config(0);
    let (head, trace) = trainer::train(&synth.store, &split_of(&synth), &config).unwrap();
    assert_eq!(head, trainer::initial_head(16, &config));
    assert!(trace.rows.is_empty());
}

#[test]
fn training_is_deterministic() {
    let synth = benchmark(3.5, WithinClassCov::Random { std: 1.0 });
    let split = split_of(&synth);
    let config = train_config(20);
    let a = trainer::train(&synth.store, &split, &config).unwrap();
    let b = trainer::train(&synth.store, &split, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.1.to_csv(), b.1.to_csv());
}

#[test]
fn trained_head_round_trips_through_a_checkpoint() {
    let synth = benchmark(3.5, WithinClassCov::Random { std: 1.0 });
    let (head, _) = trainer::train(&synth.store, &split_of(&synth), &train_config(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.txt");
    head.save(&path).unwrap();
    assert_eq!(ProjectionHead::load(&path).unwrap(), head);
}

#[test]
fn calibration_helps_on_separated_classes() {
    let synth = benchmark(6.0, WithinClassCov::Isotropic { std: 1.0 });
    let classes: BTreeSet<String> = synth.labels.iter().cloned().collect();
    let err = harness::estimator_error(&synth, &classes, EpisodeShape::new(5, 1, 5).unwrap(), 4, 200, 3).unwrap();
    assert!(err.way_mean < err.support_mean, "{err:?}");
    assert!(err.shot_mean < err.support_mean, "{err:?}");
}

#[test]
fn calibration_error_is_reported_when_neighbors_cross_classes() {
    // every query is a neighbor of every support, so the calibrated mean is
    // pulled halfway to the pooled episode mean
    let synth = harness::make_synthetic(&SynthSpec {
        n_classes: 20,
        dim: 16,
        per_class_count: 60,
        class_mean_scale: 8.0,
        within: WithinClassCov::Isotropic { std: 0.5 },
        seed: 4,
    })
    .unwrap();
    let classes: BTreeSet<String> = synth.labels.iter().cloned().collect();
    let shape = EpisodeShape::new(5, 1, 50).unwrap();
    let err = harness::estimator_error(&synth, &classes, shape, 250, 50, 3).unwrap();
    assert!(err.way_mean.is_finite() && err.way_cov.is_finite());
    assert!(err.way_mean > err.support_mean, "{err:?}");
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let synth = benchmark(3.5, WithinClassCov::Random { std: 1.0 });
    let mut labels: Vec<String> = synth.store.records().iter().map(|r| r.label.clone()).collect();
    labels.shuffle(&mut rng::stream(17, "shuffle-labels", &[]));
    let records: Vec<EmbeddingRecord> = synth
        .store
        .records()
        .iter()
        .zip(labels)
        .map(|(r, label)| EmbeddingRecord { label, ..r.clone() })
        .collect();
    let store = EmbeddingStore::new(16, records).unwrap();
    let split = ClassSplit {
        unseen: store.labels().map(str::to_owned).collect(),
        ..Default::default()
    };
    let config = EvalConfig {
        shape: EpisodeShape::new(5, 1, 5).unwrap(),
        augment: augment(Method::Baseline, 0, 0),
        episodes: 1000,
        runs: 1,
        seed: 3,
        l2_normalize: false,
    };
    let report = harness::evaluate(&store, &split, &ProjectionHead::identity(16), &config).unwrap();
    let accs = &report.runs[0].episode_accuracies;
    let n = accs.len() as f64;
    let std = (accs.iter().map(|a| (a - report.mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = std / n.sqrt();
    assert!((report.mean - 0.2).abs() <= 3.0 * se, "mean {} se {se}", report.mean);
}

#[test]
fn calibrated_evaluation_beats_baseline_on_the_benchmark() {
    let synth = benchmark(3.5, WithinClassCov::Random { std: 1.0 });
    let split = ClassSplit {
        unseen: synth.labels.iter().cloned().collect(),
        ..Default::default()
    };
    let head = ProjectionHead::identity(16);
    let run = |method| {
        let config = EvalConfig {
            shape: EpisodeShape::new(5, 1, 5).unwrap(),
            augment: augment(method, 4, 20),
            episodes: 300,
            runs: 2,
            seed: 13,
            l2_normalize: false,
        };
        harness::evaluate(&synth.store, &split, &head, &config).unwrap().mean
    };
    let baseline = run(Method::Baseline);
    assert!(run(Method::Way) > baseline);
    assert!(run(Method::Shot) > baseline);
}
