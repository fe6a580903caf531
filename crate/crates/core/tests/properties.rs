use std::collections::{BTreeSet, HashSet};

use fewshot_de::embedstore::{EmbeddingRecord, EmbeddingStore};
use fewshot_de::episodic::{sample_episode, EpisodeShape};
use fewshot_de::estimator::{estimate_class, CovarianceMode, Strategy as Calibration};
use fewshot_de::protocore::{argmax, classify, compute_prototypes, sq_dist, Prototypes};
use fewshot_de::rng;
use fewshot_de::sampler::even_allocation;
use nalgebra::DVector;
use proptest::prelude::*;

fn vectors(count: usize, dim: usize) -> impl Strategy<Value = Vec<DVector<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0..10.0f64, dim), count)
        .prop_map(|vs| vs.into_iter().map(DVector::from_vec).collect())
}

fn grid_store(classes: usize, per_class: usize, dim: usize) -> EmbeddingStore {
    let records = (0..classes)
        .flat_map(|c| {
            (0..per_class).map(move |i| EmbeddingRecord {
                id: format!("{c}/{i}"),
                label: format!("label{c}"),
                vector: (0..dim).map(|j| (c * 100 + i * 10 + j) as f64).collect(),
            })
        })
        .collect();
    EmbeddingStore::new(dim, records).unwrap()
}

proptest! {
    #[test]
    fn episodes_have_the_requested_shape(
        classes in 2usize..8,
        per_class in 2usize..10,
        seed in any::<u64>(),
        n_frac in 0.0..1.0f64,
        k_frac in 0.0..1.0f64,
    ) {
        let store = grid_store(classes, per_class, 3);
        let n = 1 + ((classes - 1) as f64 * n_frac) as usize;
        let k = 1 + ((per_class - 2) as f64 * k_frac) as usize;
        let q = per_class - k;
        let allowed: BTreeSet<String> = store.labels().map(str::to_owned).collect();
        let shape = EpisodeShape::new(n, k, q).unwrap();
        let episode = sample_episode(&store, &allowed, shape, &mut rng::stream(seed, "prop", &[])).unwrap();

        prop_assert_eq!(episode.n_way(), n);
        prop_assert_eq!(episode.support.len(), n * k);
        prop_assert_eq!(episode.query.len(), n * q);
        let distinct: HashSet<&String> = episode.way_labels.iter().collect();
        prop_assert_eq!(distinct.len(), n);
        for (i, item) in episode.support.iter().enumerate() {
            prop_assert_eq!(item.class, i / k);
        }
        let mut used = HashSet::new();
        for item in episode.support.iter().chain(&episode.query) {
            prop_assert!(used.insert(item.record));
            prop_assert_eq!(&store.record(item.record).label, &episode.way_labels[item.class]);
            prop_assert_eq!(item.vector.as_slice(), store.record(item.record).vector.as_slice());
        }
        for c in 0..n {
            prop_assert_eq!(episode.query.iter().filter(|i| i.class == c).count(), q);
        }
    }

    #[test]
    fn store_round_trips(
        rows in prop::collection::vec(("[a-z]{1,6}", prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 3)), 1..20),
    ) {
        let records: Vec<EmbeddingRecord> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (label, vector))| EmbeddingRecord { id: format!("id-{i}"), label, vector })
            .collect();
        let store = EmbeddingStore::new(3, records).unwrap();
        let mut first = Vec::new();
        store.write_to(&mut first).unwrap();
        let back = EmbeddingStore::from_reader(first.as_slice()).unwrap();
        prop_assert_eq!(&back, &store);
        let mut second = Vec::new();
        back.write_to(&mut second).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn classify_is_a_distribution_peaked_at_the_nearest_prototype(
        protos in vectors(5, 4),
        query in vectors(1, 4),
    ) {
        let protos = Prototypes(protos);
        let probs = classify(&query[0], &protos);
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        let dists: Vec<f64> = protos.0.iter().map(|p| sq_dist(&query[0], p)).collect();
        let best = argmax(&probs);
        prop_assert!(dists.iter().all(|&d| dists[best] <= d));
    }

    #[test]
    fn way_mean_is_the_average_of_shot_means(
        k in 1usize..5,
        r in 1usize..6,
        extra in 0usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = rng::stream(seed, "prop-mean", &[]);
        let draw = |rng: &mut rng::Stream| DVector::from_fn(4, |_, _| rand::Rng::random_range(rng, -3.0..3.0));
        let supports: Vec<_> = (0..k).map(|_| draw(&mut rng)).collect();
        let queries: Vec<_> = (0..r + extra).map(|_| draw(&mut rng)).collect();
        let way = estimate_class(Calibration::Way, &supports, &queries, r, CovarianceMode::Full).unwrap();
        let shot = estimate_class(Calibration::Shot, &supports, &queries, r, CovarianceMode::Full).unwrap();
        let mean = way.mean();
        prop_assert!((&mean - shot.mean()).norm() <= 1e-9 * (1.0 + mean.norm()));
    }

    #[test]
    fn even_allocation_is_balanced(n in 0usize..500, k in 1usize..12) {
        let counts = even_allocation(n, k);
        prop_assert_eq!(counts.len(), k);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
    }

    #[test]
    fn prototypes_ignore_member_order(
        members in vectors(12, 3),
        classes in prop::collection::vec(0usize..3, 12),
        seed in any::<u64>(),
    ) {
        // every class needs at least one member
        let labelled: Vec<(DVector<f64>, usize)> = members
            .into_iter()
            .zip(classes)
            .enumerate()
            .map(|(i, (v, c))| (v, if i < 3 { i } else { c }))
            .collect();
        let mut shuffled = labelled.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng::stream(seed, "prop-order", &[]));
        let a = compute_prototypes(labelled.iter().map(|(v, c)| (v, *c)), 3).unwrap();
        let b = compute_prototypes(shuffled.iter().map(|(v, c)| (v, *c)), 3).unwrap();
        for (x, y) in a.0.iter().zip(&b.0) {
            prop_assert!((x - y).amax() <= 1e-12);
        }
    }
}
