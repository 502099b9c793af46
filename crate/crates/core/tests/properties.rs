use boostemb_core::data::{synth_gaussian, SynthSpec};
use boostemb_core::eval::{classifier_correlation_from_scores, feature_correlation_raw, recall_at_k};
use boostemb_core::trainer::sample_batch;
use boostemb_core::{EnsembleModel, GroupPartition, MinedItems, PairLabel, Rng};
use proptest::prelude::*;

fn embeddings(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>(), n in 4usize..40, classes in 2u32..6) {
        let emb = embeddings(seed, n, 5);
        let labels: Vec<u32> = (0..n as u32).map(|i| i % classes).collect();
        let ks: Vec<usize> = (1..n).collect();
        let r = recall_at_k(&emb, &labels, &ks).unwrap();
        let values: Vec<f64> = r.values().copied().collect();
        prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn correlations_lie_in_unit_interval(seed in any::<u64>(), m in 2usize..5) {
        let part = GroupPartition::proportional(3 * m, m).unwrap();
        let mut rng = Rng::new(seed);
        let model = EnsembleModel::random(6, part, None, &mut rng).unwrap();
        let raw: Vec<Vec<f64>> = embeddings(seed ^ 1, 30, 6)
            .iter()
            .map(|x| model.embed(x).unwrap())
            .collect();
        let fc = feature_correlation_raw(&model, &raw).unwrap().mean_abs;
        prop_assert!((0.0..=1.0).contains(&fc));
        let scores: Vec<Vec<f64>> = (0..m).map(|k| embeddings(seed + k as u64, 1, 20)[0].clone()).collect();
        let cc = classifier_correlation_from_scores(&scores).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&cc));
    }

    #[test]
    fn batches_have_the_requested_shape(seed in any::<u64>(), p in 2usize..5, k in 2usize..5) {
        let set = synth_gaussian(&SynthSpec {
            classes: 6,
            per_class: 3,
            feature_dim: 2,
            seed: 0,
            ..Default::default()
        })
        .unwrap();
        let mut rng = Rng::new(seed);
        let b = sample_batch(&set.class_index(), p, k, true, None, &mut rng).unwrap();
        prop_assert_eq!(b.indices.len(), p * k);
        let mut classes = b.labels.clone();
        classes.dedup();
        prop_assert_eq!(classes.len(), p);
        for (&i, &l) in b.indices.iter().zip(&b.labels) {
            prop_assert_eq!(set.labels[i], l);
        }
        let MinedItems::Pairs(pairs) = b.items else { unreachable!() };
        let n = p * k;
        prop_assert_eq!(pairs.len(), n * (n - 1) / 2);
        let pos = pairs.iter().filter(|x| x.y == PairLabel::Positive).count();
        prop_assert_eq!(pos, p * k * (k - 1) / 2);
    }
}
