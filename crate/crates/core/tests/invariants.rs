use proptest::prelude::*;

use verbattr::dataio::{
    load_attributes, read_feature_file, write_attributes, write_feature_file, FeatureSet, Prng,
};
use verbattr::numkernel::{softmax, Tensor2};
use verbattr::schema::{binarize, build_schema, debinarize, LabelVector, VerbLabels};
use verbattr::zeroshot::{hubness_stats, predict_topk, prob_product_ensemble};

fn label_strategy() -> impl Strategy<Value = LabelVector> {
    let schema = build_schema();
    let radices: Vec<usize> = schema
        .attributes()
        .iter()
        .map(|a| a.arity.n_values())
        .collect();
    radices
        .into_iter()
        .map(|r| (0..r).boxed())
        .collect::<Vec<_>>()
        .prop_map(LabelVector)
}

proptest! {
    #[test]
    fn topk_is_sorted_and_prefix_closed(scores in prop::collection::vec(-5i32..5, 1..20), k in 1usize..20) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let k = k.min(scores.len());
        let top = predict_topk(&scores, k).unwrap();
        prop_assert_eq!(top.len(), k);
        for w in top.windows(2) {
            let (a, b) = (w[0], w[1]);
            prop_assert!(scores[a] > scores[b] || (scores[a] == scores[b] && a < b));
        }
        if k > 1 {
            prop_assert_eq!(&predict_topk(&scores, k - 1).unwrap()[..], &top[..k - 1]);
        }
    }

    #[test]
    fn product_ensemble_is_a_distribution_and_order_free(
        a in prop::collection::vec(-4.0f64..4.0, 2..10),
        seed in any::<u64>(),
    ) {
        let mut rng = Prng::new(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.normal()).collect();
        let (pa, pb) = (softmax(&a).unwrap(), softmax(&b).unwrap());
        let ab = prob_product_ensemble(&[pa.clone(), pb.clone()]).unwrap();
        let ba = prob_product_ensemble(&[pb, pa]).unwrap();
        prop_assert!((ab.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in ab.iter().zip(&ba) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn hubness_counts_cover_every_prediction(preds in prop::collection::vec(0usize..6, 1..50)) {
        let h = hubness_stats(&preds, 6).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<usize>(), preds.len());
        let top = *h.counts.iter().max().unwrap() as f64 / preds.len() as f64;
        prop_assert!((h.top_share - top).abs() < 1e-15);
        prop_assert!(h.skewness.is_finite());
    }

    #[test]
    fn binarize_round_trips(lv in label_strategy()) {
        let schema = build_schema();
        let row = binarize(&schema, &lv).unwrap();
        prop_assert_eq!(row.len(), 40);
        prop_assert_eq!(debinarize(&schema, &row).unwrap(), lv);
    }

    #[test]
    fn attribute_files_round_trip(rows in prop::collection::vec(label_strategy(), 1..8)) {
        let schema = build_schema();
        let labels: VerbLabels = rows.into_iter().enumerate().map(|(i, l)| (format!("v{}", i), l)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        write_attributes(&labels, &schema, &path).unwrap();
        prop_assert_eq!(load_attributes(&path, &schema).unwrap(), labels);
    }

    #[test]
    fn f32_feature_values_round_trip_bit_exact(seed in any::<u64>(), n in 1usize..6, f in 1usize..5) {
        let mut rng = Prng::new(seed);
        let data: Vec<f64> = (0..n * f).map(|_| (rng.normal() * 1e3) as f32 as f64).collect();
        let verbs: Vec<String> = vec!["x".into(), "y".into()];
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let set = FeatureSet::new(verbs, labels, Tensor2::from_vec(n, f, data).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.feat");
        write_feature_file(&set, &path).unwrap();
        let back = read_feature_file(&path).unwrap();
        prop_assert_eq!(back.features.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        set.features.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back, set);
    }
}

#[test]
fn synthetic_feature_sets_survive_the_file_format() {
    let schema = build_schema();
    let cfg = verbattr::dataio::SynthConfig {
        n_classes: 10,
        n_test_classes: 3,
        instances_per_class: 2,
        feature_dim: 5,
        noise: 0.7,
        ..Default::default()
    };
    let data = verbattr::dataio::synth_generate(&cfg, &schema).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for set in [&data.train_features, &data.test_features] {
        let path = dir.path().join("s.feat");
        write_feature_file(set, &path).unwrap();
        assert_eq!(&read_feature_file(&path).unwrap(), set);
    }
}
