use super::*;
use crate::data::Split;
use ndarray::Array2;

/// Toy dataset with `counts[c]` rows of class `c`, random pixels.
pub(crate) fn toy(counts: &[usize], dim: usize, seed: u64) -> RawDataset<f64> {
    let mut rng = derive_rng(seed, "toy", 0);
    let labels: Vec<u8> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat(c as u8).take(n))
        .collect();
    let images = Array2::from_shape_simple_fn((labels.len(), dim), || rng.random::<f64>());
    RawDataset::from_unit_interval(DatasetId::Synthetic, Split::Train, images, labels).unwrap()
}

fn spec(normal: u8, alpha: f64, beta: Vec<f64>, gamma: f64, zeta: f64) -> StreamSpec {
    let n = beta.len();
    StreamSpec {
        dataset: DatasetId::Synthetic,
        normal_class: normal,
        n_experiences: n,
        alpha,
        beta,
        gamma,
        zeta,
        lambda_classes: vec![all_anomaly_classes(normal); n],
        seed: 7,
        val_fraction: 0.1,
        augment_normal_labelled: false,
        n_test_episodes: 15,
        train_limit: None,
        test_limit: None,
    }
}

#[test]
fn anomaly_transform_marks_non_normal() {
    let raw = RawDataset::<f64>::from_unit_interval(
        DatasetId::Synthetic,
        Split::Train,
        Array2::zeros((3, 2)),
        vec![3, 3, 5],
    )
    .unwrap();
    let b = apply_anomaly_transform(&raw, 3).unwrap();
    assert_eq!(b.binary_labels(), &[0, 0, 1]);
    assert_eq!(b.classes(), &[3, 3, 5]);
}

#[test]
fn anomaly_transform_all_normal_is_all_zero() {
    let raw = toy(&[0, 0, 0, 4], 2, 1);
    let b = apply_anomaly_transform(&raw, 3).unwrap();
    assert!(b.binary_labels().iter().all(|&y| y == 0));
}

#[test]
fn equal_beta_without_anomalies() {
    let raw = toy(&[1000, 100], 4, 1);
    let data = apply_anomaly_transform(&raw, 0).unwrap();
    let s = build_training_stream(&data, &spec(0, 0.1, vec![0.5, 0.5], 0.0, 0.0)).unwrap();
    assert_eq!(s.len(), 2);
    for e in &s.experiences {
        let c = Composition::of(e);
        assert_eq!(c.n_labelled_normal, 50);
        assert_eq!(c.n_labelled_anomalous, 0);
        assert_eq!(c.n_unlabelled_anomalous, 0);
        assert_eq!(c.n_unlabelled_normal, 450);
    }
    assert!(validate_stream(&s).is_empty());
}

#[test]
fn gamma_five_percent_adds_eleven_anomalies() {
    // Oracle: the k minimizing |k/(200+k) - 0.05| over k in 0..=50.
    let oracle = (0..=50usize)
        .min_by(|&a, &b| {
            let da = (a as f64 / (200 + a) as f64 - 0.05).abs();
            let db = (b as f64 / (200 + b) as f64 - 0.05).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    assert_eq!(oracle, 11);

    let raw = toy(&[1000, 50, 50], 4, 2);
    let data = apply_anomaly_transform(&raw, 0).unwrap();
    let s = build_training_stream(&data, &spec(0, 0.2, vec![1.0], 0.05, 0.0)).unwrap();
    let c = Composition::of(&s.experiences[0]);
    assert_eq!(c.n_labelled_normal, 200);
    assert_eq!(c.n_labelled_anomalous, oracle);
    assert!(validate_stream(&s).is_empty());
}

#[test]
fn zeta_injects_unlabelled_anomalies_from_lambda() {
    let raw = toy(&[400, 200, 200, 200], 3, 3);
    let data = apply_anomaly_transform(&raw, 0).unwrap();
    let mut sp = spec(0, 0.25, vec![0.5, 0.5], 0.1, 0.2);
    sp.lambda_classes = vec![vec![1], vec![2, 3]];
    let s = build_training_stream(&data, &sp).unwrap();
    assert!(validate_stream(&s).is_empty(), "{:?}", validate_stream(&s));
    let c0 = Composition::of(&s.experiences[0]);
    assert_eq!(c0.n_unlabelled_normal, 150);
    assert_eq!(c0.n_unlabelled_anomalous, 38); // round(150 * 0.2 / 0.8) = 37.5 -> 38
    let hidden = &s.experiences[0].hidden;
    for (&y, &cls) in hidden.binary.iter().zip(&hidden.classes) {
        if y == ANOMALOUS {
            assert_eq!(cls, 1);
        }
    }
}

#[test]
fn capacity_error_names_experience() {
    let raw = toy(&[1000, 3], 2, 4);
    let data = apply_anomaly_transform(&raw, 0).unwrap();
    let err = build_training_stream(&data, &spec(0, 0.5, vec![1.0], 0.2, 0.0)).unwrap_err();
    match err {
        CsadError::Capacity {
            experience,
            classes,
            available,
            ..
        } => {
            assert_eq!(experience, 0);
            assert_eq!(available, 3);
            assert!(classes.contains(&1));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn identical_specs_give_identical_manifests() {
    let raw = toy(&[300, 100, 100], 5, 5);
    let data = apply_anomaly_transform(&raw, 0).unwrap();
    let sp = spec(0, 0.2, vec![0.3, 0.7], 0.1, 0.1);
    let a = StreamManifest::of(&build_training_stream(&data, &sp).unwrap()).to_json();
    let b = StreamManifest::of(&build_training_stream(&data, &sp).unwrap()).to_json();
    assert_eq!(a, b);
    let mut other = sp.clone();
    other.seed += 1;
    let c = StreamManifest::of(&build_training_stream(&data, &other).unwrap()).to_json();
    assert_ne!(a, c);
}

#[test]
fn manifest_hash_verifies_and_detects_edits() {
    let raw = toy(&[100, 30], 2, 6);
    let data = apply_anomaly_transform(&raw, 0).unwrap();
    let s = build_training_stream(&data, &spec(0, 0.2, vec![1.0], 0.1, 0.1)).unwrap();
    let mut m = StreamManifest::of(&s);
    assert!(m.verify_hash());
    m.experiences[0].counts.n_labelled_normal += 1;
    assert!(!m.verify_hash());
}

#[test]
fn validation_carves_exact_stratified_tenth() {
    // 900 normals at alpha = 0.1 -> 90 labelled; gamma = 0.1 -> 10 anomalies.
    let raw = toy(&[900, 50], 2, 7);
    let data = apply_anomaly_transform(&raw, 0).unwrap();
    let train = build_training_stream(&data, &spec(0, 0.1, vec![1.0], 0.1, 0.0)).unwrap();
    let c = Composition::of(&train.experiences[0]);
    assert_eq!((c.n_labelled_normal, c.n_labelled_anomalous), (90, 10));
    let (train, val) = build_validation_stream(train, 0.1).unwrap();
    let v = Composition::of(&val.experiences[0]);
    assert_eq!((v.n_labelled_normal, v.n_labelled_anomalous), (9, 1));
    let t = Composition::of(&train.experiences[0]);
    assert_eq!((t.n_labelled_normal, t.n_labelled_anomalous), (81, 9));
    assert!(check_disjoint(&train, &val).is_empty());
    assert!(validate_stream(&train).is_empty());
}

#[test]
fn gamma_zero_validation_is_all_normal() {
    let raw = toy(&[500, 50], 2, 8);
    let data = apply_anomaly_transform(&raw, 0).unwrap();
    let train = build_training_stream(&data, &spec(0, 0.2, vec![0.5, 0.5], 0.0, 0.0)).unwrap();
    let (_, val) = build_validation_stream(train, 0.1).unwrap();
    for e in &val.experiences {
        assert!(e.y_labelled().iter().all(|&y| y == NORMAL));
        assert_eq!(e.n_labelled(), 5);
    }
}

#[test]
fn tiny_experience_falls_back_to_random_split() {
    let raw = toy(&[40, 10], 2, 9);
    let data = apply_anomaly_transform(&raw, 0).unwrap();
    // 4 normals + 1 anomaly: 10 % of 5 rounds to 1, but neither class is owed one
    let train = build_training_stream(&data, &spec(0, 0.1, vec![1.0], 0.2, 0.0)).unwrap();
    assert_eq!(train.experiences[0].n_labelled(), 5);
    let (train, val) = build_validation_stream(train, 0.1).unwrap();
    assert_eq!(val.experiences[0].n_labelled(), 1);
    assert!(train.notes.iter().any(|n| n.contains("fell back")));
}

#[test]
fn augmented_twins_travel_with_their_source() {
    let raw = toy(&[400, 100], 16, 10)
        .with_shape(ImageShape::new(1, 4, 4))
        .unwrap();
    let data = apply_anomaly_transform(&raw, 0).unwrap();
    let mut sp = spec(0, 0.25, vec![1.0], 0.05, 0.0);
    sp.augment_normal_labelled = true;
    let train = build_training_stream(&data, &sp).unwrap();
    let c = Composition::of(&train.experiences[0]);
    assert_eq!(c.n_labelled_normal, 200);
    assert_eq!(c.n_augmented, 100);
    let (train, val) = build_validation_stream(train, 0.1).unwrap();
    let v = Composition::of(&val.experiences[0]);
    assert_eq!(v.n_labelled_normal, 20);
    assert!(check_disjoint(&train, &val).is_empty());
}

#[test]
fn test_stream_single_episode_keeps_everything() {
    let raw = toy(&[10; 10], 2, 11);
    let data = apply_anomaly_transform(&raw, 0).unwrap();
    let s = build_test_stream(&data, 1, &spec(0, 0.1, vec![1.0], 0.0, 0.0)).unwrap();
    assert_eq!(s.len(), 1);
    assert_eq!(s.experiences[0].n_unlabelled(), 100);
    assert_eq!(s.experiences[0].n_labelled(), 0);
}

#[test]
fn test_stream_balanced_classes_split_exactly() {
    let raw = toy(&[10; 10], 2, 12);
    let data = apply_anomaly_transform(&raw, 0).unwrap();
    let s = build_test_stream(&data, 5, &spec(0, 0.1, vec![1.0], 0.0, 0.0)).unwrap();
    for e in &s.experiences {
        let mut per_class = [0usize; 10];
        for &c in e.ground_truth_classes() {
            per_class[c as usize] += 1;
        }
        assert_eq!(per_class, [2; 10]);
    }
}

#[test]
fn test_stream_uneven_sizes_differ_by_at_most_one() {
    let raw = toy(&[98, 113, 103, 101, 98, 89, 96, 103, 97, 101], 2, 13);
    let data = apply_anomaly_transform(&raw, 0).unwrap();
    let s = build_test_stream(&data, 15, &spec(0, 0.1, vec![1.0], 0.0, 0.0)).unwrap();
    let sizes: Vec<usize> = s.experiences.iter().map(|e| e.n_unlabelled()).collect();
    assert_eq!(sizes.iter().sum::<usize>(), 999);
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
}

#[test]
fn test_stream_rejects_more_episodes_than_smallest_class() {
    let raw = toy(&[10, 3], 2, 14);
    let data = apply_anomaly_transform(&raw, 0).unwrap();
    assert!(matches!(
        build_test_stream(&data, 4, &spec(0, 0.1, vec![1.0], 0.0, 0.0)),
        Err(CsadError::Stratification(_))
    ));
}

#[test]
fn allocation_sums_and_stays_within_one() {
    let parts = allocate(101, &[0.8, 0.05, 0.05, 0.05, 0.05]);
    assert_eq!(parts.iter().sum::<usize>(), 101);
    for (p, w) in parts.iter().zip([0.8, 0.05, 0.05, 0.05, 0.05]) {
        assert!((*p as f64 - 101.0 * w).abs() < 1.0);
    }
}

#[test]
fn stratified_take_preserves_class_shares() {
    let labels: Vec<u8> = (0..1000).map(|i| (i % 4) as u8).collect();
    let idx = stratified_take(&labels, 100, 3);
    assert_eq!(idx.len(), 100);
    for c in 0..4u8 {
        assert_eq!(idx.iter().filter(|&&i| labels[i] == c).count(), 25);
    }
}

proptest::proptest! {
    #![proptest_config(proptest::test_runner::Config::with_cases(24))]
    #[test]
    fn random_specs_respect_composition(
        alpha in 0.05f64..0.9,
        gamma in 0.0f64..0.3,
        zeta in 0.0f64..0.3,
        raw_beta in proptest::collection::vec(0.05f64..1.0, 1..6),
        seed in 0u64..1000,
    ) {
        let total: f64 = raw_beta.iter().sum();
        let beta: Vec<f64> = raw_beta.iter().map(|b| b / total).collect();
        let raw = toy(&[600, 300, 300, 300], 2, seed);
        let data = apply_anomaly_transform(&raw, 0).unwrap();
        let mut sp = spec(0, alpha, beta.clone(), gamma, zeta);
        sp.seed = seed;
        let train = build_training_stream(&data, &sp).unwrap();
        let v = validate_stream(&train);
        proptest::prop_assert!(v.is_empty(), "{:?}", v);
        let n_lab: usize = train.experiences.iter().map(|e| Composition::of(e).n_labelled_normal).sum();
        proptest::prop_assert!((n_lab as f64 - alpha * 600.0).abs() <= 1.0);
        for (e, b) in train.experiences.iter().zip(&beta) {
            let got = Composition::of(e).n_labelled_normal as f64;
            proptest::prop_assert!((got - b * n_lab as f64).abs() <= 1.0);
        }
        let (train, val) = build_validation_stream(train, 0.1).unwrap();
        let v = check_disjoint(&train, &val);
        proptest::prop_assert!(v.is_empty(), "{:?}", v);
    }
}
