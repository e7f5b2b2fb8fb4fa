use csad_core::data::{DatasetId, Split};
use csad_core::eval::{auc_roc, mean_auc};
use csad_core::rng::derive_rng;
use csad_core::ssvae::{SsVae, SsVaeConfig};
use csad_core::strategy::{run_strategy, RunContext, StrategyConfig, StrategyName};
use csad_core::stream::{validate_stream, StreamSpec, TrainingView};
use csad_core::synthetic::{make_synthetic_stream, synthetic_raw, SyntheticSpec};
use csad_core::train::train_one_experience;
use ndarray::{Array1, Array2, Axis};

const SEEDS: [u64; 3] = [0, 1, 2];

fn naive_auc(syn: &SyntheticSpec, seed: u64) -> f64 {
    let spec = StreamSpec::ablation_default(DatasetId::Synthetic, 0, seed);
    let set = make_synthetic_stream::<f32>(syn, &spec).unwrap();
    assert!(validate_stream(&set.train).is_empty());
    let model = SsVae::<f32>::new(SsVaeConfig::for_input(syn.n_features, None), &mut derive_rng(seed, "init", 0)).unwrap();
    let ctx = RunContext { seed, test: Some(&set.test) };
    let run = run_strategy(&StrategyConfig::named(StrategyName::Naive), model, set.train, set.validation, &ctx).unwrap();
    mean_auc(run.snapshots.last().unwrap()).unwrap()
}

fn binary(labels: &[u8]) -> Vec<u8> {
    labels.iter().map(|&l| (l != 0) as u8).collect()
}

/// Mahalanobis distance to the training normals under an isotropic plus
/// rank-one covariance, the exact form the generator uses.
fn mahalanobis_auc(syn: &SyntheticSpec, seed: u64) -> f64 {
    let tr = synthetic_raw::<f64>(syn, 0, Split::Train, 0.0, seed).unwrap();
    let te = synthetic_raw::<f64>(syn, 0, Split::Test, 0.0, seed).unwrap();
    let idx: Vec<usize> = (0..tr.len()).filter(|&i| tr.labels()[i] == 0).collect();
    let x = tr.images().select(Axis(0), &idx);
    let center = x.mean_axis(Axis(0)).unwrap();
    let xc = &x - &center;
    let cov = xc.t().dot(&xc) / x.nrows() as f64;
    let d = cov.nrows();
    let mut u = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    for _ in 0..500 {
        let v = cov.dot(&u);
        u = &v / v.dot(&v).sqrt();
    }
    let top = u.dot(&cov.dot(&u));
    let rest = (cov.diag().sum() - top) / (d - 1) as f64;
    let scores: Vec<f64> = te
        .images()
        .rows()
        .into_iter()
        .map(|r| {
            let r = &r - &center;
            let along = r.dot(&u);
            (r.dot(&r) - along * along) / rest + along * along / top
        })
        .collect();
    auc_roc(&scores, &binary(te.labels())).unwrap()
}

#[test]
fn ten_sigma_is_separable_by_construction() {
    let syn = SyntheticSpec::default();
    assert_eq!(syn.separation, 10.0);
    for seed in SEEDS {
        let a = mahalanobis_auc(&syn, seed);
        assert!(a > 0.999, "seed {seed}: {a}");
    }
}

#[test]
fn ten_sigma_trained_model_exceeds_095() {
    let syn = SyntheticSpec::default();
    for seed in SEEDS {
        let a = naive_auc(&syn, seed);
        assert!(a > 0.95, "seed {seed}: {a}");
    }
}

#[test]
fn zero_separation_is_chance() {
    let syn = SyntheticSpec {
        separation: 0.0,
        ..SyntheticSpec::default()
    };
    let aucs: Vec<f64> = SEEDS.iter().map(|&s| naive_auc(&syn, s)).collect();
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.05, "{aucs:?}");
    let syn = SyntheticSpec {
        test_per_class: 600,
        ..syn
    };
    for seed in SEEDS {
        let a = mahalanobis_auc(&syn, seed);
        assert!((a - 0.5).abs() <= 0.05, "seed {seed}: {a}");
    }
}

#[test]
fn normals_only_model_scores_anomalies_higher() {
    let syn = SyntheticSpec::default();
    let tr = synthetic_raw::<f32>(&syn, 0, Split::Train, 0.0, 9).unwrap();
    let te = synthetic_raw::<f32>(&syn, 0, Split::Test, 0.0, 9).unwrap();
    let idx: Vec<usize> = (0..tr.len()).filter(|&i| tr.labels()[i] == 0).collect();
    let x = tr.images().select(Axis(0), &idx);
    let y = vec![0u8; idx.len()];
    let empty = Array2::<f32>::zeros((0, syn.n_features));
    let view = TrainingView {
        x_labelled: x.view(),
        y_labelled: &y,
        x_unlabelled: empty.view(),
    };
    let mut model = SsVae::<f32>::new(SsVaeConfig::for_input(syn.n_features, None), &mut derive_rng(9, "init", 0)).unwrap();
    train_one_experience(&mut model, 0, view, None, None, None, &mut derive_rng(9, "train", 0)).unwrap();
    let s = model.elbo_score(te.images().view(), 3);
    let (mut normal, mut anomalous) = (Vec::new(), Vec::new());
    for (v, &l) in s.iter().zip(te.labels()) {
        if l == 0 { normal.push(*v) } else { anomalous.push(*v) }
    }
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    assert!(mean(&normal) < mean(&anomalous), "{} vs {}", mean(&normal), mean(&anomalous));
}
