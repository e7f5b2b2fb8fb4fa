use std::path::Path;

use csad_core::data::DatasetId;
use csad_core::experiment::{collect_records, emit_report, run_experiment, ExperimentConfig, RunOptions};
use csad_core::rng::derive_rng;
use csad_core::ssvae::ClassifierSpec;
use rand::Rng;

const TRAIN_PER_CLASS: usize = 100;
const TEST_PER_CLASS: usize = 20;

/// Rows of class-dependent byte images: a random prototype per class plus noise.
fn images(n_per_class: usize, pixels: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = derive_rng(seed, "fixture", 0);
    let protos: Vec<Vec<u8>> = (0..10).map(|_| (0..pixels).map(|_| rng.random()).collect()).collect();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for i in 0..n_per_class * 10 {
        let class = i % 10;
        y.push(class as u8);
        x.extend(protos[class].iter().map(|&p| p.saturating_add(rng.random_range(0..40))));
    }
    (x, y)
}

fn write_idx(dir: &Path, prefix: &str, n_per_class: usize, seed: u64) {
    let (x, y) = images(n_per_class, 784, seed);
    let n = y.len() as u32;
    let mut img = Vec::new();
    for v in [0x803u32, n, 28, 28] {
        img.extend(v.to_be_bytes());
    }
    img.extend(x);
    let mut lbl = Vec::new();
    for v in [0x801u32, n] {
        lbl.extend(v.to_be_bytes());
    }
    lbl.extend(y);
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lbl).unwrap();
}

fn write_cifar(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    let records = |n_per_class: usize, seed: u64| {
        let (x, y) = images(n_per_class, 3072, seed);
        let mut out = Vec::new();
        for (i, &l) in y.iter().enumerate() {
            out.push(l);
            out.extend(&x[i * 3072..(i + 1) * 3072]);
        }
        out
    };
    let train = records(TRAIN_PER_CLASS, 3);
    let chunk = train.len() / 5;
    for i in 0..5 {
        std::fs::write(dir.join(format!("data_batch_{}.bin", i + 1)), &train[i * chunk..(i + 1) * chunk]).unwrap();
    }
    std::fs::write(dir.join("test_batch.bin"), records(TEST_PER_CLASS, 4)).unwrap();
}

fn fixture_root(root: &Path) {
    for (name, seed) in [("mnist", 1), ("fashion-mnist", 2)] {
        write_idx(&root.join(name), "train", TRAIN_PER_CLASS, seed);
        write_idx(&root.join(name), "t10k", TEST_PER_CLASS, seed + 10);
    }
    write_cifar(&root.join("cifar-10-batches-bin"));
}

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::grid().remove(2);
    c.datasets = vec![DatasetId::Mnist, DatasetId::FashionMnist, DatasetId::Cifar10];
    c.seeds = vec![0];
    c.model.latent_dim = Some(2);
    c.model.encoder_hidden = Some(vec![8]);
    c.model.decoder_hidden = Some(vec![8]);
    c.model.classifier = Some(ClassifierSpec {
        conv: vec![],
        hidden: vec![4],
    });
    c.model.max_epochs = Some(1);
    c.validate().unwrap();
    c
}

#[test]
fn three_datasets_four_strategies_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fixture_root(&data);
    let cfg = tiny_config();
    let opts = RunOptions {
        data_dir: data,
        out_dir: dir.path().join("results"),
        force: false,
        save_checkpoints: false,
    };

    let first = run_experiment(&cfg, &opts).unwrap();
    assert!(first.failures.is_empty(), "{:?}", first.failures);
    assert_eq!(first.written.len(), 12);
    assert_eq!(first.exit_code(), 0);

    let records = collect_records(&opts.out_dir).unwrap();
    assert_eq!(records.len(), 12);
    for r in &records {
        assert_eq!(r.experiment_id, 3);
        assert_eq!(r.seed, 0);
        assert_eq!(r.episodes.len(), 15);
        assert!(r.mean_auc.is_some_and(|a| (0.0..=1.0).contains(&a)));
    }
    let mut cells: Vec<(String, String)> = records.iter().map(|r| (r.dataset.clone(), r.strategy.clone())).collect();
    cells.sort();
    cells.dedup();
    assert_eq!(cells.len(), 12);

    let again = run_experiment(&cfg, &opts).unwrap();
    assert!(again.written.is_empty());
    assert_eq!(again.skipped.len(), 12);

    let a = emit_report(&records, &dir.path().join("a")).unwrap();
    let b = emit_report(&collect_records(&opts.out_dir).unwrap(), &dir.path().join("b")).unwrap();
    assert_eq!(a.files.len(), b.files.len());
    for (fa, fb) in a.files.iter().zip(&b.files) {
        assert_eq!(fa.file_name(), fb.file_name());
        assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap());
    }
    let md = std::fs::read_to_string(dir.path().join("a/report.md")).unwrap();
    for name in ["mnist", "fashion-mnist", "cifar10"] {
        assert!(md.contains(name), "{name} missing from report");
    }
}
