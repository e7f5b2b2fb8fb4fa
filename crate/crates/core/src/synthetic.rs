//! Two-level prototype datasets and streams for fast end-to-end checks.
//!
//! Every feature of a prototype sits at one of two levels, `LOW` or `HIGH`,
//! and samples add isotropic Gaussian noise. An anomalous prototype is the
//! normal one with some features flipped to the other level, as many as it
//! takes to put it `separation` within-class standard deviations away. With
//! `drift > 0` the normal prototype flips a growing part of a fixed feature
//! set from one experience to the next, ending `drift` standard deviations
//! from where it started, and each test episode holds the data of the
//! matching experience. Flips keep the per-feature Bernoulli entropy
//! unchanged, so only the pattern separates the classes.
//!
//! All classes also vary along one shared random sign pattern scaled by a
//! standard normal style factor, so a feature's within-class standard
//! deviation is `sqrt(noise_sigma² + style_sigma²)` and at zero separation
//! the classes share one distribution.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetId, RawDataset, Split, N_CLASSES};
use crate::error::{CsadError, Result};
use crate::rng::{derive_rng, derive_seed};
use crate::scalar::{c, Scalar};
use crate::stream::{build_streams, Stream, StreamKind, StreamSet, StreamSpec};

pub const LOW: f64 = 0.15;
pub const HIGH: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_features: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
    /// Distance from the normal prototype to each anomalous prototype, in
    /// within-class standard deviations.
    pub separation: f64,
    /// Per-feature amplitude of a one-dimensional within-class style factor.
    pub style_sigma: f64,
    /// Distance the normal prototype travels across the stream, in
    /// within-class standard deviations.
    pub drift: f64,
    pub prototype_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_features: 32,
            train_per_class: 300,
            test_per_class: 60,
            noise_sigma: 0.1,
            separation: 10.0,
            style_sigma: 0.1,
            drift: 0.0,
            prototype_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(CsadError::Config("synthetic sizes must be positive".into()));
        }
        if !(self.separation >= 0.0 && self.drift >= 0.0) {
            return Err(CsadError::Config("separation and drift must be non-negative".into()));
        }
        for (name, v) in [("separation", self.separation), ("drift", self.drift)] {
            if self.flips_for(v) > self.n_features {
                return Err(CsadError::Config(format!(
                    "{name} {v} needs more than the {} available features",
                    self.n_features
                )));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.style_sigma >= 0.0) {
            return Err(CsadError::Config("noise_sigma and style_sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Per-feature standard deviation within a class.
    pub fn within_sigma(&self) -> f64 {
        self.noise_sigma.hypot(self.style_sigma)
    }

    /// Number of flipped features that places two prototypes `distance`
    /// within-class standard deviations apart.
    pub fn flips_for(&self, distance: f64) -> usize {
        let r = distance * self.within_sigma() / (HIGH - LOW);
        (r * r).round() as usize
    }
}

fn flip(v: f64) -> f64 {
    if v == LOW {
        HIGH
    } else {
        LOW
    }
}

struct Prototypes {
    base: Array1<f64>,
    anomaly: Vec<Array1<f64>>,
    drift_order: Vec<usize>,
    style: Array1<f64>,
}

impl Prototypes {
    fn new(spec: &SyntheticSpec) -> Self {
        let d = spec.n_features;
        let mut rng = derive_rng(spec.prototype_seed, "synthetic-prototypes", 0);
        let base = Array1::from_shape_simple_fn(d, || if rng.random_bool(0.5) { HIGH } else { LOW });
        let n_flip = spec.flips_for(spec.separation);
        let mut idx: Vec<usize> = (0..d).collect();
        let anomaly = (0..N_CLASSES)
            .map(|_| {
                idx.shuffle(&mut rng);
                let mut p = base.clone();
                for &j in &idx[..n_flip] {
                    p[j] = flip(p[j]);
                }
                p
            })
            .collect();
        idx.shuffle(&mut rng);
        let style = Array1::from_shape_simple_fn(d, || if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        Self {
            base,
            anomaly,
            drift_order: idx,
            style,
        }
    }

    fn center(&self, spec: &SyntheticSpec, class: u8, normal: u8, stage_t: f64) -> Array1<f64> {
        if class == normal {
            let n = (stage_t * spec.flips_for(spec.drift) as f64).round() as usize;
            let mut p = self.base.clone();
            for &j in &self.drift_order[..n] {
                p[j] = flip(p[j]);
            }
            p
        } else {
            self.anomaly[class as usize].clone()
        }
    }
}

/// Raw ten-class dataset drawn around the prototypes. `stage_t ∈ [0, 1]`
/// places the normal prototype along its drift path.
pub fn synthetic_raw<A: Scalar>(
    spec: &SyntheticSpec,
    normal_class: u8,
    split: Split,
    stage_t: f64,
    seed: u64,
) -> Result<RawDataset<A>> {
    let protos = Prototypes::new(spec);
    let per = match split {
        Split::Train => spec.train_per_class,
        Split::Test => spec.test_per_class,
    };
    let d = spec.n_features;
    let mut rng = derive_rng(seed, "synthetic-samples", split as u64);
    let mut x = Array2::<A>::zeros((per * N_CLASSES, d));
    let mut labels = Vec::with_capacity(per * N_CLASSES);
    for class in 0..N_CLASSES as u8 {
        let center = protos.center(spec, class, normal_class, stage_t);
        let style = &protos.style;
        for _ in 0..per {
            let row = labels.len();
            let s: f64 = StandardNormal.sample(&mut rng);
            for j in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = center[j] + spec.style_sigma * s * style[j] + spec.noise_sigma * z;
                x[[row, j]] = c(v.clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    RawDataset::from_unit_interval(DatasetId::Synthetic, split, x, labels)
}

/// Train / validation / test streams over synthetic data. Without drift
/// this is the ordinary stream builder on one synthetic dataset; with drift
/// every experience is built from its own stage and the test stream has one
/// episode per experience.
pub fn make_synthetic_stream<A: Scalar>(syn: &SyntheticSpec, spec: &StreamSpec) -> Result<StreamSet<A>> {
    syn.validate()?;
    spec.validate()?;
    if syn.drift == 0.0 {
        let train = synthetic_raw::<A>(syn, spec.normal_class, Split::Train, 0.0, spec.seed)?;
        let test = synthetic_raw::<A>(syn, spec.normal_class, Split::Test, 0.0, spec.seed)?;
        return build_streams(&train, &test, spec);
    }
    let n = spec.n_experiences;
    let mut merged = spec.clone();
    merged.n_test_episodes = n;
    let mut parts: Vec<StreamSet<A>> = Vec::with_capacity(n);
    let mut hash = Sha256::new();
    for k in 0..n {
        let t = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 };
        let stage_seed = derive_seed(spec.seed, "drift-stage", k as u64);
        let train = synthetic_raw::<A>(syn, spec.normal_class, Split::Train, t, stage_seed)?;
        let test = synthetic_raw::<A>(syn, spec.normal_class, Split::Test, t, stage_seed)?;
        hash.update(train.content_hash().as_bytes());
        hash.update(test.content_hash().as_bytes());
        let sub = StreamSpec {
            n_experiences: 1,
            beta: vec![1.0],
            lambda_classes: vec![spec.lambda_classes[k].clone()],
            seed: stage_seed,
            n_test_episodes: 1,
            train_limit: None,
            test_limit: None,
            ..spec.clone()
        };
        parts.push(build_streams(&train, &test, &sub)?);
    }
    let dataset_hash = hex::encode(hash.finalize());
    let (n_train_rows, n_test_rows) = (syn.train_per_class * N_CLASSES, syn.test_per_class * N_CLASSES);
    let mut out: [Stream<A>; 3] = [StreamKind::Train, StreamKind::Validation, StreamKind::Test].map(|kind| Stream {
        kind,
        spec: merged.clone(),
        dataset_hash: dataset_hash.clone(),
        experiences: Vec::with_capacity(n),
        notes: Vec::new(),
    });
    for (k, set) in parts.into_iter().enumerate() {
        for (slot, (s, rows)) in [
            (set.train, n_train_rows),
            (set.validation, n_train_rows),
            (set.test, n_test_rows),
        ]
        .into_iter()
        .enumerate()
        {
            out[slot].notes.extend(s.notes.into_iter().map(|m| format!("stage {k}: {m}")));
            for exp in s.experiences {
                out[slot].experiences.push(exp.relocate(k, k * rows));
            }
        }
    }
    let [train, validation, test] = out;
    Ok(StreamSet {
        train,
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{check_disjoint, validate_stream};

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_features: 8,
            train_per_class: 60,
            test_per_class: 20,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn raw_values_in_range_and_balanced() {
        let r = synthetic_raw::<f32>(&small(), 0, Split::Train, 0.0, 1).unwrap();
        assert_eq!(r.len(), 600);
        assert!(r.images().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(r.labels().iter().filter(|&&l| l == 3).count(), 60);
    }

    #[test]
    fn flips_keep_entropy() {
        let p = Prototypes::new(&small());
        let h = |v: &Array1<f64>| v.iter().map(|&q| -(q * q.ln() + (1.0 - q) * (1.0 - q).ln())).sum::<f64>();
        let spec = SyntheticSpec { drift: 12.0, ..small() };
        let a = p.center(&spec, 3, 0, 0.0);
        let n = p.center(&spec, 0, 0, 1.0);
        assert!((h(&a) - h(&p.base)).abs() < 1e-12);
        assert!((h(&n) - h(&p.base)).abs() < 1e-12);
        assert_eq!(a.iter().zip(&p.base).filter(|(x, y)| x != y).count(), 4);
        assert!(small().validate().is_ok());
        assert!(SyntheticSpec { drift: 20.0, ..small() }.validate().is_err());
        assert_eq!(small().flips_for(5.0), 1);
        assert_eq!(small().flips_for(7.0), 2);
        assert_eq!(small().flips_for(10.0), 4);
        assert_eq!(small().flips_for(0.0), 0);
    }

    #[test]
    fn static_stream_obeys_builder_invariants() {
        let mut spec = StreamSpec::ablation_default(DatasetId::Synthetic, 0, 4);
        spec.n_test_episodes = 5;
        let set = make_synthetic_stream::<f64>(&small(), &spec).unwrap();
        assert_eq!(set.train.len(), 5);
        assert_eq!(set.test.len(), 5);
        assert_eq!(set.train.input_dim(), Some(8));
    }

    #[test]
    fn drift_stream_has_one_episode_per_experience() {
        let syn = SyntheticSpec {
            drift: 12.0,
            ..small()
        };
        let mut spec = StreamSpec::ablation_default(DatasetId::Synthetic, 2, 5);
        spec.n_experiences = 3;
        spec.beta = vec![1.0 / 3.0; 3];
        spec.lambda_classes.truncate(3);
        spec.gamma = 0.1;
        spec.zeta = 0.1;
        let set = make_synthetic_stream::<f64>(&syn, &spec).unwrap();
        assert_eq!(set.test.len(), 3);
        assert!(validate_stream(&set.train).is_empty(), "{:?}", validate_stream(&set.train));
        assert!(check_disjoint(&set.train, &set.validation).is_empty());
        for (k, e) in set.train.experiences.iter().enumerate() {
            assert_eq!(e.index(), k);
        }
        // the normal mean moves between the first and last stage
        let mean = |e: &crate::stream::Experience<f64>| e.x_unlabelled().mean_axis(ndarray::Axis(0)).unwrap();
        let a = mean(&set.train.experiences[0]);
        let b = mean(&set.train.experiences[2]);
        let d = (&a - &b).mapv(|v| v * v).sum().sqrt();
        assert!(d > 1.0, "{d}");
    }

    #[test]
    fn deterministic() {
        let spec = StreamSpec::ablation_default(DatasetId::Synthetic, 0, 4);
        let a = make_synthetic_stream::<f64>(&small(), &spec).unwrap();
        let b = make_synthetic_stream::<f64>(&small(), &spec).unwrap();
        assert_eq!(a.train.dataset_hash, b.train.dataset_hash);
        assert_eq!(a.test.experiences[0].x_unlabelled(), b.test.experiences[0].x_unlabelled());
    }
}
