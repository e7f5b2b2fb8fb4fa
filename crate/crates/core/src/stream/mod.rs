//! Turns a labelled 10-class dataset into binary anomaly-detection streams of
//! disjoint experiences.

pub mod augment;
mod manifest;
mod spec;

use std::collections::{BTreeMap, HashSet};

use log::warn;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetId, ImageShape, RawDataset, N_CLASSES};
use crate::error::{CsadError, Result};
use crate::rng::derive_rng;
use crate::scalar::Scalar;

pub use manifest::{ExperienceManifest, StreamManifest, MANIFEST_SCHEMA_VERSION};
pub use spec::{all_anomaly_classes, StreamSpec, DEFAULT_ALPHA, DEFAULT_GAMMA, DEFAULT_ZETA};

pub const NORMAL: u8 = 0;
pub const ANOMALOUS: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Train,
    Validation,
    Test,
}

/// Where a row of an experience came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    /// Row `i` of the source dataset.
    Sample(usize),
    /// Augmented copy of source row `i`.
    Augmented(usize),
}

impl Origin {
    pub fn source(self) -> usize {
        match self {
            Origin::Sample(i) | Origin::Augmented(i) => i,
        }
    }
}

/// Dataset after the normal/anomalous relabelling. The original class id of
/// every row is kept for λ filtering and test stratification.
#[derive(Debug, Clone)]
pub struct BinaryDataset<A> {
    images: Array2<A>,
    binary: Vec<u8>,
    classes: Vec<u8>,
    normal_class: u8,
    name: DatasetId,
    shape: Option<ImageShape>,
    content_hash: String,
}

impl<A: Scalar> BinaryDataset<A> {
    pub fn images(&self) -> &Array2<A> {
        &self.images
    }

    pub fn binary_labels(&self) -> &[u8] {
        &self.binary
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn normal_class(&self) -> u8 {
        self.normal_class
    }

    pub fn name(&self) -> DatasetId {
        self.name
    }

    pub fn shape(&self) -> Option<ImageShape> {
        self.shape
    }

    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    pub fn len(&self) -> usize {
        self.binary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.binary.is_empty()
    }

    pub fn n_normal(&self) -> usize {
        self.binary.iter().filter(|&&y| y == NORMAL).count()
    }
}

pub fn apply_anomaly_transform<A: Scalar>(raw: &RawDataset<A>, normal_class: u8) -> Result<BinaryDataset<A>> {
    if normal_class as usize >= N_CLASSES {
        return Err(CsadError::Validation(format!(
            "normal_class {normal_class} outside 0..=9"
        )));
    }
    let classes = raw.labels().to_vec();
    let binary: Vec<u8> = classes
        .iter()
        .map(|&c| if c == normal_class { NORMAL } else { ANOMALOUS })
        .collect();
    if !binary.is_empty() && binary.iter().all(|&y| y == NORMAL) {
        warn!(
            "{}: every sample belongs to normal class {normal_class}; no anomalies available",
            raw.name()
        );
    }
    Ok(BinaryDataset {
        images: raw.images().clone(),
        binary,
        classes,
        normal_class,
        name: raw.name(),
        shape: raw.shape(),
        content_hash: raw.content_hash().to_string(),
    })
}

/// Ground truth for the unlabelled part of an experience. Only the evaluation
/// API hands this out.
#[derive(Debug, Clone, Default)]
pub(crate) struct HiddenTruth {
    pub(crate) binary: Vec<u8>,
    pub(crate) classes: Vec<u8>,
}

/// One disjoint chunk of a stream.
#[derive(Debug, Clone)]
pub struct Experience<A> {
    index: usize,
    x_labelled: Array2<A>,
    y_labelled: Vec<u8>,
    labelled_classes: Vec<u8>,
    labelled_origin: Vec<Origin>,
    x_unlabelled: Array2<A>,
    unlabelled_origin: Vec<Origin>,
    hidden: HiddenTruth,
}

/// Everything a training routine may see of an experience.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a, A> {
    pub x_labelled: ArrayView2<'a, A>,
    pub y_labelled: &'a [u8],
    pub x_unlabelled: ArrayView2<'a, A>,
}

impl<'a, A> TrainingView<'a, A> {
    pub fn n_labelled(&self) -> usize {
        self.y_labelled.len()
    }

    pub fn n_unlabelled(&self) -> usize {
        self.x_unlabelled.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.n_labelled() == 0 && self.n_unlabelled() == 0
    }
}

impl<A: Scalar> Experience<A> {
    /// Assemble an experience. `unlabelled_truth` and `unlabelled_classes`
    /// are stored out of reach of the training view.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        index: usize,
        x_labelled: Array2<A>,
        y_labelled: Vec<u8>,
        labelled_classes: Vec<u8>,
        labelled_origin: Vec<Origin>,
        x_unlabelled: Array2<A>,
        unlabelled_truth: Vec<u8>,
        unlabelled_classes: Vec<u8>,
        unlabelled_origin: Vec<Origin>,
    ) -> Result<Self> {
        let nl = x_labelled.nrows();
        let nu = x_unlabelled.nrows();
        if [y_labelled.len(), labelled_classes.len(), labelled_origin.len()] != [nl; 3]
            || [unlabelled_truth.len(), unlabelled_classes.len(), unlabelled_origin.len()] != [nu; 3]
        {
            return Err(CsadError::Validation(format!(
                "experience {index}: row counts of data, labels and provenance disagree"
            )));
        }
        if nl > 0 && nu > 0 && x_labelled.ncols() != x_unlabelled.ncols() {
            return Err(CsadError::Validation(format!(
                "experience {index}: labelled and unlabelled widths differ"
            )));
        }
        Ok(Self {
            index,
            x_labelled,
            y_labelled,
            labelled_classes,
            labelled_origin,
            x_unlabelled,
            unlabelled_origin,
            hidden: HiddenTruth {
                binary: unlabelled_truth,
                classes: unlabelled_classes,
            },
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn training_view(&self) -> TrainingView<'_, A> {
        TrainingView {
            x_labelled: self.x_labelled.view(),
            y_labelled: &self.y_labelled,
            x_unlabelled: self.x_unlabelled.view(),
        }
    }

    pub fn x_labelled(&self) -> &Array2<A> {
        &self.x_labelled
    }

    pub fn y_labelled(&self) -> &[u8] {
        &self.y_labelled
    }

    pub fn x_unlabelled(&self) -> &Array2<A> {
        &self.x_unlabelled
    }

    pub fn labelled_origin(&self) -> &[Origin] {
        &self.labelled_origin
    }

    pub fn unlabelled_origin(&self) -> &[Origin] {
        &self.unlabelled_origin
    }

    pub fn n_labelled(&self) -> usize {
        self.y_labelled.len()
    }

    pub fn n_unlabelled(&self) -> usize {
        self.x_unlabelled.nrows()
    }

    /// Original classes of the labelled rows.
    pub fn labelled_classes(&self) -> &[u8] {
        &self.labelled_classes
    }

    /// Binary truth of the unlabelled rows. For evaluation and stream
    /// validation only; training code goes through `training_view`.
    pub fn ground_truth(&self) -> &[u8] {
        &self.hidden.binary
    }

    /// Original classes of the unlabelled rows, evaluation only.
    pub fn ground_truth_classes(&self) -> &[u8] {
        &self.hidden.classes
    }

    /// Renumber the experience and shift every provenance index, used when
    /// experiences built from separate datasets are merged into one stream.
    pub(crate) fn relocate(mut self, index: usize, origin_offset: usize) -> Self {
        let shift = |o: &mut Origin| {
            *o = match *o {
                Origin::Sample(i) => Origin::Sample(i + origin_offset),
                Origin::Augmented(i) => Origin::Augmented(i + origin_offset),
            }
        };
        self.index = index;
        self.labelled_origin.iter_mut().for_each(shift);
        self.unlabelled_origin.iter_mut().for_each(shift);
        self
    }
}

/// An ordered list of experiences plus the recipe that produced it.
#[derive(Debug, Clone)]
pub struct Stream<A> {
    pub kind: StreamKind,
    pub spec: StreamSpec,
    pub dataset_hash: String,
    pub experiences: Vec<Experience<A>>,
    /// Rounding residuals and fallbacks recorded while building.
    pub notes: Vec<String>,
}

impl<A: Scalar> Stream<A> {
    pub fn len(&self) -> usize {
        self.experiences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiences.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.experiences.iter().find_map(|e| {
            if e.n_labelled() > 0 {
                Some(e.x_labelled.ncols())
            } else if e.n_unlabelled() > 0 {
                Some(e.x_unlabelled.ncols())
            } else {
                None
            }
        })
    }

    /// Consume the stream one experience at a time. Strategies that must not
    /// revisit past data train through this iterator.
    pub fn into_experiences(self) -> std::vec::IntoIter<Experience<A>> {
        self.experiences.into_iter()
    }
}

/// Train / validation / test streams built from one spec.
#[derive(Debug, Clone)]
pub struct StreamSet<A> {
    pub train: Stream<A>,
    pub validation: Stream<A>,
    pub test: Stream<A>,
}

/// `floor(x + 0.5)` with a small guard against representation error.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Split `total` in proportion to `weights`; parts sum to `total` exactly and
/// each is within one of its exact share.
pub fn allocate(total: usize, weights: &[f64]) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    if weights.is_empty() || wsum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut parts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut rest = total - parts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        parts[i] += 1;
        rest -= 1;
    }
    parts
}

/// Class-proportional subset of at most `limit` row indices, sorted.
pub fn stratified_take(labels: &[u8], limit: usize, seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let weights: Vec<f64> = by_class.values().map(|v| v.len() as f64).collect();
    let quotas = allocate(limit.min(labels.len()), &weights);
    let mut out = Vec::with_capacity(limit);
    for ((&class, idx), q) in by_class.iter().zip(quotas) {
        let mut idx = idx.clone();
        idx.shuffle(&mut derive_rng(seed, "subset", class as u64));
        out.extend_from_slice(&idx[..q.min(idx.len())]);
    }
    out.sort_unstable();
    out
}

/// Pool of anomalous rows per class, drawn without replacement.
struct AnomalyPool {
    by_class: Vec<Vec<usize>>,
}

impl AnomalyPool {
    fn new<A: Scalar>(data: &BinaryDataset<A>, rng: &mut crate::rng::Rng) -> Self {
        let mut by_class = vec![Vec::new(); N_CLASSES];
        for (i, (&y, &c)) in data.binary.iter().zip(&data.classes).enumerate() {
            if y == ANOMALOUS {
                by_class[c as usize].push(i);
            }
        }
        for v in &mut by_class {
            v.shuffle(rng);
        }
        Self { by_class }
    }

    fn available(&self, classes: &[u8]) -> usize {
        classes.iter().map(|&c| self.by_class[c as usize].len()).sum()
    }

    /// Uniform draws over the union of the permitted classes' remaining rows.
    fn draw(
        &mut self,
        n: usize,
        classes: &[u8],
        experience: usize,
        rng: &mut crate::rng::Rng,
    ) -> Result<Vec<usize>> {
        let available = self.available(classes);
        if available < n {
            return Err(CsadError::Capacity {
                experience,
                classes: classes.to_vec(),
                needed: n,
                available,
            });
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut r = rng.random_range(0..self.available(classes));
            for &c in classes {
                let pool = &mut self.by_class[c as usize];
                if r < pool.len() {
                    // pools are pre-shuffled, so taking position r is uniform
                    out.push(pool.swap_remove(r));
                    break;
                }
                r -= pool.len();
            }
        }
        Ok(out)
    }
}

/// Materialize the training stream described by `spec`.
///
/// Steps: split the shuffled normal rows into a labelled pool of size
/// `round(α·N)` and an unlabelled pool; spread the labelled pool over
/// experiences by β and the unlabelled pool evenly; optionally double the
/// labelled normals by augmentation; inject labelled anomalies so they make up
/// γ of each labelled set and unlabelled anomalies so they make up ζ of each
/// unlabelled set, drawing from the experience's λ classes; shuffle.
pub fn build_training_stream<A: Scalar>(data: &BinaryDataset<A>, spec: &StreamSpec) -> Result<Stream<A>> {
    spec.validate()?;
    if data.normal_class != spec.normal_class {
        return Err(CsadError::Validation(format!(
            "dataset was transformed with normal class {}, spec asks for {}",
            data.normal_class, spec.normal_class
        )));
    }
    let mut rng = derive_rng(spec.seed, "train-stream", 0);
    let mut normals: Vec<usize> = (0..data.len()).filter(|&i| data.binary[i] == NORMAL).collect();
    normals.shuffle(&mut rng);
    let n_lab = round_half_up(spec.alpha * normals.len() as f64);
    let (lab_pool, unl_pool) = normals.split_at(n_lab.min(normals.len()));
    let lab_alloc = allocate(lab_pool.len(), &spec.beta);
    let unl_alloc = allocate(unl_pool.len(), &vec![1.0; spec.n_experiences]);
    let mut pool = AnomalyPool::new(data, &mut rng);

    let needs_aug = spec.augment_normal_labelled;
    let shape = data.shape;
    if needs_aug && shape.is_none() {
        return Err(CsadError::Validation(
            "augmentation needs an image shape; dataset has none".into(),
        ));
    }

    let mut notes = Vec::new();
    let mut experiences = Vec::with_capacity(spec.n_experiences);
    let (mut lab_at, mut unl_at) = (0, 0);
    for e in 0..spec.n_experiences {
        let lab_norm = &lab_pool[lab_at..lab_at + lab_alloc[e]];
        let unl_norm = &unl_pool[unl_at..unl_at + unl_alloc[e]];
        lab_at += lab_alloc[e];
        unl_at += unl_alloc[e];

        let mut lab_origin: Vec<Origin> = lab_norm.iter().map(|&i| Origin::Sample(i)).collect();
        let mut x_aug = None;
        if needs_aug && !lab_norm.is_empty() {
            let base = data.images.select(Axis(0), lab_norm);
            let mut aug_rng = derive_rng(spec.seed, "augment", e as u64);
            x_aug = Some(augment::augment_normal_labelled(
                base.view(),
                shape.expect("checked above"),
                &mut aug_rng,
            ));
            lab_origin.extend(lab_norm.iter().map(|&i| Origin::Augmented(i)));
        }
        let n_ln = lab_origin.len();

        let n_la = anomaly_count(n_ln, spec.gamma);
        let n_un = unl_norm.len();
        let n_ua = anomaly_count(n_un, spec.zeta);
        let classes = &spec.lambda_classes[e];
        let lab_anom = pool.draw(n_la, classes, e, &mut rng)?;
        let unl_anom = pool.draw(n_ua, classes, e, &mut rng)?;
        record_residual(&mut notes, e, "labelled", n_la, n_ln + n_la, spec.gamma);
        record_residual(&mut notes, e, "unlabelled", n_ua, n_un + n_ua, spec.zeta);

        lab_origin.extend(lab_anom.iter().map(|&i| Origin::Sample(i)));

        // Labelled block: real normals, augmented normals, anomalies.
        let mut x_lab = data.images.select(Axis(0), lab_norm);
        if let Some(aug) = x_aug {
            x_lab.append(Axis(0), aug.view()).expect("same width");
        }
        x_lab
            .append(Axis(0), data.images.select(Axis(0), &lab_anom).view())
            .expect("same width");
        let lab_classes: Vec<u8> = lab_origin.iter().map(|o| data.classes[o.source()]).collect();
        let lab_y: Vec<u8> = lab_origin.iter().map(|o| data.binary[o.source()]).collect();

        let unl_rows: Vec<usize> = unl_norm.iter().chain(&unl_anom).copied().collect();
        let x_unl = data.images.select(Axis(0), &unl_rows);
        let unl_origin: Vec<Origin> = unl_rows.iter().map(|&i| Origin::Sample(i)).collect();
        let unl_y: Vec<u8> = unl_rows.iter().map(|&i| data.binary[i]).collect();
        let unl_classes: Vec<u8> = unl_rows.iter().map(|&i| data.classes[i]).collect();

        let mut order_rng = derive_rng(spec.seed, "order", e as u64);
        let lp = permutation(n_ln + n_la, &mut order_rng);
        let up = permutation(unl_rows.len(), &mut order_rng);
        experiences.push(Experience::new(
            e,
            x_lab.select(Axis(0), &lp),
            permute(&lab_y, &lp),
            permute(&lab_classes, &lp),
            permute(&lab_origin, &lp),
            x_unl.select(Axis(0), &up),
            permute(&unl_y, &up),
            permute(&unl_classes, &up),
            permute(&unl_origin, &up),
        )?);
    }
    Ok(Stream {
        kind: StreamKind::Train,
        spec: spec.clone(),
        dataset_hash: data.content_hash.clone(),
        experiences,
        notes,
    })
}

/// Anomalies to add to `n_normal` normals so they form fraction `rate`.
pub fn anomaly_count(n_normal: usize, rate: f64) -> usize {
    if rate <= 0.0 || n_normal == 0 {
        return 0;
    }
    round_half_up(n_normal as f64 * rate / (1.0 - rate))
}

fn record_residual(notes: &mut Vec<String>, e: usize, part: &str, anomalies: usize, total: usize, rate: f64) {
    let residual = anomalies as f64 - rate * total as f64;
    if residual.abs() > 1e-9 {
        notes.push(format!(
            "experience {e} {part}: {anomalies}/{total} anomalies, residual {residual:+.3} samples vs rate {rate}"
        ));
    }
}

fn permutation(n: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn permute<T: Clone>(v: &[T], p: &[usize]) -> Vec<T> {
    p.iter().map(|&i| v[i].clone()).collect()
}

/// Carve a stratified `val_fraction` of every experience's labelled data into
/// a validation stream. Returns `(reduced_train, validation)`.
///
/// A real sample and its augmented copies move together, so validation never
/// holds a transformed twin of a training row. When stratification would
/// select nothing from an experience that is owed at least one sample, a plain
/// random split is used instead and a note is recorded.
pub fn build_validation_stream<A: Scalar>(train: Stream<A>, val_fraction: f64) -> Result<(Stream<A>, Stream<A>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(CsadError::Validation(format!(
            "val_fraction {val_fraction} outside [0, 1)"
        )));
    }
    let seed = train.spec.seed;
    let mut notes = train.notes.clone();
    let mut kept = Vec::with_capacity(train.len());
    let mut carved = Vec::with_capacity(train.len());
    for exp in train.experiences {
        let e = exp.index;
        let mut rng = derive_rng(seed, "validation", e as u64);
        // group rows into units keyed by source row
        let mut units: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, o) in exp.labelled_origin.iter().enumerate() {
            units.entry(o.source()).or_default().push(row);
        }
        let mut by_y: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (&src, rows) in &units {
            by_y[exp.y_labelled[rows[0]] as usize].push(src);
        }
        let n_units: usize = by_y.iter().map(Vec::len).sum();
        let mut chosen: Vec<usize> = Vec::new();
        for group in &mut by_y {
            group.shuffle(&mut rng);
            let k = round_half_up(group.len() as f64 * val_fraction);
            chosen.extend_from_slice(&group[..k]);
        }
        let owed = round_half_up(n_units as f64 * val_fraction);
        if chosen.is_empty() && owed > 0 && n_units >= 2 {
            let mut all: Vec<usize> = units.keys().copied().collect();
            all.shuffle(&mut rng);
            chosen = all[..owed].to_vec();
            warn!("experience {e}: too small to stratify, using a random validation split");
            notes.push(format!(
                "experience {e}: validation split fell back to simple random ({owed} of {n_units} units)"
            ));
        }
        let chosen: HashSet<usize> = chosen.into_iter().collect();
        let (val_rows, train_rows): (Vec<usize>, Vec<usize>) = (0..exp.n_labelled())
            .partition(|&r| chosen.contains(&exp.labelled_origin[r].source()));
        let pick = |rows: &[usize]| {
            (
                exp.x_labelled.select(Axis(0), rows),
                permute(&exp.y_labelled, rows),
                permute(&exp.labelled_classes, rows),
                permute(&exp.labelled_origin, rows),
            )
        };
        let (vx, vy, vc, vo) = pick(&val_rows);
        let width = exp.x_labelled.ncols().max(exp.x_unlabelled.ncols());
        carved.push(Experience::new(
            e,
            vx,
            vy,
            vc,
            vo,
            Array2::zeros((0, width)),
            Vec::new(),
            Vec::new(),
            Vec::new(),
        )?);
        let (tx, ty, tc, to) = pick(&train_rows);
        kept.push(Experience {
            index: e,
            x_labelled: tx,
            y_labelled: ty,
            labelled_classes: tc,
            labelled_origin: to,
            x_unlabelled: exp.x_unlabelled,
            unlabelled_origin: exp.unlabelled_origin,
            hidden: exp.hidden,
        });
    }
    let validation = Stream {
        kind: StreamKind::Validation,
        spec: train.spec.clone(),
        dataset_hash: train.dataset_hash.clone(),
        experiences: carved,
        notes: Vec::new(),
    };
    let train = Stream {
        kind: StreamKind::Train,
        spec: train.spec,
        dataset_hash: train.dataset_hash,
        experiences: kept,
        notes,
    };
    Ok((train, validation))
}

/// Split test data into `n_episodes` equally sized episodes, stratified over
/// the original ten classes. Every row is unlabelled; the binary ground truth
/// is reachable through the evaluation API only.
pub fn build_test_stream<A: Scalar>(test: &BinaryDataset<A>, n_episodes: usize, spec: &StreamSpec) -> Result<Stream<A>> {
    if n_episodes == 0 {
        return Err(CsadError::Validation("n_episodes must be ≥ 1".into()));
    }
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, &c) in test.classes.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    if let Some((&c, v)) = by_class.iter().min_by_key(|(_, v)| v.len()) {
        if v.len() < n_episodes {
            return Err(CsadError::Stratification(format!(
                "{n_episodes} episodes requested but class {c} has only {} samples",
                v.len()
            )));
        }
    }
    let mut episodes: Vec<Vec<usize>> = vec![Vec::new(); n_episodes];
    let mut slot = 0usize;
    for (&c, idx) in &by_class {
        let mut idx = idx.clone();
        idx.shuffle(&mut derive_rng(spec.seed, "test-stream", c as u64));
        for i in idx {
            episodes[slot % n_episodes].push(i);
            slot += 1;
        }
    }
    let width = test.images.ncols();
    let mut experiences = Vec::with_capacity(n_episodes);
    for (k, mut rows) in episodes.into_iter().enumerate() {
        rows.shuffle(&mut derive_rng(spec.seed, "test-order", k as u64));
        experiences.push(Experience::new(
            k,
            Array2::zeros((0, width)),
            Vec::new(),
            Vec::new(),
            Vec::new(),
            test.images.select(Axis(0), &rows),
            rows.iter().map(|&i| test.binary[i]).collect(),
            rows.iter().map(|&i| test.classes[i]).collect(),
            rows.iter().map(|&i| Origin::Sample(i)).collect(),
        )?);
    }
    Ok(Stream {
        kind: StreamKind::Test,
        spec: spec.clone(),
        dataset_hash: test.content_hash.clone(),
        experiences,
        notes: Vec::new(),
    })
}

/// Build train, validation and test streams from raw splits in one go,
/// applying the spec's optional desk-scale limits first.
pub fn build_streams<A: Scalar>(train_raw: &RawDataset<A>, test_raw: &RawDataset<A>, spec: &StreamSpec) -> Result<StreamSet<A>> {
    spec.validate()?;
    let limited = |raw: &RawDataset<A>, limit: Option<usize>, tag: u64| match limit {
        Some(l) => raw.stratified_subset(l, crate::rng::derive_seed(spec.seed, "limit", tag)),
        None => raw.clone(),
    };
    let train_raw = limited(train_raw, spec.train_limit, 0);
    let test_raw = limited(test_raw, spec.test_limit, 1);
    let train_bin = apply_anomaly_transform(&train_raw, spec.normal_class)?;
    let test_bin = apply_anomaly_transform(&test_raw, spec.normal_class)?;
    let train = build_training_stream(&train_bin, spec)?;
    let (train, validation) = build_validation_stream(train, spec.val_fraction)?;
    let test = build_test_stream(&test_bin, spec.n_test_episodes, spec)?;
    Ok(StreamSet {
        train,
        validation,
        test,
    })
}

/// Measured composition of one experience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub index: usize,
    pub n_labelled_normal: usize,
    pub n_labelled_anomalous: usize,
    pub n_unlabelled_normal: usize,
    pub n_unlabelled_anomalous: usize,
    pub n_augmented: usize,
}

impl Composition {
    pub fn of<A: Scalar>(exp: &Experience<A>) -> Self {
        let la = exp.y_labelled.iter().filter(|&&y| y == ANOMALOUS).count();
        let ua = exp.hidden.binary.iter().filter(|&&y| y == ANOMALOUS).count();
        Self {
            index: exp.index,
            n_labelled_normal: exp.n_labelled() - la,
            n_labelled_anomalous: la,
            n_unlabelled_normal: exp.n_unlabelled() - ua,
            n_unlabelled_anomalous: ua,
            n_augmented: exp
                .labelled_origin
                .iter()
                .filter(|o| matches!(o, Origin::Augmented(_)))
                .count(),
        }
    }

    pub fn gamma_hat(&self) -> f64 {
        ratio(self.n_labelled_anomalous, self.n_labelled_normal + self.n_labelled_anomalous)
    }

    pub fn zeta_hat(&self) -> f64 {
        ratio(
            self.n_unlabelled_anomalous,
            self.n_unlabelled_normal + self.n_unlabelled_anomalous,
        )
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Check the composition, λ and within-stream disjointness invariants of a
/// generated training stream. Returns every violation found.
pub fn validate_stream<A: Scalar>(train: &Stream<A>) -> Vec<String> {
    let spec = &train.spec;
    let mut violations = Vec::new();
    let mut seen: HashSet<Origin> = HashSet::new();
    for exp in &train.experiences {
        let e = exp.index;
        let comp = Composition::of(exp);
        let nl = comp.n_labelled_normal + comp.n_labelled_anomalous;
        let nu = comp.n_unlabelled_normal + comp.n_unlabelled_anomalous;
        if (comp.n_labelled_anomalous as f64 - spec.gamma * nl as f64).abs() > 1.0 {
            violations.push(format!(
                "experience {e}: {} labelled anomalies of {nl}, gamma {}",
                comp.n_labelled_anomalous, spec.gamma
            ));
        }
        if (comp.n_unlabelled_anomalous as f64 - spec.zeta * nu as f64).abs() > 1.0 {
            violations.push(format!(
                "experience {e}: {} unlabelled anomalies of {nu}, zeta {}",
                comp.n_unlabelled_anomalous, spec.zeta
            ));
        }
        let permitted = spec.lambda_classes.get(e).cloned().unwrap_or_default();
        let rows = exp
            .y_labelled
            .iter()
            .zip(&exp.labelled_classes)
            .chain(exp.hidden.binary.iter().zip(&exp.hidden.classes));
        for (&y, &c) in rows {
            let expect = if c == spec.normal_class { NORMAL } else { ANOMALOUS };
            if y != expect {
                violations.push(format!("experience {e}: class {c} labelled {y}"));
            }
            if y == ANOMALOUS && !permitted.contains(&c) {
                violations.push(format!(
                    "experience {e}: anomaly of class {c} outside lambda {permitted:?}"
                ));
            }
        }
        for &o in exp.labelled_origin.iter().chain(&exp.unlabelled_origin) {
            if !seen.insert(o) {
                violations.push(format!("experience {e}: {o:?} appears more than once"));
            }
        }
    }
    violations
}

/// Source rows shared between a training stream and its validation stream,
/// or repeated inside the validation stream.
pub fn check_disjoint<A: Scalar>(train: &Stream<A>, validation: &Stream<A>) -> Vec<String> {
    let train_sources: HashSet<usize> = train
        .experiences
        .iter()
        .flat_map(|e| e.labelled_origin.iter().chain(&e.unlabelled_origin))
        .map(|o| o.source())
        .collect();
    let mut seen: HashSet<Origin> = HashSet::new();
    let mut violations = Vec::new();
    for exp in &validation.experiences {
        for &o in &exp.labelled_origin {
            if !seen.insert(o) {
                violations.push(format!("validation: {o:?} appears more than once"));
            }
            if train_sources.contains(&o.source()) {
                violations.push(format!(
                    "validation experience {}: source row {} also in training",
                    exp.index,
                    o.source()
                ));
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests;
