//! Continual-learning regimes over a training stream.
//!
//! Naive, EWC and outlier-rejection replay walk the stream through its
//! consuming iterator, so an experience is gone once training moves past
//! it. Joint concatenates everything and trains once.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CsadError, Result};
use crate::eval::{auc_roc, evaluate_stream, EpisodeResult};
use crate::evt::{
    compute_latent_summary, default_threshold_grid, fit_weibull_with, sample_with_rejection, DistanceMetric,
    LatentSummary, WeibullModel, DEFAULT_TAIL_FRACTION, MIN_FIT_SIZE,
};
use crate::rng::{derive_rng, derive_seed, Rng};
use crate::scalar::{c, Scalar};
use crate::ssvae::{LossBatch, LossNoise, SsVae};
use crate::stream::{Experience, Stream, TrainingView};
use crate::train::{train_one_experience, Penalty, TrainHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Naive,
    Joint,
    Ewc,
    #[serde(alias = "or")]
    OutlierRejection,
}

impl StrategyName {
    pub const ALL: [StrategyName; 4] = [
        StrategyName::Naive,
        StrategyName::Joint,
        StrategyName::Ewc,
        StrategyName::OutlierRejection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Naive => "naive",
            StrategyName::Joint => "joint",
            StrategyName::Ewc => "ewc",
            StrategyName::OutlierRejection => "or",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            StrategyName::Naive => "Naive",
            StrategyName::Joint => "Joint",
            StrategyName::Ewc => "EWC",
            StrategyName::OutlierRejection => "Outlier Rejection",
        }
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyName {
    type Err = CsadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "naive" => Ok(StrategyName::Naive),
            "joint" => Ok(StrategyName::Joint),
            "ewc" => Ok(StrategyName::Ewc),
            "or" | "outlier_rejection" => Ok(StrategyName::OutlierRejection),
            other => Err(CsadError::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Rejection threshold: fixed, or chosen per experience on validation data.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Threshold {
    Fixed(f64),
    #[default]
    Auto,
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Threshold::Fixed(v) => s.serialize_f64(*v),
            Threshold::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Threshold::Fixed(v)),
            Repr::Text(t) if t == "auto" => Ok(Threshold::Auto),
            Repr::Text(t) => t
                .parse()
                .map(Threshold::Fixed)
                .map_err(|_| serde::de::Error::custom(format!("threshold '{t}' is neither a number nor \"auto\""))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub name: StrategyName,
    pub ewc_lambda: f64,
    pub fisher_samples: usize,
    /// Replay size relative to the experience's labelled size.
    pub replay_ratio: f64,
    pub rejection_threshold: Threshold,
    pub threshold_grid: Vec<f64>,
    pub tail_fraction: f64,
    pub min_fit_size: usize,
    /// Draw budget per requested replay sample.
    pub max_attempts: usize,
    pub distance_metric: DistanceMetric,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            name: StrategyName::Naive,
            ewc_lambda: 100.0,
            fisher_samples: 1024,
            replay_ratio: 1.0,
            rejection_threshold: Threshold::Auto,
            threshold_grid: default_threshold_grid(),
            tail_fraction: DEFAULT_TAIL_FRACTION,
            min_fit_size: MIN_FIT_SIZE,
            max_attempts: 50,
            distance_metric: DistanceMetric::Cosine,
        }
    }
}

impl StrategyConfig {
    pub fn named(name: StrategyName) -> Self {
        Self {
            name,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CsadError::Config(m));
        if !(self.ewc_lambda >= 0.0) {
            return err(format!("ewc_lambda {} must be ≥ 0", self.ewc_lambda));
        }
        if !(self.replay_ratio >= 0.0) {
            return err(format!("replay_ratio {} must be ≥ 0", self.replay_ratio));
        }
        if let Threshold::Fixed(t) = self.rejection_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return err(format!("rejection_threshold {t} outside (0, 1]"));
            }
        }
        if self.threshold_grid.is_empty() || self.threshold_grid.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return err("threshold_grid entries must lie in (0, 1]".into());
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return err(format!("tail_fraction {} outside (0, 1]", self.tail_fraction));
        }
        if self.min_fit_size < 2 || self.max_attempts == 0 {
            return err("min_fit_size must be ≥ 2 and max_attempts ≥ 1".into());
        }
        Ok(())
    }
}

/// Diagonal Fisher estimate anchored at a parameter snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag<A> {
    pub weights: Vec<A>,
    pub anchor: Vec<A>,
}

/// Every row of a view as its own batch. Labelled rows come first.
fn sample_rows(view: &TrainingView<'_, impl Scalar>) -> Vec<(bool, usize)> {
    (0..view.n_labelled())
        .map(|i| (true, i))
        .chain((0..view.n_unlabelled()).map(|i| (false, i)))
        .collect()
}

/// Empirical diagonal Fisher: mean over single-row batches of the squared
/// total-loss gradient at the current parameters. When `n_samples` is
/// smaller than the data, rows are drawn without replacement from `rng`;
/// each row then draws its own noise from `rng` in order.
pub fn compute_fisher<A: Scalar>(
    model: &SsVae<A>,
    data: TrainingView<'_, A>,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<FisherDiag<A>> {
    let mut rows = sample_rows(&data);
    if rows.is_empty() {
        return Err(CsadError::Validation("Fisher estimate needs data".into()));
    }
    if n_samples < rows.len() {
        let pick = rand::seq::index::sample(rng, rows.len(), n_samples.max(1)).into_vec();
        rows = pick.into_iter().map(|i| rows[i]).collect();
    }
    let (latent, k) = (model.latent_dim(), model.n_classes());
    let width = data.x_labelled.ncols().max(data.x_unlabelled.ncols());
    let empty = Array2::<A>::zeros((0, width));
    let mut acc = vec![A::zero(); model.n_params()];
    let mut g = vec![A::zero(); model.n_params()];
    for &(labelled, i) in &rows {
        g.iter_mut().for_each(|v| *v = A::zero());
        let (nl, nu) = if labelled { (1, 0) } else { (0, 1) };
        let noise = LossNoise::draw(rng, nl, nu, latent, k);
        let (xl, xu, yl) = if labelled {
            (
                data.x_labelled.slice(ndarray::s![i..i + 1, ..]),
                empty.view(),
                vec![data.y_labelled[i] as usize],
            )
        } else {
            (empty.view(), data.x_unlabelled.slice(ndarray::s![i..i + 1, ..]), vec![])
        };
        let batch = LossBatch {
            x_labelled: xl,
            y_labelled: &yl,
            x_unlabelled: xu,
            noise: &noise,
        };
        model.loss_and_grad(&batch, &mut g)?;
        for (a, &v) in acc.iter_mut().zip(&g) {
            *a += v * v;
        }
    }
    let inv: A = A::one() / c::<A>(rows.len() as f64);
    acc.iter_mut().for_each(|v| *v *= inv);
    Ok(FisherDiag {
        weights: acc,
        anchor: model.params().to_vec(),
    })
}

/// `(λ/2) Σ F (θ - θ*)²`.
pub fn ewc_penalty<A: Scalar>(params: &[A], fisher: &FisherDiag<A>, ewc_lambda: f64) -> Result<f64> {
    if fisher.weights.len() != params.len() || fisher.anchor.len() != params.len() {
        return Err(CsadError::Validation(format!(
            "Fisher has {} weights and {} anchors for {} parameters",
            fisher.weights.len(),
            fisher.anchor.len(),
            params.len()
        )));
    }
    let s: f64 = params
        .iter()
        .zip(&fisher.weights)
        .zip(&fisher.anchor)
        .map(|((&p, &f), &a)| {
            let d = (p - a).as_f64();
            f.as_f64() * d * d
        })
        .sum();
    Ok(0.5 * ewc_lambda * s)
}

/// Sum of quadratic penalties, one per past experience.
#[derive(Debug, Clone)]
pub struct EwcPenalty<A> {
    pub lambda: f64,
    pub terms: Vec<FisherDiag<A>>,
}

impl<A: Scalar> Penalty<A> for EwcPenalty<A> {
    fn value(&self, params: &[A]) -> f64 {
        self.terms
            .iter()
            .map(|f| ewc_penalty(params, f, self.lambda).expect("penalty shape"))
            .sum()
    }

    fn add_grad(&self, params: &[A], grad: &mut [A]) {
        let lam: A = c(self.lambda);
        for f in &self.terms {
            for i in 0..params.len() {
                grad[i] += lam * f.weights[i] * (params[i] - f.anchor[i]);
            }
        }
    }
}

/// One outlier-rejection round: what was fitted and what was replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRound {
    pub experience: usize,
    pub n_correct: usize,
    pub effective_tail_fraction: Option<f64>,
    pub weibull: Option<WeibullModel>,
    pub z_bar: Option<Vec<f64>>,
    pub threshold: Option<f64>,
    /// `(threshold, validation AUC, validation loss)` per grid point.
    pub sweep: Vec<(f64, Option<f64>, f64)>,
    pub requested: usize,
    pub accepted: usize,
    pub acceptance_rate: Option<f64>,
    pub fallback: Option<String>,
}

/// Evaluation hooks for a run.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a, A> {
    pub seed: u64,
    /// Evaluated after every experience when present.
    pub test: Option<&'a Stream<A>>,
}

impl<A> RunContext<'_, A> {
    pub fn score_seed(&self) -> u64 {
        derive_seed(self.seed, "score", 0)
    }
}

/// Outcome of running one strategy over a stream.
#[derive(Debug, Clone)]
pub struct StrategyRun<A> {
    pub model: SsVae<A>,
    pub histories: Vec<TrainHistory>,
    /// Test evaluation after each experience (empty without a test stream).
    pub snapshots: Vec<Vec<EpisodeResult>>,
    pub replay_rounds: Vec<ReplayRound>,
    pub notes: Vec<String>,
}

fn check_pair<A: Scalar>(train: &Stream<A>, val: &Stream<A>) -> Result<()> {
    if train.is_empty() {
        return Err(CsadError::Validation("training stream is empty".into()));
    }
    if val.len() != train.len() && !val.is_empty() {
        return Err(CsadError::Validation(format!(
            "validation stream has {} experiences for {} training experiences",
            val.len(),
            train.len()
        )));
    }
    Ok(())
}

fn snapshot<A: Scalar>(model: &SsVae<A>, ctx: &RunContext<'_, A>) -> Result<Option<Vec<EpisodeResult>>> {
    ctx.test.map(|t| evaluate_stream(model, t, ctx.score_seed())).transpose()
}

pub fn train_naive<A: Scalar>(
    model: SsVae<A>,
    train: Stream<A>,
    val: Stream<A>,
    ctx: &RunContext<'_, A>,
) -> Result<StrategyRun<A>> {
    sequential(model, train, val, ctx, &StrategyConfig::named(StrategyName::Naive))
}

pub fn train_ewc<A: Scalar>(
    model: SsVae<A>,
    train: Stream<A>,
    val: Stream<A>,
    cfg: &StrategyConfig,
    ctx: &RunContext<'_, A>,
) -> Result<StrategyRun<A>> {
    let cfg = StrategyConfig {
        name: StrategyName::Ewc,
        ..cfg.clone()
    };
    sequential(model, train, val, ctx, &cfg)
}

pub fn train_outlier_rejection<A: Scalar>(
    model: SsVae<A>,
    train: Stream<A>,
    val: Stream<A>,
    cfg: &StrategyConfig,
    ctx: &RunContext<'_, A>,
) -> Result<StrategyRun<A>> {
    let cfg = StrategyConfig {
        name: StrategyName::OutlierRejection,
        ..cfg.clone()
    };
    sequential(model, train, val, ctx, &cfg)
}

/// Shared loop for the strategies that see one experience at a time.
fn sequential<A: Scalar>(
    mut model: SsVae<A>,
    train: Stream<A>,
    val: Stream<A>,
    ctx: &RunContext<'_, A>,
    cfg: &StrategyConfig,
) -> Result<StrategyRun<A>> {
    cfg.validate()?;
    check_pair(&train, &val)?;
    let n = train.len();
    let mut val_iter = val.into_experiences();
    let mut run = StrategyRun {
        model: model.clone(),
        histories: Vec::with_capacity(n),
        snapshots: Vec::new(),
        replay_rounds: Vec::new(),
        notes: Vec::new(),
    };
    let mut ewc = EwcPenalty {
        lambda: cfg.ewc_lambda,
        terms: Vec::new(),
    };
    let mut replay: Option<Array2<A>> = None;
    for (e, exp) in train.into_experiences().enumerate() {
        let v = val_iter.next();
        let view = exp.training_view();
        let vview = v.as_ref().map(|v| v.training_view());
        let penalty: Option<&dyn Penalty<A>> = match cfg.name {
            StrategyName::Ewc if !ewc.terms.is_empty() => Some(&ewc),
            _ => None,
        };
        let mut rng = derive_rng(ctx.seed, "train", e as u64);
        let hist = train_one_experience(
            &mut model,
            e,
            view,
            vview,
            replay.as_ref().map(|r| r.view()),
            penalty,
            &mut rng,
        )?;
        run.histories.push(hist);
        if let Some(s) = snapshot(&model, ctx)? {
            run.snapshots.push(s);
        }
        let last = e + 1 == n;
        match cfg.name {
            StrategyName::Ewc if !last => {
                let mut frng = derive_rng(ctx.seed, "fisher", e as u64);
                ewc.terms.push(compute_fisher(&model, view, cfg.fisher_samples, &mut frng)?);
            }
            StrategyName::OutlierRejection => {
                let (round, set) = replay_round(&model, &exp, v.as_ref(), cfg, ctx.seed, last)?;
                if let Some(f) = &round.fallback {
                    run.notes.push(format!("experience {e}: {f}"));
                }
                run.replay_rounds.push(round);
                replay = set;
            }
            _ => {}
        }
    }
    run.model = model;
    Ok(run)
}

/// Tail fraction widened so that at least `min_fit` exceedances remain.
pub fn effective_tail_fraction(tail_fraction: f64, n: usize, min_fit: usize) -> Option<f64> {
    if n <= min_fit {
        return None;
    }
    Some(tail_fraction.max(min_fit as f64 / (n - 1) as f64).min(1.0))
}

fn fit_round<A: Scalar>(
    model: &SsVae<A>,
    exp: &Experience<A>,
    cfg: &StrategyConfig,
) -> std::result::Result<(LatentSummary, f64, WeibullModel), (usize, Option<f64>, String)> {
    let summary = compute_latent_summary(model, exp.x_labelled().view(), exp.y_labelled(), cfg.distance_metric)
        .map_err(|e| (0, None, e.to_string()))?;
    let n = summary.n_correct;
    let tf = effective_tail_fraction(cfg.tail_fraction, n, cfg.min_fit_size)
        .ok_or_else(|| (n, None, format!("only {n} correctly identified normals, need more than {}", cfg.min_fit_size)))?;
    let w = fit_weibull_with(&summary.distances, tf, cfg.min_fit_size, cfg.distance_metric)
        .map_err(|e| (n, Some(tf), e.to_string()))?;
    Ok((summary, tf, w))
}

/// Fit the tail model on this experience, pick a threshold and draw the
/// replay set carried to the next experience.
fn replay_round<A: Scalar>(
    model: &SsVae<A>,
    exp: &Experience<A>,
    val: Option<&Experience<A>>,
    cfg: &StrategyConfig,
    seed: u64,
    last: bool,
) -> Result<(ReplayRound, Option<Array2<A>>)> {
    let e = exp.index();
    let requested = (cfg.replay_ratio * exp.n_labelled() as f64).ceil() as usize;
    let mut round = ReplayRound {
        experience: e,
        n_correct: 0,
        effective_tail_fraction: None,
        weibull: None,
        z_bar: None,
        threshold: None,
        sweep: Vec::new(),
        requested: if last { 0 } else { requested },
        accepted: 0,
        acceptance_rate: None,
        fallback: None,
    };
    let fit = fit_round(model, exp, cfg);
    let (summary, weibull) = match fit {
        Ok((s, tf, w)) => {
            round.n_correct = s.n_correct;
            round.effective_tail_fraction = Some(tf);
            round.weibull = Some(w);
            round.z_bar = Some(s.z_bar.clone());
            (Some(s), Some(w))
        }
        Err((n, tf, msg)) => {
            round.n_correct = n;
            round.effective_tail_fraction = tf;
            let m = format!("weibull fit failed ({msg}), replay without rejection");
            log::warn!("experience {e}: {m}");
            round.fallback = Some(m);
            (None, None)
        }
    };
    if last || requested == 0 {
        return Ok((round, None));
    }
    let z_bar = summary.as_ref().map(|s| s.z_bar.clone()).unwrap_or_default();
    let threshold = match (weibull.as_ref(), cfg.rejection_threshold) {
        (None, _) => 1.0,
        (Some(_), Threshold::Fixed(t)) => t,
        (Some(w), Threshold::Auto) => {
            let (t, sweep) = sweep_threshold(model, w, &z_bar, requested, val.unwrap_or(exp), cfg, seed, e)?;
            round.sweep = sweep;
            t
        }
    };
    round.threshold = Some(threshold);
    let mut rng = derive_rng(seed, "replay", e as u64);
    let set = sample_with_rejection(model, weibull.as_ref(), &z_bar, threshold, requested, cfg.max_attempts, &mut rng)?;
    round.accepted = set.accepted();
    round.acceptance_rate = Some(set.acceptance_rate());
    Ok((round, Some(set.x)))
}

/// For each candidate threshold, fine-tune a copy of the model for one
/// epoch on the replay it would produce, then score the validation
/// experience, labelled and unlabelled rows together. Only thresholds that fill the whole replay request compete;
/// among them the highest validation AUC wins, then the lowest validation
/// loss, then the smaller threshold. When no threshold fills the request
/// the one that accepted the most samples is used.
#[allow(clippy::too_many_arguments)]
fn sweep_threshold<A: Scalar>(
    model: &SsVae<A>,
    weibull: &WeibullModel,
    z_bar: &[f64],
    n: usize,
    val: &Experience<A>,
    cfg: &StrategyConfig,
    seed: u64,
    e: usize,
) -> Result<(f64, Vec<(f64, Option<f64>, f64)>)> {
    let width = val.x_labelled().ncols();
    let vx = stack(vec![val.x_labelled().view(), val.x_unlabelled().view()], width);
    let mut vy = val.y_labelled().to_vec();
    vy.extend_from_slice(val.ground_truth());
    let n_lab = val.n_labelled();
    let mut results = Vec::with_capacity(cfg.threshold_grid.len());
    let mut filled = Vec::with_capacity(cfg.threshold_grid.len());
    for (i, &t) in cfg.threshold_grid.iter().enumerate() {
        let tag = (e as u64) << 16 | i as u64;
        let mut rng = derive_rng(seed, "sweep-replay", tag);
        let set = sample_with_rejection(model, Some(weibull), z_bar, t, n, cfg.max_attempts, &mut rng)?;
        let mut copy = model.clone();
        let mut short = copy.config().clone();
        short.max_epochs = 1;
        copy = SsVae::from_params(short, copy.params().to_vec())?;
        if set.accepted() > 0 {
            let empty = Array2::<A>::zeros((0, set.x.ncols()));
            let view = TrainingView {
                x_labelled: empty.view(),
                y_labelled: &[],
                x_unlabelled: empty.view(),
            };
            train_one_experience(
                &mut copy,
                e,
                view,
                None,
                Some(set.x.view()),
                None,
                &mut derive_rng(seed, "sweep-train", tag),
            )?;
        }
        let (auc, loss) = validation_metrics(&copy, vx.view(), &vy, n_lab, seed)?;
        results.push((t, auc, loss));
        filled.push(set.accepted());
    }
    if filled.iter().all(|&k| k < n) {
        let i = (0..filled.len()).max_by_key(|&i| (filled[i], std::cmp::Reverse(i))).unwrap_or(0);
        return Ok((results.get(i).map_or(1.0, |r| r.0), results));
    }
    let best = results
        .iter()
        .zip(&filled)
        .filter(|(_, &k)| k == n)
        .map(|(r, _)| *r)
        .max_by(|a, b| {
            let ka = (a.1.unwrap_or(f64::NEG_INFINITY), -a.2);
            let kb = (b.1.unwrap_or(f64::NEG_INFINITY), -b.2);
            ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal).then(b.0.total_cmp(&a.0))
        })
        .map(|r| r.0)
        .unwrap_or(1.0);
    Ok((best, results))
}

fn validation_metrics<A: Scalar>(
    model: &SsVae<A>,
    x: ArrayView2<'_, A>,
    y: &[u8],
    n_labelled: usize,
    seed: u64,
) -> Result<(Option<f64>, f64)> {
    if x.nrows() == 0 {
        return Ok((None, 0.0));
    }
    let xl = x.slice(ndarray::s![..n_labelled, ..]);
    let scores = model.elbo_score(x, derive_seed(seed, "score", 0));
    let auc = match auc_roc(scores.as_slice().expect("contiguous"), y) {
        Ok(a) => Some(a),
        Err(CsadError::UndefinedAuc(_)) => None,
        Err(e) => return Err(e),
    };
    if n_labelled == 0 {
        return Ok((auc, 0.0));
    }
    let yl: Vec<usize> = y[..n_labelled].iter().map(|&v| v as usize).collect();
    let noise = LossNoise::draw(
        &mut derive_rng(seed, "sweep-noise", 0),
        n_labelled,
        0,
        model.latent_dim(),
        model.n_classes(),
    );
    let empty = Array2::<A>::zeros((0, x.ncols()));
    let loss = model
        .total_loss(&LossBatch {
            x_labelled: xl,
            y_labelled: &yl,
            x_unlabelled: empty.view(),
            noise: &noise,
        })?
        .total;
    Ok((auc, loss))
}

fn stack<A: Scalar>(parts: Vec<ArrayView2<'_, A>>, width: usize) -> Array2<A> {
    let parts: Vec<_> = parts.into_iter().filter(|p| p.nrows() > 0).collect();
    if parts.is_empty() {
        return Array2::zeros((0, width));
    }
    concatenate(Axis(0), &parts).expect("equal widths")
}

/// Everything in a stream as one experience.
pub fn concatenate_stream<A: Scalar>(s: &Stream<A>) -> (Array2<A>, Vec<u8>, Array2<A>) {
    let width = s.input_dim().unwrap_or(0);
    let xl = stack(s.experiences.iter().map(|e| e.x_labelled().view()).collect(), width);
    let yl = s.experiences.iter().flat_map(|e| e.y_labelled().iter().copied()).collect();
    let xu = stack(s.experiences.iter().map(|e| e.x_unlabelled().view()).collect(), width);
    (xl, yl, xu)
}

/// Non-continual reference: train once on every experience together.
pub fn train_joint<A: Scalar>(
    mut model: SsVae<A>,
    train: Stream<A>,
    val: Stream<A>,
    ctx: &RunContext<'_, A>,
) -> Result<StrategyRun<A>> {
    check_pair(&train, &val)?;
    let n = train.len();
    let (xl, yl, xu) = concatenate_stream(&train);
    let view = TrainingView {
        x_labelled: xl.view(),
        y_labelled: &yl,
        x_unlabelled: xu.view(),
    };
    let (vxl, vyl, vxu) = concatenate_stream(&val);
    let vview = TrainingView {
        x_labelled: vxl.view(),
        y_labelled: &vyl,
        x_unlabelled: vxu.view(),
    };
    let vview = (!val.is_empty()).then_some(vview);
    let hist = train_one_experience(&mut model, 0, view, vview, None, None, &mut derive_rng(ctx.seed, "train", 0))?;
    let snapshots = match snapshot(&model, ctx)? {
        // one training event, so every "during" reading equals the final one
        Some(s) => vec![s; n],
        None => Vec::new(),
    };
    Ok(StrategyRun {
        model,
        histories: vec![hist],
        snapshots,
        replay_rounds: Vec::new(),
        notes: Vec::new(),
    })
}

/// Dispatch on the configured strategy.
pub fn run_strategy<A: Scalar>(
    cfg: &StrategyConfig,
    model: SsVae<A>,
    train: Stream<A>,
    val: Stream<A>,
    ctx: &RunContext<'_, A>,
) -> Result<StrategyRun<A>> {
    cfg.validate()?;
    match cfg.name {
        StrategyName::Naive => train_naive(model, train, val, ctx),
        StrategyName::Joint => train_joint(model, train, val, ctx),
        StrategyName::Ewc => train_ewc(model, train, val, cfg, ctx),
        StrategyName::OutlierRejection => train_outlier_rejection(model, train, val, cfg, ctx),
    }
}
