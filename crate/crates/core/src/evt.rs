//! Extreme-value tail model over latent distances and rejection sampling of
//! replay latents.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CsadError, Result};
use crate::rng::{standard_normal, Rng};
use crate::scalar::Scalar;
use crate::ssvae::SsVae;
use crate::stream::NORMAL;

pub const DEFAULT_TAIL_FRACTION: f64 = 0.25;
pub const MIN_FIT_SIZE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    #[default]
    Cosine,
    Euclidean,
}

impl DistanceMetric {
    pub fn distance<A: Scalar>(self, a: ArrayView1<'_, A>, b: ArrayView1<'_, A>) -> f64 {
        match self {
            DistanceMetric::Cosine => cosine_distance(a, b),
            DistanceMetric::Euclidean => a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

/// `1 - cos(a, b)`, in `[0, 2]`. A zero vector is treated as orthogonal to
/// everything.
pub fn cosine_distance<A: Scalar>(a: ArrayView1<'_, A>, b: ArrayView1<'_, A>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0)
}

/// Latent mean of correctly identified normals and their sorted distances
/// to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSummary {
    pub z_bar: Vec<f64>,
    pub distances: Vec<f64>,
    pub n_correct: usize,
}

/// Summary of a set of latent means (one per row).
pub fn summarize_latents<A: Scalar>(mu: ArrayView2<'_, A>, metric: DistanceMetric) -> Result<LatentSummary> {
    if mu.nrows() == 0 {
        return Err(CsadError::FitImpossible(
            "no correctly identified normal samples".into(),
        ));
    }
    let z_bar_a = mu.mean_axis(Axis(0)).expect("non-empty");
    let mut distances: Vec<f64> = mu
        .rows()
        .into_iter()
        .map(|r| metric.distance(r, z_bar_a.view()))
        .collect();
    distances.sort_by(f64::total_cmp);
    Ok(LatentSummary {
        z_bar: z_bar_a.iter().map(|v| v.as_f64()).collect(),
        distances,
        n_correct: mu.nrows(),
    })
}

/// Keep the labelled normals the classifier also calls normal, encode them
/// under the normal label and summarize their means.
pub fn compute_latent_summary<A: Scalar>(
    model: &SsVae<A>,
    x: ArrayView2<'_, A>,
    y: &[u8],
    metric: DistanceMetric,
) -> Result<LatentSummary> {
    assert_eq!(x.nrows(), y.len(), "latent summary: rows vs labels");
    let normals: Vec<usize> = (0..y.len()).filter(|&i| y[i] == NORMAL).collect();
    if normals.is_empty() {
        return Err(CsadError::FitImpossible("no labelled normal samples".into()));
    }
    let xn = x.select(Axis(0), &normals);
    let q = model.classify(xn.view());
    let correct: Vec<usize> = q
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| argmax(r.view()) == NORMAL as usize)
        .map(|(i, _)| i)
        .collect();
    let xc = xn.select(Axis(0), &correct);
    let mu = model.encode_mean(xc.view(), NORMAL as usize);
    summarize_latents(mu.view(), metric)
}

fn argmax<A: Scalar>(r: ArrayView1<'_, A>) -> usize {
    let mut best = 0;
    for (i, &v) in r.iter().enumerate() {
        if v > r[best] {
            best = i;
        }
    }
    best
}

/// Shifted Weibull tail `p(d) = 1 - exp(-((d - τ)/λ)^κ)` for `d > τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullModel {
    pub tau: f64,
    pub kappa: f64,
    pub lam: f64,
    pub tail_size: usize,
    #[serde(default)]
    pub distance_metric: DistanceMetric,
}

impl WeibullModel {
    /// Outlier probability for a precomputed distance.
    pub fn cdf(&self, d: f64) -> f64 {
        if !(d > self.tau) {
            return 0.0;
        }
        let t = ((d - self.tau) / self.lam).powf(self.kappa);
        (-(-t).exp_m1()).clamp(0.0, 1.0)
    }
}

/// `(κ, λ)` maximum-likelihood fit of a two-parameter Weibull to strictly
/// positive samples.
pub fn weibull_mle(x: &[f64]) -> Result<(f64, f64)> {
    if x.len() < 2 {
        return Err(CsadError::FitImpossible(format!("{} samples", x.len())));
    }
    if x.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(CsadError::FitImpossible("samples must be positive and finite".into()));
    }
    let max = x.iter().cloned().fold(0.0, f64::max);
    let ly: Vec<f64> = x.iter().map(|&v| (v / max).ln()).collect();
    if ly.iter().all(|&v| v == ly[0]) {
        return Err(CsadError::DegenerateFit("all samples equal".into()));
    }
    let mean_ly = ly.iter().sum::<f64>() / ly.len() as f64;
    // profile equation, increasing in κ
    let eval = |k: f64| -> (f64, f64) {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for &l in &ly {
            let w = (k * l).exp();
            s0 += w;
            s1 += w * l;
            s2 += w * l * l;
        }
        let m1 = s1 / s0;
        let f = m1 - 1.0 / k - mean_ly;
        let df = s2 / s0 - m1 * m1 + 1.0 / (k * k);
        (f, df)
    };
    let (mut lo, mut hi) = (1.0, 1.0);
    while eval(lo).0 > 0.0 {
        lo /= 2.0;
        if lo < 1e-12 {
            return Err(CsadError::DegenerateFit("shape collapsed towards 0".into()));
        }
    }
    while eval(hi).0 < 0.0 {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(CsadError::DegenerateFit("shape diverged".into()));
        }
    }
    let mut k = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (f, df) = eval(k);
        if f < 0.0 {
            lo = k;
        } else {
            hi = k;
        }
        let mut next = k - f / df;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - k).abs() <= 1e-14 * k {
            k = next;
            break;
        }
        k = next;
    }
    let mean_pow = ly.iter().map(|&l| (k * l).exp()).sum::<f64>() / ly.len() as f64;
    let lam = max * mean_pow.powf(1.0 / k);
    Ok((k, lam))
}

/// Threshold at the `(1 - tail_fraction)` quantile, then MLE on the
/// exceedances above it.
pub fn fit_weibull(distances: &[f64], tail_fraction: f64) -> Result<WeibullModel> {
    fit_weibull_with(distances, tail_fraction, MIN_FIT_SIZE, DistanceMetric::Cosine)
}

pub fn fit_weibull_with(
    distances: &[f64],
    tail_fraction: f64,
    min_fit_size: usize,
    metric: DistanceMetric,
) -> Result<WeibullModel> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(CsadError::Validation(format!("tail_fraction {tail_fraction} outside (0, 1]")));
    }
    if distances.is_empty() {
        return Err(CsadError::FitImpossible("no distances".into()));
    }
    let mut d = distances.to_vec();
    d.sort_by(f64::total_cmp);
    if d[0] == d[d.len() - 1] {
        return Err(CsadError::DegenerateFit(format!("all {} distances equal {}", d.len(), d[0])));
    }
    let q = ((1.0 - tail_fraction) * (d.len() - 1) as f64).floor() as usize;
    let tau = d[q];
    let exc: Vec<f64> = d.iter().filter(|&&v| v > tau).map(|&v| v - tau).collect();
    if exc.len() < min_fit_size {
        return Err(CsadError::FitImpossible(format!(
            "{} exceedances above τ = {tau}, need {min_fit_size}",
            exc.len()
        )));
    }
    let (kappa, lam) = weibull_mle(&exc)?;
    Ok(WeibullModel {
        tau,
        kappa,
        lam,
        tail_size: exc.len(),
        distance_metric: metric,
    })
}

pub fn outlier_probability<A: Scalar>(z: ArrayView1<'_, A>, model: &WeibullModel, z_bar: &[f64]) -> f64 {
    let zb: Vec<A> = z_bar.iter().map(|&v| A::from_f64_lossy(v)).collect();
    let d = model.distance_metric.distance(ArrayView1::from(&zb), z);
    model.cdf(d)
}

/// Grid of candidate rejection thresholds `0.05, 0.10, …, 0.95`.
pub fn default_threshold_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// Replay draws that passed the outlier filter.
#[derive(Debug, Clone)]
pub struct ReplaySet<A> {
    pub x: Array2<A>,
    pub z: Array2<A>,
    pub outlier_prob: Vec<f64>,
    pub attempts: usize,
    pub requested: usize,
}

impl<A> ReplaySet<A> {
    pub fn accepted(&self) -> usize {
        self.outlier_prob.len()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            1.0
        } else {
            self.accepted() as f64 / self.attempts as f64
        }
    }

    pub fn is_partial(&self) -> bool {
        self.accepted() < self.requested
    }
}

/// Draw `z ~ N(0, I)` in rounds, keep draws with outlier probability below
/// `threshold` and decode only those under the normal label. At most
/// `n * max_attempts` draws are made.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_rejection<A: Scalar>(
    model: &SsVae<A>,
    weibull: Option<&WeibullModel>,
    z_bar: &[f64],
    threshold: f64,
    n: usize,
    max_attempts: usize,
    rng: &mut Rng,
) -> Result<ReplaySet<A>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(CsadError::Validation(format!("threshold {threshold} outside (0, 1]")));
    }
    let latent = model.latent_dim();
    let budget = n.saturating_mul(max_attempts.max(1));
    let mut kept_z: Vec<A> = Vec::with_capacity(n * latent);
    let mut probs = Vec::with_capacity(n);
    let mut attempts = 0;
    while probs.len() < n && attempts < budget {
        let round = (n - probs.len()).max(64).min(budget - attempts);
        let z = standard_normal::<A>(rng, round, latent);
        for r in z.rows() {
            if probs.len() == n {
                break;
            }
            attempts += 1;
            let p = match weibull {
                Some(w) => outlier_probability(r, w, z_bar),
                None => 0.0,
            };
            if threshold >= 1.0 || p < threshold {
                kept_z.extend(r.iter().copied());
                probs.push(p);
            }
        }
    }
    assert!(
        threshold >= 1.0 || probs.iter().all(|&p| p < threshold),
        "accepted latent at or above the rejection threshold"
    );
    let z = Array2::from_shape_vec((probs.len(), latent), kept_z).expect("latent rows");
    let x = model.decode_class(z.view(), NORMAL as usize);
    let out = ReplaySet {
        x,
        z,
        outlier_prob: probs,
        attempts,
        requested: n,
    };
    if out.is_partial() {
        log::warn!(
            "rejection sampling accepted {} of {} requested after {} draws",
            out.accepted(),
            n,
            attempts
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn cosine_cases() {
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[0.0, 1.0]);
        assert!((cosine_distance(a.view(), b.view()) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_distance(a.view(), a.view()), 0.0);
        let c = arr1(&[-2.0, 0.0]);
        assert_eq!(cosine_distance(a.view(), c.view()), 2.0);
    }

    #[test]
    fn orthogonal_pair_summary() {
        let mu = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let s = summarize_latents(mu.view(), DistanceMetric::Cosine).unwrap();
        let want = 1.0 - 1.0 / 2f64.sqrt();
        assert_eq!(s.n_correct, 2);
        assert!(s.distances.iter().all(|d| (d - want).abs() < 1e-12));
        assert_eq!(s.z_bar, vec![0.5, 0.5]);
    }

    #[test]
    fn identical_latents_have_zero_distance() {
        let mu = ndarray::arr2(&[[0.3, -0.2, 1.0]; 5]);
        let s = summarize_latents(mu.view(), DistanceMetric::Cosine).unwrap();
        assert!(s.distances.iter().all(|&d| d.abs() < 1e-12));
    }

    #[test]
    fn empty_summary_is_fit_impossible() {
        let mu = Array2::<f64>::zeros((0, 3));
        assert!(matches!(
            summarize_latents(mu.view(), DistanceMetric::Cosine),
            Err(CsadError::FitImpossible(_))
        ));
    }

    #[test]
    fn cdf_special_points() {
        let w = WeibullModel {
            tau: 0.3,
            kappa: 1.0,
            lam: 0.2,
            tail_size: 20,
            distance_metric: DistanceMetric::Cosine,
        };
        assert_eq!(w.cdf(0.3), 0.0);
        assert_eq!(w.cdf(0.1), 0.0);
        assert!((w.cdf(0.5) - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!(w.cdf(1e6) > 1.0 - 1e-12);
    }

    #[test]
    fn degenerate_and_small_fits() {
        assert!(matches!(fit_weibull(&[0.5; 40], 0.5), Err(CsadError::DegenerateFit(_))));
        let few: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(matches!(fit_weibull(&few, 0.5), Err(CsadError::FitImpossible(_))));
    }

    #[test]
    fn full_tail_threshold_is_minimum() {
        let d: Vec<f64> = (0..50).map(|i| 0.1 + (i as f64 * 0.37).sin().abs()).collect();
        let w = fit_weibull(&d, 1.0).unwrap();
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(w.tau, min);
    }

    #[test]
    fn exponential_mle_is_mean_when_shape_one() {
        // for κ = 1 the MLE of λ is the sample mean; check the profile
        // equation lands near 1 on exponential-looking quantiles
        let n = 2000;
        let x: Vec<f64> = (1..=n).map(|i| -(1.0 - (i as f64 - 0.5) / n as f64).ln()).collect();
        let (k, lam) = weibull_mle(&x).unwrap();
        assert!((k - 1.0).abs() < 0.05, "{k}");
        assert!((lam - 1.0).abs() < 0.05, "{lam}");
    }
}
