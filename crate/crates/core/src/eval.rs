//! Anomaly scoring over test streams and AUC-ROC.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CsadError, Result};
use crate::io::write_atomic;
use crate::scalar::Scalar;
use crate::ssvae::SsVae;
use crate::stream::{Stream, ANOMALOUS};

/// Twice the Mann–Whitney pair count (ties earn 1, wins earn 2) plus the
/// numbers of anomalous and normal rows.
fn pair_count2<A: Scalar>(scores: &[A], labels: &[u8]) -> Result<(u128, u64, u64)> {
    if scores.len() != labels.len() {
        return Err(CsadError::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CsadError::Numeric("NaN anomaly score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));
    let (mut neg_below, mut num2) = (0u64, 0u128);
    let (mut n_pos, mut n_neg) = (0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut a, mut b) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == ANOMALOUS {
                a += 1;
            } else {
                b += 1;
            }
            j += 1;
        }
        num2 += 2 * a as u128 * neg_below as u128 + a as u128 * b as u128;
        neg_below += b;
        n_pos += a;
        n_neg += b;
        i = j;
    }
    Ok((num2, n_pos, n_neg))
}

/// Area under the ROC curve with half credit for ties. Higher scores mean
/// more anomalous; label `1` marks anomalies.
pub fn auc_roc<A: Scalar>(scores: &[A], labels: &[u8]) -> Result<f64> {
    let (num2, p, n) = pair_count2(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(CsadError::UndefinedAuc(format!(
            "{p} anomalous and {n} normal samples"
        )));
    }
    Ok(num2 as f64 / (2 * p as u128 * n as u128) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_index: usize,
    /// Missing when the episode holds a single class.
    pub auc: Option<f64>,
    pub n_samples: usize,
    pub n_anomalies: usize,
}

/// Mean of the defined episode AUCs.
pub fn mean_auc(episodes: &[EpisodeResult]) -> Option<f64> {
    let v: Vec<f64> = episodes.iter().filter_map(|e| e.auc).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Score every episode of a test stream and compute its AUC.
pub fn evaluate_stream<A: Scalar>(model: &SsVae<A>, test: &Stream<A>, score_seed: u64) -> Result<Vec<EpisodeResult>> {
    let mut out = Vec::with_capacity(test.len());
    for exp in &test.experiences {
        let scores = model.elbo_score(exp.x_unlabelled().view(), score_seed);
        let truth = exp.ground_truth();
        let scores = scores.as_slice().expect("contiguous scores");
        let auc = match auc_roc(scores, truth) {
            Ok(a) => Some(a),
            Err(CsadError::UndefinedAuc(m)) => {
                log::warn!("episode {}: AUC undefined ({m}), excluded from the mean", exp.index());
                None
            }
            Err(e) => return Err(e),
        };
        out.push(EpisodeResult {
            episode_index: exp.index(),
            auc,
            n_samples: truth.len(),
            n_anomalies: truth.iter().filter(|&&y| y == ANOMALOUS).count(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForgettingMode {
    /// One test episode per experience: episode `i` is compared with itself.
    PerEpisode,
    /// Otherwise the mean AUC over all episodes is compared.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingEntry {
    pub experience: usize,
    pub during: Option<f64>,
    pub final_auc: Option<f64>,
    pub forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingSummary {
    pub mode: ForgettingMode,
    pub entries: Vec<ForgettingEntry>,
}

/// Compare AUC measured right after each experience with AUC at the end of
/// the stream. `snapshots[i]` holds the evaluation after experience `i`.
pub fn final_vs_during(snapshots: &[Vec<EpisodeResult>]) -> ForgettingSummary {
    let n = snapshots.len();
    let per_episode = n > 0 && snapshots.iter().all(|s| s.len() == n);
    let last = snapshots.last();
    let entries = (0..n)
        .map(|i| {
            let (during, final_auc) = if per_episode {
                (snapshots[i][i].auc, last.and_then(|l| l[i].auc))
            } else {
                (mean_auc(&snapshots[i]), last.and_then(|l| mean_auc(l)))
            };
            ForgettingEntry {
                experience: i,
                during,
                final_auc,
                forgetting: during.zip(final_auc).map(|(d, f)| d - f),
            }
        })
        .collect();
    ForgettingSummary {
        mode: if per_episode {
            ForgettingMode::PerEpisode
        } else {
            ForgettingMode::Mean
        },
        entries,
    }
}

pub const RESULT_SCHEMA_VERSION: u32 = 1;

/// Everything recorded about one (experiment, dataset, strategy, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub experiment_id: u32,
    pub dataset: String,
    pub strategy: String,
    pub seed: u64,
    pub episodes: Vec<EpisodeResult>,
    pub mean_auc: Option<f64>,
    pub config_hash: String,
    pub wall_clock_secs: f64,
    #[serde(default)]
    pub forgetting: Option<ForgettingSummary>,
    /// Full configuration echo (stream spec, model and strategy settings).
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow<'a> {
    experiment_id: u32,
    dataset: &'a str,
    strategy: &'a str,
    seed: u64,
    episode: usize,
    auc: Option<f64>,
    n_samples: usize,
    n_anomalies: usize,
}

impl ResultRecord {
    pub fn recompute_mean(&mut self) {
        self.mean_auc = mean_auc(&self.episodes);
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| CsadError::format("result record", e.to_string()))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.episodes {
            w.serialize(CsvRow {
                experiment_id: self.experiment_id,
                dataset: &self.dataset,
                strategy: &self.strategy,
                seed: self.seed,
                episode: e.episode_index,
                auc: e.auc,
                n_samples: e.n_samples,
                n_anomalies: e.n_anomalies,
            })
            .map_err(|e| CsadError::format("result csv", e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CsadError::format("result csv", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Write `<stem>.json` and `<stem>.csv` atomically.
    pub fn write(&self, json_path: &Path) -> Result<()> {
        write_atomic(json_path, self.to_json()?.as_bytes())?;
        write_atomic(&json_path.with_extension("csv"), self.to_csv()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CsadError::io(path, e))?;
        let rec: Self = serde_json::from_str(&text).map_err(|e| CsadError::format(path.display().to_string(), e.to_string()))?;
        if rec.schema_version != RESULT_SCHEMA_VERSION {
            return Err(CsadError::format(
                path.display().to_string(),
                format!("schema_version {} (expected {RESULT_SCHEMA_VERSION})", rec.schema_version),
            ));
        }
        Ok(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(i: usize, auc: Option<f64>) -> EpisodeResult {
        EpisodeResult {
            episode_index: i,
            auc,
            n_samples: 10,
            n_anomalies: 5,
        }
    }

    #[test]
    fn perfect_and_constant() {
        assert_eq!(auc_roc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[0.3f32; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc_roc(&[0.1, 0.2, 0.9, 0.8], &[1, 1, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc_roc(&[0.1, 0.2], &[0, 0]), Err(CsadError::UndefinedAuc(_))));
        assert!(matches!(auc_roc(&[0.1, 0.2], &[1, 1]), Err(CsadError::UndefinedAuc(_))));
    }

    #[test]
    fn nan_rejected() {
        assert!(auc_roc(&[f64::NAN, 0.2], &[0, 1]).is_err());
    }

    #[test]
    fn mean_skips_missing() {
        let e = [ep(0, Some(0.5)), ep(1, None), ep(2, Some(1.0))];
        assert_eq!(mean_auc(&e), Some(0.75));
        assert_eq!(mean_auc(&[ep(0, None)]), None);
    }

    #[test]
    fn forgetting_modes() {
        let snaps = vec![
            vec![ep(0, Some(0.9)), ep(1, Some(0.5))],
            vec![ep(0, Some(0.7)), ep(1, Some(0.8))],
        ];
        let f = final_vs_during(&snaps);
        assert_eq!(f.mode, ForgettingMode::PerEpisode);
        assert_eq!(f.entries.len(), 2);
        assert!((f.entries[0].forgetting.unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(f.entries[1].forgetting, Some(0.0));

        let same = vec![vec![ep(0, Some(0.6)), ep(1, Some(0.8)), ep(2, Some(0.7))]; 2];
        let f = final_vs_during(&same);
        assert_eq!(f.mode, ForgettingMode::Mean);
        assert!(f.entries.iter().all(|e| e.forgetting == Some(0.0)));
    }

    #[test]
    fn record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ResultRecord {
            schema_version: RESULT_SCHEMA_VERSION,
            experiment_id: 1,
            dataset: "mnist".into(),
            strategy: "naive".into(),
            seed: 3,
            episodes: vec![ep(0, Some(0.25)), ep(1, Some(0.75))],
            mean_auc: None,
            config_hash: "abc".into(),
            wall_clock_secs: 1.5,
            forgetting: None,
            config: serde_json::json!({"k": 1}),
            notes: vec![],
        };
        r.recompute_mean();
        assert_eq!(r.mean_auc, Some(0.5));
        let p = dir.path().join("3.json");
        r.write(&p).unwrap();
        assert_eq!(ResultRecord::read(&p).unwrap(), r);
        let csv = std::fs::read_to_string(dir.path().join("3.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("experiment_id,dataset,strategy,seed,episode,auc"));
    }
}
