use serde::{Deserialize, Serialize};

use crate::data::{DatasetId, N_CLASSES};
use crate::error::{CsadError, Result};

/// The five-parameter stream recipe plus the bookkeeping that pins a stream
/// down completely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub dataset: DatasetId,
    pub normal_class: u8,
    #[serde(default = "default_experiences")]
    pub n_experiences: usize,
    /// Overall fraction of normal data that is labelled.
    pub alpha: f64,
    /// Share of the labelled normal pool given to each experience.
    pub beta: Vec<f64>,
    /// Labelled-anomaly rate within each experience's labelled set.
    pub gamma: f64,
    /// Unlabelled-anomaly rate within each experience's unlabelled set.
    pub zeta: f64,
    /// Permitted anomalous classes per experience.
    pub lambda_classes: Vec<Vec<u8>>,
    pub seed: u64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub augment_normal_labelled: bool,
    #[serde(default = "default_test_episodes")]
    pub n_test_episodes: usize,
    /// Stratified cap on the training split (desk-scale runs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

fn default_experiences() -> usize {
    5
}

fn default_val_fraction() -> f64 {
    0.10
}

fn default_test_episodes() -> usize {
    15
}

pub const DEFAULT_ALPHA: f64 = 0.10;
pub const DEFAULT_GAMMA: f64 = 0.05;
pub const DEFAULT_ZETA: f64 = 0.0;

impl StreamSpec {
    /// Ablation defaults: equal β, γ = 5 %, ζ = 0 %, every anomalous class in
    /// every experience.
    pub fn ablation_default(dataset: DatasetId, normal_class: u8, seed: u64) -> Self {
        let n = default_experiences();
        Self {
            dataset,
            normal_class,
            n_experiences: n,
            alpha: DEFAULT_ALPHA,
            beta: vec![1.0 / n as f64; n],
            gamma: DEFAULT_GAMMA,
            zeta: DEFAULT_ZETA,
            lambda_classes: vec![all_anomaly_classes(normal_class); n],
            seed,
            val_fraction: default_val_fraction(),
            augment_normal_labelled: matches!(dataset, DatasetId::Mnist | DatasetId::FashionMnist),
            n_test_episodes: default_test_episodes(),
            train_limit: None,
            test_limit: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CsadError::Validation(m));
        if self.normal_class as usize >= N_CLASSES {
            return err(format!("normal_class {} outside 0..=9", self.normal_class));
        }
        if self.n_experiences == 0 {
            return err("n_experiences must be ≥ 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return err(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if self.beta.len() != self.n_experiences {
            return err(format!(
                "beta has {} entries for {} experiences",
                self.beta.len(),
                self.n_experiences
            ));
        }
        if self.beta.iter().any(|&b| !(b >= 0.0)) {
            return err("beta entries must be non-negative".into());
        }
        let sum: f64 = self.beta.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return err(format!("beta sums to {sum}, expected 1"));
        }
        for (name, v) in [("gamma", self.gamma), ("zeta", self.zeta)] {
            if !(0.0..1.0).contains(&v) {
                return err(format!("{name} {v} outside [0, 1)"));
            }
        }
        if self.lambda_classes.len() != self.n_experiences {
            return err(format!(
                "lambda_classes has {} entries for {} experiences",
                self.lambda_classes.len(),
                self.n_experiences
            ));
        }
        for (e, classes) in self.lambda_classes.iter().enumerate() {
            if classes.is_empty() {
                return err(format!("lambda_classes[{e}] is empty"));
            }
            for &cls in classes {
                if cls as usize >= N_CLASSES {
                    return err(format!("lambda_classes[{e}] contains {cls}"));
                }
                if cls == self.normal_class {
                    return err(format!(
                        "lambda_classes[{e}] contains the normal class {cls}"
                    ));
                }
            }
        }
        if !(self.val_fraction >= 0.0 && self.val_fraction < 1.0) {
            return err(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if self.n_test_episodes == 0 {
            return err("n_test_episodes must be ≥ 1".into());
        }
        Ok(())
    }
}

pub fn all_anomaly_classes(normal_class: u8) -> Vec<u8> {
    (0..N_CLASSES as u8).filter(|&c| c != normal_class).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_default_is_valid() {
        let s = StreamSpec::ablation_default(DatasetId::Mnist, 0, 1);
        s.validate().unwrap();
        assert_eq!(s.beta, vec![0.2; 5]);
        assert_eq!(s.gamma, 0.05);
        assert_eq!(s.zeta, 0.0);
        assert!(s.lambda_classes.iter().all(|l| l.len() == 9));
    }

    #[test]
    fn rejects_normal_class_in_lambda() {
        let mut s = StreamSpec::ablation_default(DatasetId::Mnist, 3, 1);
        s.lambda_classes[2].push(3);
        assert!(s.validate().is_err());
    }

    #[test]
    fn rejects_bad_beta() {
        let mut s = StreamSpec::ablation_default(DatasetId::Mnist, 3, 1);
        s.beta[0] = 0.3;
        assert!(s.validate().is_err());
        s.beta.pop();
        assert!(s.validate().is_err());
    }

    #[test]
    fn rejects_empty_lambda_entry() {
        let mut s = StreamSpec::ablation_default(DatasetId::Mnist, 3, 1);
        s.lambda_classes[0].clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn toml_round_trip_uses_defaults() {
        let text = r#"
            dataset = "mnist"
            normal_class = 1
            alpha = 0.2
            beta = [1.0]
            gamma = 0.05
            zeta = 0.0
            lambda_classes = [[0, 2]]
            seed = 9
            n_experiences = 1
        "#;
        let s: StreamSpec = toml::from_str(text).unwrap();
        s.validate().unwrap();
        assert_eq!(s.val_fraction, 0.10);
        assert_eq!(s.n_test_episodes, 15);
        assert!(!s.augment_normal_labelled);
    }
}
