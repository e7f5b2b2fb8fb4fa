//! Experiment configuration and the fifteen-experiment ablation grid.

mod report;
mod runner;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use report::{collect_records, emit_report, render_bar_chart, render_markdown, ReportBundle};
pub use runner::{cell_config, config_hash, result_path, run_experiment, Failure, RunOptions, RunSummary};

use crate::data::{DatasetId, ImageShape};
use crate::error::{CsadError, Result};
use crate::nn::Activation;
use crate::ssvae::{ClassifierSpec, SsVaeConfig};
use crate::strategy::{StrategyConfig, StrategyName};
use crate::stream::StreamSpec;
use crate::synthetic::SyntheticSpec;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Normal class used when a config does not name one.
pub const DEFAULT_NORMAL_CLASS: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Alpha,
    Beta,
    Gamma,
    Zeta,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Alpha, Ablation::Beta, Ablation::Gamma, Ablation::Zeta];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Alpha => "alpha",
            Ablation::Beta => "beta",
            Ablation::Gamma => "gamma",
            Ablation::Zeta => "zeta",
        }
    }

    /// Experiment ids belonging to this ablation.
    pub fn experiments(self) -> std::ops::RangeInclusive<u32> {
        match self {
            Ablation::Alpha => 1..=3,
            Ablation::Beta => 4..=7,
            Ablation::Gamma => 8..=11,
            Ablation::Zeta => 12..=15,
        }
    }

    pub fn of_experiment(id: u32) -> Option<Ablation> {
        Self::ALL.into_iter().find(|a| a.experiments().contains(&id))
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Spread of the labelled normal pool over the experiences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaProfile {
    Equal,
    /// 80 % in the first experience, the rest split evenly.
    FirstHeavy,
    /// 80 % in the last experience, the rest split evenly.
    LastHeavy,
    /// Weights proportional to 2^k, growing towards the last experience.
    ExpUp,
    ExpDown,
}

impl BetaProfile {
    pub fn as_str(self) -> &'static str {
        match self {
            BetaProfile::Equal => "equal",
            BetaProfile::FirstHeavy => "first-heavy",
            BetaProfile::LastHeavy => "last-heavy",
            BetaProfile::ExpUp => "exp-up",
            BetaProfile::ExpDown => "exp-down",
        }
    }

    pub fn weights(self, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![1.0];
        }
        let heavy = |first: bool| {
            let mut w = vec![0.2 / (n - 1) as f64; n];
            w[if first { 0 } else { n - 1 }] = 0.8;
            w
        };
        let exp = |up: bool| {
            let total = (1u64 << n) as f64 - 1.0;
            let mut w: Vec<f64> = (0..n).map(|k| (1u64 << k) as f64 / total).collect();
            if !up {
                w.reverse();
            }
            w
        };
        match self {
            BetaProfile::Equal => vec![1.0 / n as f64; n],
            BetaProfile::FirstHeavy => heavy(true),
            BetaProfile::LastHeavy => heavy(false),
            BetaProfile::ExpUp => exp(true),
            BetaProfile::ExpDown => exp(false),
        }
    }
}

/// Departures from the ablation defaults of the stream recipe.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<BetaProfile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_experiences: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_test_episodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment_normal_labelled: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

/// Departures from the per-dataset model defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_cls: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub early_stop_patience: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_samples: Option<usize>,
}

impl ModelOverrides {
    pub fn apply(&self, cfg: &mut SsVaeConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    cfg.$f = v.clone();
                }
            )*};
        }
        set!(
            latent_dim,
            encoder_hidden,
            decoder_hidden,
            classifier,
            activation,
            beta_kl,
            alpha_cls,
            learning_rate,
            batch_size,
            max_epochs,
            early_stop_patience,
            mc_samples
        );
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_strategies() -> Vec<StrategyConfig> {
    StrategyName::ALL.into_iter().map(StrategyConfig::named).collect()
}

fn default_normal_class() -> u8 {
    DEFAULT_NORMAL_CLASS
}

fn default_datasets() -> Vec<DatasetId> {
    vec![DatasetId::Mnist, DatasetId::FashionMnist, DatasetId::Cifar10]
}

/// One experiment of the grid: which ablation it belongs to, the stream
/// parameter it varies, and everything needed to rerun it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment_id: u32,
    pub ablation: Ablation,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_datasets")]
    pub datasets: Vec<DatasetId>,
    #[serde(default = "default_normal_class")]
    pub normal_class: u8,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub stream: StreamOverrides,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyConfig>,
    /// Only read for the synthetic dataset.
    #[serde(default)]
    pub synthetic: SyntheticSpec,
    /// Where each non-default value comes from: stated in the source or
    /// chosen here.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl ExperimentConfig {
    /// Config with every setting at its default for the given experiment.
    pub fn new(experiment_id: u32, ablation: Ablation) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            experiment_id,
            ablation,
            description: String::new(),
            datasets: default_datasets(),
            normal_class: DEFAULT_NORMAL_CLASS,
            seeds: default_seeds(),
            stream: StreamOverrides::default(),
            model: ModelOverrides::default(),
            strategies: default_strategies(),
            synthetic: SyntheticSpec::default(),
            provenance: BTreeMap::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CsadError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CsadError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CsadError::Config(m) => CsadError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CsadError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CsadError::Config(format!("experiment {}: {m}", self.experiment_id)));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return err(format!(
                "schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if Ablation::of_experiment(self.experiment_id) != Some(self.ablation) {
            return err(format!(
                "experiment id outside 1..=15 or not part of the {} ablation",
                self.ablation
            ));
        }
        let s = &self.stream;
        let set = [
            (Ablation::Alpha, s.alpha.is_some()),
            (Ablation::Beta, s.beta.is_some()),
            (Ablation::Gamma, s.gamma.is_some()),
            (Ablation::Zeta, s.zeta.is_some()),
        ];
        for (a, present) in set {
            if a == self.ablation && !present {
                return err(format!("the {a} ablation must set stream.{a}"));
            }
            if a != self.ablation && present {
                return err(format!("stream.{a} must stay at its default in the {} ablation", self.ablation));
            }
        }
        if self.datasets.is_empty() || self.seeds.is_empty() || self.strategies.is_empty() {
            return err("datasets, seeds and strategies must be non-empty".into());
        }
        let mut names: Vec<StrategyName> = self.strategies.iter().map(|s| s.name).collect();
        names.sort_by_key(|n| n.as_str());
        names.dedup();
        if names.len() != self.strategies.len() {
            return err("a strategy is listed twice".into());
        }
        for s in &self.strategies {
            s.validate()?;
        }
        for &d in &self.datasets {
            self.stream_spec(d, self.seeds[0])
                .validate()
                .map_err(|e| CsadError::Config(format!("experiment {}: {e}", self.experiment_id)))?;
        }
        if self.datasets.contains(&DatasetId::Synthetic) {
            self.synthetic.validate()?;
        }
        self.model_config(1, None).validate()
    }

    /// Value of the varied parameter, as shown in reports.
    pub fn ablation_value(&self) -> String {
        let s = &self.stream;
        match self.ablation {
            Ablation::Alpha => s.alpha.map(|v| v.to_string()),
            Ablation::Beta => s.beta.map(|b| b.as_str().to_string()),
            Ablation::Gamma => s.gamma.map(|v| v.to_string()),
            Ablation::Zeta => s.zeta.map(|v| v.to_string()),
        }
        .unwrap_or_else(|| "default".into())
    }

    pub fn stream_spec(&self, dataset: DatasetId, seed: u64) -> StreamSpec {
        let mut spec = StreamSpec::ablation_default(dataset, self.normal_class, seed);
        let o = &self.stream;
        if let Some(n) = o.n_experiences {
            spec.n_experiences = n;
            spec.beta = vec![1.0 / n as f64; n];
            spec.lambda_classes.resize(n, spec.lambda_classes[0].clone());
        }
        if let Some(a) = o.alpha {
            spec.alpha = a;
        }
        if let Some(b) = o.beta {
            spec.beta = b.weights(spec.n_experiences);
        }
        if let Some(g) = o.gamma {
            spec.gamma = g;
        }
        if let Some(z) = o.zeta {
            spec.zeta = z;
        }
        if let Some(v) = o.val_fraction {
            spec.val_fraction = v;
        }
        if let Some(n) = o.n_test_episodes {
            spec.n_test_episodes = n;
        }
        if let Some(a) = o.augment_normal_labelled {
            spec.augment_normal_labelled = a;
        }
        spec.train_limit = o.train_limit;
        spec.test_limit = o.test_limit;
        spec
    }

    pub fn model_config(&self, input_dim: usize, shape: Option<ImageShape>) -> SsVaeConfig {
        let mut cfg = SsVaeConfig::for_input(input_dim, shape);
        self.model.apply(&mut cfg);
        cfg
    }

    /// The fifteen experiments of the four ablations with their defaults.
    pub fn grid() -> Vec<ExperimentConfig> {
        let mut out = Vec::with_capacity(15);
        let mut push = |id: u32, ablation: Ablation, desc: &str, f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::new(id, ablation);
            c.description = desc.to_string();
            c.provenance.insert("beta.equal".into(), "stated: default spread is equal".into());
            c.provenance.insert("gamma=0.05".into(), "stated: default labelled-anomaly rate".into());
            c.provenance.insert("zeta=0".into(), "stated: default unlabelled-anomaly rate".into());
            c.provenance
                .insert("normal_class".into(), "chosen: no normal class is stated".into());
            f(&mut c);
            out.push(c);
        };
        let alpha_default = |c: &mut ExperimentConfig| {
            c.provenance
                .insert("alpha=0.1".into(), "chosen: ablations 2 to 4 do not restate alpha".into());
        };
        for (id, a, note) in [
            (1, 0.05, "stated: lower end of the 5 to 20 % range"),
            (2, 0.10, "chosen: midpoint of the stated range"),
            (3, 0.20, "stated: upper end of the 5 to 20 % range"),
        ] {
            push(id, Ablation::Alpha, &format!("labelled fraction alpha = {a}"), &|c| {
                c.stream.alpha = Some(a);
                c.provenance.insert(format!("alpha={a}"), note.to_string());
            });
        }
        for (id, b, note) in [
            (4, BetaProfile::FirstHeavy, "stated: 80 % in the first experience, 5 % elsewhere"),
            (5, BetaProfile::LastHeavy, "stated: 80 % in the last experience, 5 % elsewhere"),
            (6, BetaProfile::ExpUp, "chosen: weights proportional to 2^k (only 'exponential' is stated)"),
            (7, BetaProfile::ExpDown, "chosen: weights proportional to 2^(n-1-k) (only 'exponential' is stated)"),
        ] {
            push(id, Ablation::Beta, &format!("labelled spread beta = {}", b.as_str()), &|c| {
                c.stream.beta = Some(b);
                c.provenance.insert(format!("beta.{}", b.as_str()), note.to_string());
                alpha_default(c);
            });
        }
        for (id, g, note) in [
            (8, 0.05, "stated: default rate"),
            (9, 0.10, "chosen: unstated grid point"),
            (10, 0.20, "stated: discussed as the best setting"),
            (11, 0.50, "stated: discussed"),
        ] {
            push(id, Ablation::Gamma, &format!("labelled anomaly rate gamma = {g}"), &|c| {
                c.stream.gamma = Some(g);
                c.provenance.insert(format!("gamma={g}"), note.to_string());
                alpha_default(c);
            });
        }
        for (id, z, note) in [
            (12, 0.05, "chosen: unstated grid point"),
            (13, 0.10, "chosen: unstated grid point"),
            (14, 0.20, "stated: discussed as the best setting"),
            (15, 0.50, "chosen: unstated grid point"),
        ] {
            push(id, Ablation::Zeta, &format!("unlabelled anomaly rate zeta = {z}"), &|c| {
                c.stream.zeta = Some(z);
                c.provenance.insert(format!("zeta={z}"), note.to_string());
                alpha_default(c);
            });
        }
        out
    }

    /// TOML text with a comment header listing the provenance of each
    /// value.
    pub fn to_commented_toml(&self) -> Result<String> {
        let mut out = format!(
            "# Experiment {} ({} ablation): {}\n",
            self.experiment_id, self.ablation, self.description
        );
        for (k, v) in &self.provenance {
            out.push_str(&format!("# {k}: {v}\n"));
        }
        out.push('\n');
        out.push_str(&self.to_toml_string()?);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_covers_fifteen_valid_experiments() {
        let g = ExperimentConfig::grid();
        assert_eq!(g.len(), 15);
        for (i, c) in g.iter().enumerate() {
            assert_eq!(c.experiment_id, i as u32 + 1);
            c.validate().unwrap();
        }
        let count = |a: Ablation| g.iter().filter(|c| c.ablation == a).count();
        assert_eq!(
            [Ablation::Alpha, Ablation::Beta, Ablation::Gamma, Ablation::Zeta].map(count),
            [3, 4, 4, 4]
        );
    }

    #[test]
    fn beta_profiles_sum_to_one() {
        for b in [
            BetaProfile::Equal,
            BetaProfile::FirstHeavy,
            BetaProfile::LastHeavy,
            BetaProfile::ExpUp,
            BetaProfile::ExpDown,
        ] {
            for n in 1..7 {
                let w = b.weights(n);
                assert_eq!(w.len(), n);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(BetaProfile::FirstHeavy.weights(5), vec![0.8, 0.05, 0.05, 0.05, 0.05]);
        let up = BetaProfile::ExpUp.weights(5);
        assert!(up.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn toml_round_trip() {
        for c in ExperimentConfig::grid() {
            let text = c.to_commented_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
        }
    }

    #[test]
    fn ablation_membership_enforced() {
        let mut c = ExperimentConfig::grid().remove(0);
        c.stream.gamma = Some(0.2);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::grid().remove(0);
        c.stream.alpha = None;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::grid().remove(0);
        c.ablation = Ablation::Beta;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::grid().remove(0);
        c.schema_version = 9;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "schema_version = 1\nexperiment_id = 1\nablation = \"alpha\"\nbogus = 3\n[stream]\nalpha = 0.05\n";
        assert!(matches!(ExperimentConfig::from_toml_str(text), Err(CsadError::Config(_))));
    }

    #[test]
    fn stream_spec_applies_overrides() {
        let c = &ExperimentConfig::grid()[3];
        let s = c.stream_spec(DatasetId::Mnist, 7);
        assert_eq!(s.beta, BetaProfile::FirstHeavy.weights(5));
        assert_eq!(s.seed, 7);
        assert_eq!(s.normal_class, DEFAULT_NORMAL_CLASS);
        assert_eq!(s.alpha, crate::stream::DEFAULT_ALPHA);
    }
}
