//! Turning command-line stream arguments into built streams.

use std::path::Path;

use anyhow::{Context, Result};
use csad_core::data::{load_dataset, DatasetId, Split};
use csad_core::error::CsadError;
use csad_core::experiment::{ExperimentConfig, DEFAULT_NORMAL_CLASS};
use csad_core::scalar::Scalar;
use csad_core::ssvae::SsVaeConfig;
use csad_core::stream::{build_streams, StreamKind, StreamManifest, StreamSet, StreamSpec};
use csad_core::synthetic::{make_synthetic_stream, SyntheticSpec};

use crate::StreamArgs;

/// A fully resolved stream recipe.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub spec: StreamSpec,
    pub synthetic: SyntheticSpec,
    pub config: Option<ExperimentConfig>,
    /// Manifest the rebuilt stream has to reproduce.
    pub manifest: Option<StreamManifest>,
}

fn config_err(m: String) -> anyhow::Error {
    CsadError::Config(m).into()
}

fn read_spec_file(path: &Path) -> Result<(StreamSpec, Option<StreamManifest>)> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if !is_json {
        let spec = toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        return Ok((spec, None));
    }
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if value.get("content_hash").is_some() {
        let m: StreamManifest =
            serde_json::from_value(value).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if !m.verify_hash() {
            return Err(CsadError::format(path.display().to_string(), "manifest content hash does not match").into());
        }
        return Ok((m.spec.clone(), Some(m)));
    }
    let spec = serde_json::from_value(value).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    Ok((spec, None))
}

pub fn resolve(args: &StreamArgs) -> Result<Resolved> {
    let config = args
        .config
        .as_deref()
        .map(ExperimentConfig::load)
        .transpose()?;
    let dataset = args
        .dataset
        .as_deref()
        .map(str::parse::<DatasetId>)
        .transpose()?;
    let (mut spec, manifest) = match (&args.spec, &config) {
        (Some(path), _) => read_spec_file(path)?,
        (None, Some(cfg)) => {
            let d = dataset.unwrap_or(cfg.datasets[0]);
            (cfg.stream_spec(d, args.seed.unwrap_or(cfg.seeds[0])), None)
        }
        (None, None) => {
            let d = dataset.ok_or_else(|| config_err("give --spec, --config or --dataset".into()))?;
            let nc = args.normal_class.unwrap_or(DEFAULT_NORMAL_CLASS);
            (StreamSpec::ablation_default(d, nc, 0), None)
        }
    };
    let overridden = args.seed.is_some() || args.normal_class.is_some() || args.train_limit.is_some() || args.test_limit.is_some();
    if manifest.is_some() && overridden {
        return Err(config_err("a manifest pins its stream; drop the seed, class and limit overrides".into()));
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(c) = args.normal_class {
        if c != spec.normal_class {
            spec.normal_class = c;
            spec.lambda_classes = vec![csad_core::stream::all_anomaly_classes(c); spec.n_experiences];
        }
    }
    if args.train_limit.is_some() {
        spec.train_limit = args.train_limit;
    }
    if args.test_limit.is_some() {
        spec.test_limit = args.test_limit;
    }
    spec.validate()?;
    let synthetic = config.as_ref().map(|c| c.synthetic.clone()).unwrap_or_default();
    Ok(Resolved {
        spec,
        synthetic,
        config,
        manifest,
    })
}

impl Resolved {
    pub fn build<A: Scalar>(&self, data_dir: &Path) -> Result<StreamSet<A>> {
        let set = if self.spec.dataset == DatasetId::Synthetic {
            make_synthetic_stream(&self.synthetic, &self.spec)?
        } else {
            let train = load_dataset::<A>(data_dir, self.spec.dataset, Split::Train)
                .with_context(|| format!("loading {} from {}", self.spec.dataset, data_dir.display()))?;
            let test = load_dataset::<A>(data_dir, self.spec.dataset, Split::Test)
                .with_context(|| format!("loading {} from {}", self.spec.dataset, data_dir.display()))?;
            build_streams(&train, &test, &self.spec)?
        };
        if let Some(m) = &self.manifest {
            let stream = match m.kind {
                StreamKind::Train => &set.train,
                StreamKind::Validation => &set.validation,
                StreamKind::Test => &set.test,
            };
            let rebuilt = StreamManifest::of(stream);
            if rebuilt.content_hash != m.content_hash {
                return Err(CsadError::format(
                    "stream manifest",
                    format!(
                        "rebuilt {:?} stream hashes to {}, manifest says {}",
                        m.kind, rebuilt.content_hash, m.content_hash
                    ),
                )
                .into());
            }
        }
        Ok(set)
    }

    pub fn model_config(&self, input_dim: usize) -> SsVaeConfig {
        let shape = self.spec.dataset.image_shape();
        match &self.config {
            Some(c) => c.model_config(input_dim, shape),
            None => SsVaeConfig::for_input(input_dim, shape),
        }
    }
}
