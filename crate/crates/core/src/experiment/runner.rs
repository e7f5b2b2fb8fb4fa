use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentConfig;
use crate::checkpoint::{self, CheckpointMeta};
use crate::data::{load_dataset, DatasetId, RawDataset, Split};
use crate::error::{CsadError, Result};
use crate::eval::{final_vs_during, mean_auc, ResultRecord, RESULT_SCHEMA_VERSION};
use crate::io::write_atomic;
use crate::rng::derive_rng;
use crate::ssvae::SsVae;
use crate::strategy::{run_strategy, RunContext, StrategyConfig};
use crate::stream::{build_streams, StreamSet};
use crate::synthetic::make_synthetic_stream;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub force: bool,
    pub save_checkpoints: bool,
}

/// A grid cell that did not produce a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub dataset: String,
    pub strategy: String,
    pub seed: u64,
    pub exit_code: i32,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct RunSummary {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
    pub failures: Vec<Failure>,
}

impl RunSummary {
    /// Exit code of the most severe failure, 0 when every cell succeeded.
    pub fn exit_code(&self) -> i32 {
        self.failures.iter().map(|f| f.exit_code).max().unwrap_or(0)
    }
}

pub fn result_path(out: &Path, experiment_id: u32, dataset: DatasetId, strategy: &str, seed: u64) -> PathBuf {
    out.join(format!("exp{experiment_id:02}"))
        .join(dataset.as_str())
        .join(strategy)
        .join(format!("{seed}.json"))
}

/// Everything that determines one cell's result.
pub fn cell_config(
    cfg: &ExperimentConfig,
    dataset: DatasetId,
    strategy: &StrategyConfig,
    seed: u64,
    input_dim: usize,
    data_hash: &str,
) -> serde_json::Value {
    let mut v = serde_json::json!({
        "experiment_id": cfg.experiment_id,
        "ablation": cfg.ablation,
        "value": cfg.ablation_value(),
        "dataset": dataset,
        "data_hash": data_hash,
        "precision": "f32",
        "stream": cfg.stream_spec(dataset, seed),
        "model": cfg.model_config(input_dim, dataset.image_shape()),
        "strategy": strategy,
    });
    if dataset == DatasetId::Synthetic {
        v["synthetic"] = serde_json::to_value(&cfg.synthetic).expect("serializable");
    }
    v
}

/// SHA-256 of the canonical JSON form (keys sorted).
pub fn config_hash(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

struct Source {
    dataset: DatasetId,
    input_dim: usize,
    hash: String,
    raw: Option<(RawDataset<f32>, RawDataset<f32>)>,
}

fn load_source(cfg: &ExperimentConfig, dataset: DatasetId, data_dir: &Path) -> Result<Source> {
    if dataset == DatasetId::Synthetic {
        let text = serde_json::to_string(&cfg.synthetic).expect("serializable");
        return Ok(Source {
            dataset,
            input_dim: cfg.synthetic.n_features,
            hash: hex::encode(Sha256::digest(text.as_bytes())),
            raw: None,
        });
    }
    let train = load_dataset::<f32>(data_dir, dataset, Split::Train)?;
    let test = load_dataset::<f32>(data_dir, dataset, Split::Test)?;
    let mut h = Sha256::new();
    h.update(train.content_hash().as_bytes());
    h.update(test.content_hash().as_bytes());
    Ok(Source {
        dataset,
        input_dim: train.n_pixels(),
        hash: hex::encode(h.finalize()),
        raw: Some((train, test)),
    })
}

fn streams(cfg: &ExperimentConfig, src: &Source, seed: u64) -> Result<StreamSet<f32>> {
    let spec = cfg.stream_spec(src.dataset, seed);
    match &src.raw {
        Some((train, test)) => build_streams(train, test, &spec),
        None => make_synthetic_stream(&cfg.synthetic, &spec),
    }
}

fn run_cell(
    cfg: &ExperimentConfig,
    src: &Source,
    strategy: &StrategyConfig,
    seed: u64,
    cell: serde_json::Value,
    hash: String,
    opts: &RunOptions,
    path: &Path,
) -> Result<()> {
    let started = Instant::now();
    let set = streams(cfg, src, seed)?;
    let model_cfg = cfg.model_config(src.input_dim, src.dataset.image_shape());
    let model = SsVae::<f32>::new(model_cfg, &mut derive_rng(seed, "init", 0))?;
    let ctx = RunContext {
        seed,
        test: Some(&set.test),
    };
    let mut notes = set.train.notes.clone();
    let run = run_strategy(strategy, model, set.train, set.validation, &ctx)?;
    notes.extend(run.notes.iter().cloned());
    let episodes = run.snapshots.last().cloned().unwrap_or_default();
    let mut config = cell;
    config["replay_rounds"] = serde_json::to_value(&run.replay_rounds).expect("serializable");
    config["histories"] = serde_json::to_value(&run.histories).expect("serializable");
    let record = ResultRecord {
        schema_version: RESULT_SCHEMA_VERSION,
        experiment_id: cfg.experiment_id,
        dataset: src.dataset.as_str().to_string(),
        strategy: strategy.name.as_str().to_string(),
        seed,
        mean_auc: mean_auc(&episodes),
        episodes,
        config_hash: hash,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        forgetting: Some(final_vs_during(&run.snapshots)),
        config,
        notes,
    };
    if opts.save_checkpoints {
        let meta = CheckpointMeta {
            strategy: Some(record.strategy.clone()),
            seed: Some(seed),
            experience: run.histories.last().map(|h| h.experience),
            rng: None,
            replay_rounds: run.replay_rounds.clone(),
            notes: Vec::new(),
        };
        checkpoint::save(&path.with_extension("ckpt"), &run.model, &meta)?;
    }
    record.write(path)
}

/// Run every (dataset, strategy, seed) cell of an experiment. Cells whose
/// result file already exists with the same configuration hash are skipped
/// unless `force` is set. A failing cell is written to `failures.json` and
/// the rest of the grid continues.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let mut summary = RunSummary::default();
    for &dataset in &cfg.datasets {
        let src = match load_source(cfg, dataset, &opts.data_dir) {
            Ok(s) => s,
            Err(e) => {
                log::error!("experiment {} {dataset}: {e}", cfg.experiment_id);
                for s in &cfg.strategies {
                    for &seed in &cfg.seeds {
                        summary.failures.push(Failure {
                            dataset: dataset.as_str().into(),
                            strategy: s.name.as_str().into(),
                            seed,
                            exit_code: e.exit_code(),
                            message: e.to_string(),
                        });
                    }
                }
                continue;
            }
        };
        let mut todo = Vec::new();
        for strategy in &cfg.strategies {
            for &seed in &cfg.seeds {
                let cell = cell_config(cfg, dataset, strategy, seed, src.input_dim, &src.hash);
                let hash = config_hash(&cell);
                let path = result_path(&opts.out_dir, cfg.experiment_id, dataset, strategy.name.as_str(), seed);
                if !opts.force {
                    match ResultRecord::read(&path) {
                        Ok(r) if r.config_hash == hash => {
                            summary.skipped.push(path);
                            continue;
                        }
                        Ok(_) => log::warn!("{}: configuration changed, rerunning", path.display()),
                        Err(_) => {}
                    }
                }
                todo.push((strategy, seed, cell, hash, path));
            }
        }
        let outcomes: Vec<_> = todo
            .into_par_iter()
            .map(|(strategy, seed, cell, hash, path)| {
                log::info!(
                    "experiment {} {dataset} {} seed {seed}",
                    cfg.experiment_id,
                    strategy.name
                );
                let r = run_cell(cfg, &src, strategy, seed, cell, hash, opts, &path);
                (strategy, seed, path, r)
            })
            .collect();
        for (strategy, seed, path, r) in outcomes {
            match r {
                Ok(()) => summary.written.push(path),
                Err(e) => {
                    log::error!("{}: {e}", path.display());
                    summary.failures.push(Failure {
                        dataset: dataset.as_str().into(),
                        strategy: strategy.name.as_str().into(),
                        seed,
                        exit_code: e.exit_code(),
                        message: e.to_string(),
                    })
                }
            }
        }
    }
    let manifest = opts.out_dir.join(format!("exp{:02}", cfg.experiment_id)).join("failures.json");
    let by_cell: BTreeMap<String, &Failure> = summary
        .failures
        .iter()
        .map(|f| (format!("{}/{}/{}", f.dataset, f.strategy, f.seed), f))
        .collect();
    let text = serde_json::to_string_pretty(&by_cell).map_err(|e| CsadError::format("failure manifest", e.to_string()))?;
    write_atomic(&manifest, text.as_bytes())?;
    Ok(summary)
}
