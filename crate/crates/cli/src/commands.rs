use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use csad_core::checkpoint::{self, CheckpointMeta, RngState};
use csad_core::data::DatasetId;
use csad_core::error::CsadError;
use csad_core::eval::{evaluate_stream, mean_auc, EpisodeResult};
use csad_core::experiment::{collect_records, emit_report, run_experiment, ExperimentConfig, RunOptions};
use csad_core::io::write_atomic;
use csad_core::rng::{derive_rng, derive_seed};
use csad_core::scalar::Scalar;
use csad_core::ssvae::SsVae;
use csad_core::strategy::{run_strategy, ReplayRound, RunContext, StrategyConfig, StrategyName};
use csad_core::stream::StreamManifest;

use crate::source::{resolve, Resolved};
use crate::{Command, Precision};

pub fn dispatch(cmd: Command, data_dir: &Path) -> Result<u8> {
    match cmd {
        Command::BuildStream { stream, out } => build_stream(&resolve(&stream)?, data_dir, &out),
        Command::Train {
            stream,
            strategy,
            checkpoint,
            history,
            max_epochs,
            learning_rate,
            precision,
        } => {
            let r = resolve(&stream)?;
            let opts = TrainOpts {
                strategy: strategy.parse::<StrategyName>()?,
                checkpoint,
                history,
                max_epochs,
                learning_rate,
            };
            match precision {
                Precision::F32 => train::<f32>(&r, data_dir, &opts),
                Precision::F64 => train::<f64>(&r, data_dir, &opts),
            }
        }
        Command::Evaluate { stream, checkpoint, out } => {
            let r = resolve(&stream)?;
            match width(&checkpoint)? {
                4 => evaluate::<f32>(&r, data_dir, &checkpoint, out.as_deref()),
                _ => evaluate::<f64>(&r, data_dir, &checkpoint, out.as_deref()),
            }
        }
        Command::RunExperiment {
            config,
            out,
            force,
            checkpoints,
            seeds,
            datasets,
            train_limit,
            test_limit,
            max_epochs,
        } => {
            let mut configs = Vec::new();
            for path in config_files(&config)? {
                let mut c = ExperimentConfig::load(&path)?;
                if let Some(s) = &seeds {
                    c.seeds = s.clone();
                }
                if let Some(d) = &datasets {
                    c.datasets = d.iter().map(|s| s.parse::<DatasetId>()).collect::<Result<_, _>>()?;
                }
                if train_limit.is_some() {
                    c.stream.train_limit = train_limit;
                }
                if test_limit.is_some() {
                    c.stream.test_limit = test_limit;
                }
                if max_epochs.is_some() {
                    c.model.max_epochs = max_epochs;
                }
                c.validate()?;
                configs.push(c);
            }
            let opts = RunOptions {
                data_dir: data_dir.to_path_buf(),
                out_dir: out,
                force,
                save_checkpoints: checkpoints,
            };
            let mut code = 0;
            for c in &configs {
                let s = run_experiment(c, &opts)?;
                println!(
                    "experiment {:02}: {} written, {} skipped, {} failed",
                    c.experiment_id,
                    s.written.len(),
                    s.skipped.len(),
                    s.failures.len()
                );
                for f in &s.failures {
                    eprintln!("  {}/{}/{}: {}", f.dataset, f.strategy, f.seed, f.message);
                }
                code = code.max(s.exit_code());
            }
            Ok(code as u8)
        }
        Command::Report { results, out } => {
            let records = collect_records(&results)?;
            let bundle = emit_report(&records, &out)?;
            println!("{} records", records.len());
            for f in &bundle.files {
                println!("{}", f.display());
            }
            Ok(0)
        }
        Command::InspectWeibull { checkpoint, json } => {
            let meta = match width(&checkpoint)? {
                4 => checkpoint::load::<f32>(&checkpoint)?.1,
                _ => checkpoint::load::<f64>(&checkpoint)?.1,
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&meta.replay_rounds)?);
            } else {
                print!("{}", weibull_table(&meta));
            }
            Ok(0)
        }
        Command::WriteConfigs { out } => {
            for c in ExperimentConfig::grid() {
                let path = out.join(format!("exp{:02}.toml", c.experiment_id));
                write_atomic(&path, c.to_commented_toml()?.as_bytes())?;
                println!("{}", path.display());
            }
            Ok(0)
        }
    }
}

fn width(path: &Path) -> Result<u8> {
    let bytes = std::fs::read(path).map_err(|e| CsadError::io(path, e))?;
    Ok(checkpoint::scalar_width(&bytes)?)
}

/// Expand directories into their `*.toml` files, sorted.
fn config_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| CsadError::Config(format!("cannot read {}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "toml"))
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(CsadError::Config(format!("no .toml configs in {}", p.display())).into());
            }
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn build_stream(r: &Resolved, data_dir: &Path, out: &Path) -> Result<u8> {
    let set = r.build::<f32>(data_dir)?;
    for (name, stream) in [("train", &set.train), ("validation", &set.validation), ("test", &set.test)] {
        let m = StreamManifest::of(stream);
        let path = out.join(format!("{name}.json"));
        m.write(&path)?;
        let labelled: usize = stream.experiences.iter().map(|e| e.n_labelled()).sum();
        let unlabelled: usize = stream.experiences.iter().map(|e| e.n_unlabelled()).sum();
        println!(
            "{name}: {} experiences, {labelled} labelled, {unlabelled} unlabelled -> {}",
            stream.len(),
            path.display()
        );
    }
    Ok(0)
}

struct TrainOpts {
    strategy: StrategyName,
    checkpoint: PathBuf,
    history: Option<PathBuf>,
    max_epochs: Option<usize>,
    learning_rate: Option<f64>,
}

fn strategy_config(r: &Resolved, name: StrategyName) -> StrategyConfig {
    r.config
        .as_ref()
        .and_then(|c| c.strategies.iter().find(|s| s.name == name).cloned())
        .unwrap_or_else(|| StrategyConfig::named(name))
}

fn train<A: Scalar>(r: &Resolved, data_dir: &Path, opts: &TrainOpts) -> Result<u8> {
    let set = r.build::<A>(data_dir)?;
    let dim = set.train.input_dim().context("training stream holds no rows")?;
    let mut cfg = r.model_config(dim);
    if let Some(e) = opts.max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(lr) = opts.learning_rate {
        cfg.learning_rate = lr;
    }
    let seed = r.spec.seed;
    let model = SsVae::<A>::new(cfg, &mut derive_rng(seed, "init", 0))?;
    let strategy = strategy_config(r, opts.strategy);
    let n = set.train.len();
    let ctx = RunContext { seed, test: None };
    let run = run_strategy(&strategy, model, set.train, set.validation, &ctx)?;
    for h in &run.histories {
        let best = h
            .best_epoch
            .and_then(|b| h.epochs.get(b))
            .and_then(|e| e.val_total)
            .map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "experience {}: {} epochs, best validation loss {best}, {} labelled + {} replay, {} unlabelled",
            h.experience,
            h.epochs.len(),
            h.n_labelled,
            h.n_replay,
            h.n_unlabelled
        );
    }
    let meta = CheckpointMeta {
        strategy: Some(strategy.name.as_str().to_string()),
        seed: Some(seed),
        experience: n.checked_sub(1),
        rng: Some(RngState::capture(&derive_rng(seed, "train", n as u64))),
        replay_rounds: run.replay_rounds.clone(),
        notes: run.notes.clone(),
    };
    checkpoint::save(&opts.checkpoint, &run.model, &meta)?;
    println!("checkpoint -> {}", opts.checkpoint.display());
    if let Some(path) = &opts.history {
        let text = serde_json::to_string_pretty(&run.histories)?;
        write_atomic(path, text.as_bytes())?;
    }
    Ok(0)
}

fn evaluate<A: Scalar>(r: &Resolved, data_dir: &Path, ckpt: &Path, out: Option<&Path>) -> Result<u8> {
    let (model, meta) = checkpoint::load::<A>(ckpt)?;
    let set = r.build::<A>(data_dir)?;
    let dim = set.test.input_dim().context("test stream holds no rows")?;
    if dim != model.config().input_dim {
        return Err(CsadError::Config(format!(
            "checkpoint expects {} inputs, stream has {dim}",
            model.config().input_dim
        ))
        .into());
    }
    let seed = meta.seed.unwrap_or(r.spec.seed);
    let episodes = evaluate_stream(&model, &set.test, derive_seed(seed, "score", 0))?;
    print!("{}", episode_table(&episodes));
    if let Some(path) = out {
        let text = serde_json::to_string_pretty(&serde_json::json!({
            "checkpoint": ckpt.display().to_string(),
            "stream": r.spec,
            "mean_auc": mean_auc(&episodes),
            "episodes": episodes,
        }))?;
        write_atomic(path, text.as_bytes())?;
    }
    Ok(0)
}

fn episode_table(episodes: &[EpisodeResult]) -> String {
    let mut s = String::from("episode  samples  anomalies  auc\n");
    for e in episodes {
        let auc = e.auc.map_or("-".to_string(), |a| format!("{a:.4}"));
        let _ = writeln!(s, "{:>7}  {:>7}  {:>9}  {auc}", e.episode_index, e.n_samples, e.n_anomalies);
    }
    let mean = mean_auc(episodes).map_or("-".to_string(), |a| format!("{a:.4}"));
    let _ = writeln!(s, "mean auc {mean}");
    s
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.digits$}"))
}

fn round_line(r: &ReplayRound) -> String {
    let w = r.weibull.as_ref();
    format!(
        "{:>10}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}  {:>8}  {:>10}",
        r.experience,
        r.n_correct,
        w.map_or("-".to_string(), |w| w.tail_size.to_string()),
        opt(w.map(|w| w.tau), 5),
        opt(w.map(|w| w.kappa), 4),
        opt(w.map(|w| w.lam), 5),
        opt(r.threshold, 2),
        r.requested,
        r.accepted,
        opt(r.acceptance_rate, 4),
    )
}

fn weibull_table(meta: &CheckpointMeta) -> String {
    let mut s = String::new();
    if let Some(name) = &meta.strategy {
        let _ = writeln!(s, "strategy {name}, seed {}", meta.seed.map_or("-".into(), |v| v.to_string()));
    }
    if meta.replay_rounds.is_empty() {
        s.push_str("no outlier-rejection rounds recorded\n");
        return s;
    }
    let _ = writeln!(
        s,
        "{:>10}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}  {:>9}  {:>8}  {:>10}",
        "experience", "n_correct", "tail_size", "tau", "kappa", "lambda", "threshold", "requested", "accepted", "acceptance"
    );
    for r in &meta.replay_rounds {
        s.push_str(&round_line(r));
        s.push('\n');
        if let Some(f) = &r.fallback {
            let _ = writeln!(s, "{:>10}  fallback: {f}", "");
        }
    }
    s
}
