mod commands;
mod source;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use csad_core::error::CsadError;

#[derive(Parser, Debug)]
#[command(name = "csad", version, about = "Continual semi-supervised anomaly detection experiments")]
struct Cli {
    /// Root of the dataset tree (falls back to CSAD_DATA_DIR, then ./data).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Only print errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the training, validation and test streams and write their manifests.
    BuildStream {
        #[command(flatten)]
        stream: StreamArgs,
        /// Directory receiving train.json, validation.json and test.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one strategy over a training stream and save a checkpoint.
    Train {
        #[command(flatten)]
        stream: StreamArgs,
        #[arg(long)]
        strategy: String,
        /// Checkpoint file to write.
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        /// Training history (JSON) next to the checkpoint.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
    },
    /// Score a checkpoint on the test stream, one AUC per episode.
    Evaluate {
        #[command(flatten)]
        stream: StreamArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the episode results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every (dataset, strategy, seed) cell of one or more experiment configs.
    RunExperiment {
        /// Experiment config file, or a directory of them.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Rerun cells whose results already exist.
        #[arg(long)]
        force: bool,
        /// Save a checkpoint next to every result.
        #[arg(long)]
        checkpoints: bool,
        /// Override the config's seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Override the config's datasets.
        #[arg(long, value_delimiter = ',')]
        datasets: Option<Vec<String>>,
        /// Stratified cap on training rows.
        #[arg(long)]
        train_limit: Option<usize>,
        /// Stratified cap on test rows.
        #[arg(long)]
        test_limit: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Render tables and bar charts from result records.
    Report {
        #[arg(long, default_value = "results")]
        results: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Print the fitted Weibull models and acceptance history stored in a checkpoint.
    InspectWeibull {
        checkpoint: PathBuf,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Write the fifteen shipped experiment configs.
    WriteConfigs {
        #[arg(long, default_value = "configs")]
        out: PathBuf,
    },
}

/// Where a stream recipe comes from.
#[derive(Args, Debug, Clone)]
pub struct StreamArgs {
    /// Stream spec (TOML or JSON) or a manifest written by build-stream.
    #[arg(long, conflicts_with = "dataset")]
    spec: Option<PathBuf>,
    /// Experiment config whose stream recipe, model and strategy settings apply.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    normal_class: Option<u8>,
    /// Seed for the stream, initialisation and training.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Precision {
    F32,
    F64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<CsadError>())
        .map(|e| e.exit_code())
        .unwrap_or(1) as u8
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let data_dir = csad_core::data::resolve_data_dir(cli.data_dir.as_deref());
    match commands::dispatch(cli.command, &data_dir) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
