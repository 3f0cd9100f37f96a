mod commands;
mod config;
mod manifest;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pipeline::{Method, TaskArg};

/// Table encoder pre-trained on knowledge-base facts: pre-training,
/// featurization, downstream fitting and benchmark reporting.
#[derive(Parser)]
#[command(name = "tartekit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TargetArgs {
    /// Label column.
    #[arg(long)]
    target: String,
    /// Task kind; a two-valued target is classification by default.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
}

#[derive(Args)]
struct MethodArgs {
    #[arg(long, value_enum, default_value = "ridge")]
    method: Method,
    /// Feature width: the backbone width or a Matryoshka dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// `row_id,prediction` file of base predictions, for boosting.
    #[arg(long)]
    base_preds: Option<PathBuf>,
    /// Fine-tuned models (`fit --method finetune` outputs), boosted in order.
    #[arg(long, value_delimiter = ',')]
    sources: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Entity, relation and fact counts of a triple file.
    KbStats {
        kb: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contrastive pre-training on a triple file.
    Pretrain {
        #[arg(long)]
        kb: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frozen-backbone features of a table as a binary cache.
    Featurize {
        /// Encoder checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Column left out of the features.
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        dim: Option<usize>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fits a downstream model on every row of a table.
    Fit {
        /// Encoder checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        method: MethodArgs,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predictions of a fitted model.
    Predict {
        /// `model.json` from `fit`, or its run directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base_preds: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics over seeded train/test splits for several train sizes.
    Evaluate {
        /// Encoder checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        method: MethodArgs,
        /// Dataset id in the records; defaults to the file stem.
        #[arg(long)]
        dataset: Option<String>,
        /// Method id in the records; defaults to the method name.
        #[arg(long)]
        name: Option<String>,
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        splits: usize,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalized scores, average ranks and the runtime Pareto frontier.
    Report {
        /// `records.csv` files from `evaluate`.
        #[arg(long, value_delimiter = ',', required = true)]
        records: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
