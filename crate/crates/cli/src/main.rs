//! `tsdistill`: generate corpora, pretrain, and evaluate encoders.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "tsdistill",
    version,
    about = "Self-distillation pretraining and evaluation for time-series encoders"
)]
struct Cli {
    /// Master seed; overrides `train.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (repeat for trace level).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic pretraining corpus.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 512)]
        length: usize,
    },
    /// Pretrain student and teacher on a corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for metrics and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write frozen teacher features for a dataset.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory; receives `<name>_TRAIN.csv` and `<name>_TEST.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probe on frozen features.
    Probe {
        /// Checkpoint to embed with; omit when passing feature tables.
        #[arg(long, requires_all = ["train", "test"])]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: OptionalDataArgs,
        #[arg(long, conflicts_with = "checkpoint", requires = "test_features")]
        train_features: Option<PathBuf>,
        #[arg(long, conflicts_with = "checkpoint", requires = "train_features")]
        test_features: Option<PathBuf>,
        #[command(flatten)]
        result: ResultArgs,
    },
    /// Fine-tune the backbone with a linear head.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        result: ResultArgs,
    },
    /// Aggregate result CSVs into a JSON report and bar-chart data.
    Report {
        /// Result CSVs with columns dataset,seed,method,regime,accuracy.
        #[arg(long, required = true, num_args = 1..)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Bar-chart data (x = method, y = average accuracy, wins).
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Training split in `.ts` format.
    #[arg(long)]
    train: PathBuf,
    /// Test split in `.ts` format.
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args)]
struct OptionalDataArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args)]
struct ResultArgs {
    /// Result CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Dataset name in the results; defaults to the problem name.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value = "tsdistill")]
    method: String,
    /// Evaluation seeds; defaults to the master seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("TSDISTILL_THREADS") {
        let n: usize = v.parse().map_err(|_| {
            anyhow::anyhow!("TSDISTILL_THREADS must be a positive integer, got {v:?}")
        })?;
        if n == 0 {
            anyhow::bail!("TSDISTILL_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => config::RunConfig::load(p)?,
        None => config::RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let ctx = commands::Context {
        hash: cfg.hash()?,
        cfg,
    };
    match cli.command {
        Command::Generate {
            out,
            samples,
            length,
        } => commands::generate(&ctx, &out, samples, length),
        Command::Pretrain {
            corpus,
            out,
            resume,
        } => commands::pretrain(&ctx, &corpus, &out, resume.as_deref()),
        Command::Embed {
            checkpoint,
            data,
            out,
        } => commands::embed(&checkpoint, &data.train, &data.test, &out),
        Command::Probe {
            checkpoint,
            data,
            train_features,
            test_features,
            result,
        } => {
            let input = match (checkpoint, data.train, data.test, train_features, test_features) {
                (Some(ck), Some(train), Some(test), None, None) => commands::ProbeInput::Model { checkpoint: ck, train, test },
                (None, None, None, Some(train), Some(test)) => commands::ProbeInput::Features { train, test },
                _ => anyhow::bail!("probe needs either --checkpoint with --train/--test, or --train-features with --test-features"),
            };
            commands::probe(&ctx, input, &result.into())
        }
        Command::Finetune {
            checkpoint,
            data,
            result,
        } => commands::finetune(&ctx, &checkpoint, &data.train, &data.test, &result.into()),
        Command::Report { results, out, plot } => {
            commands::report(&ctx, &results, &out, plot.as_deref())
        }
    }
}

impl From<ResultArgs> for commands::ResultSpec {
    fn from(a: ResultArgs) -> Self {
        Self {
            out: a.out,
            dataset: a.dataset,
            method: a.method,
            seeds: a.seeds,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or(format!("tsdistill={level}")),
    )
    .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
