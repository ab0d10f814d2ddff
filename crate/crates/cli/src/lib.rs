//! Command-line surface for the detector: `train`, `score`, `eval`,
//! `ablate`, and `bench`, all driven by a TOML config with `--set` overrides.
//!
//! Exit codes: 0 success, 2 config errors, 3 data errors, 4 numeric errors,
//! 5 I/O errors. Failures print a single `error[<class>]: ...` line.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use patchtrad::{Error, Result};

pub mod commands;
pub mod config;

use commands::BenchArgs;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "patchtrad",
    version,
    about = "Patch-based transformer anomaly detection for time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set train.epochs=5. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides output.dir from the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the normalizer, train one model per dataset entry, and write
    /// checkpoints plus per-epoch loss logs.
    Train(CommonArgs),
    /// Score a test split with a trained checkpoint, one CSV row per
    /// observation.
    Score {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to score with (default: the train command's output).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compute ROC-AUC reports (per entry plus a macro-average for
    /// manifests), either from checkpoints or from an existing score CSV.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate a previously written score CSV instead of re-scoring.
        #[arg(long, conflicts_with = "checkpoint")]
        scores: Option<PathBuf>,
    },
    /// Sweep patch length and stride, training one fresh model per cell.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Grid cells as PATCHxSTRIDE pairs, e.g. "8x6,8x8,16x12".
        #[arg(long)]
        grid: Option<String>,
    },
    /// Measure batched inference latency across window sizes.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated window sizes, e.g. "32,64,128".
        #[arg(long)]
        windows: Option<String>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Timed iterations per window size (minimum 30).
        #[arg(long)]
        iterations: Option<usize>,
        /// Warmup iterations per window size (minimum 5).
        #[arg(long)]
        warmup: Option<usize>,
        /// Modality count when no dataset is available to infer it from.
        #[arg(long)]
        modalities: Option<usize>,
    },
}

fn load(common: &CommonArgs) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(&common.config, &common.set)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    Ok((cfg, out))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, out) = load(&common)?;
            commands::cmd_train(&cfg, &out)
        }
        Command::Score { common, checkpoint } => {
            let (cfg, out) = load(&common)?;
            commands::cmd_score(&cfg, &out, checkpoint.as_deref())
        }
        Command::Eval {
            common,
            checkpoint,
            scores,
        } => {
            let (cfg, out) = load(&common)?;
            commands::cmd_eval(&cfg, &out, checkpoint.as_deref(), scores.as_deref())
        }
        Command::Ablate { common, grid } => {
            let (cfg, out) = load(&common)?;
            let cells = match grid {
                Some(spec) => commands::parse_grid(&spec)?,
                None => commands::DEFAULT_ABLATION_GRID.to_vec(),
            };
            commands::cmd_ablate(&cfg, &out, &cells)
        }
        Command::Bench {
            common,
            windows,
            batch_size,
            iterations,
            warmup,
            modalities,
        } => {
            let (cfg, out) = load(&common)?;
            let mut args = BenchArgs::default();
            if let Some(spec) = windows {
                args.windows = spec
                    .split(',')
                    .map(|w| {
                        w.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Config(format!("bad window size '{}'", w.trim())))
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            if let Some(b) = batch_size {
                args.batch_size = b;
            }
            if let Some(i) = iterations {
                args.iterations = i;
            }
            if let Some(w) = warmup {
                args.warmup = w;
            }
            args.modalities = modalities;
            commands::cmd_bench(&cfg, &out, &args)
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err.class() {
        "config" => 2,
        "data" => 3,
        "numeric" => 4,
        _ => 5,
    }
}

/// Parses and runs a full command line (including argv[0]); returns the
/// process exit code. Kept as a library entry point so integration tests can
/// drive the binary in-process.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // clap renders its own help/usage text; `--help` exits cleanly.
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error[{}]: {}", err.class(), err.message());
            exit_code(&err)
        }
    }
}
