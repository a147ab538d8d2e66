//! `siamq`: command-line front-end for quality-paired SimSiam pretraining.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::{CliError, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "siamq", version, about = "Quality-paired SimSiam pretraining toolkit")]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for parallel sections; 1 gives bit-reproducible runs.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus: PPGS files, manifest.csv and labels.csv.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate external recordings or a manifest and write a normalized corpus.
    Ingest {
        /// PPGS files or CSV files with a `sample` and optional `artifact` column.
        recordings: Vec<PathBuf>,
        /// Existing manifest to validate and resample.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build quality pairs and the curriculum schedule.
    Pair {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory receiving pairs.csv and schedule.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Curriculum pretraining; writes a checkpoint and a loss log.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        /// Start from this checkpoint instead of a seeded initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_log: PathBuf,
    },
    /// Train a task head (and optionally the encoder) on labeled segments.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// In-domain pairs, for finetune.mode=indomain_last.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metric_log: PathBuf,
    },
    /// Predict on one label split; writes per-segment records and metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Artifact-tolerance report (CSV and SVG) from evaluation records.
    Atcurve {
        #[arg(long)]
        records: PathBuf,
        /// Output path without extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export encoder embeddings for every manifest segment.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.set)?;
    commands::log_config(&cfg)?;
    match &cli.command {
        Command::Synth { out } => commands::synth(&cfg, out),
        Command::Ingest {
            recordings,
            manifest,
            out,
        } => commands::ingest(&cfg, recordings, manifest.as_deref(), out),
        Command::Pair { manifest, out } => commands::pair(&cfg, manifest, out),
        Command::Pretrain {
            manifest,
            pairs,
            schedule,
            init,
            out,
            loss_log,
        } => commands::pretrain_cmd(
            &cfg,
            commands::PretrainArgs {
                manifest,
                pairs,
                schedule,
                init: init.as_deref(),
                out,
                loss_log,
            },
        ),
        Command::Finetune {
            checkpoint,
            manifest,
            labels,
            pairs,
            schedule,
            out,
            metric_log,
        } => commands::finetune_cmd(
            &cfg,
            commands::FinetuneArgs {
                checkpoint,
                manifest,
                labels,
                pairs: pairs.as_deref(),
                schedule: schedule.as_deref(),
                out,
                metric_log,
            },
        ),
        Command::Eval {
            checkpoint,
            manifest,
            labels,
            records,
            metrics,
        } => commands::eval_cmd(&cfg, checkpoint, manifest, labels, records, metrics),
        Command::Atcurve { records, out } => commands::atcurve_cmd(&cfg, records, out),
        Command::Embed {
            checkpoint,
            manifest,
            out,
        } => commands::embed_cmd(checkpoint, manifest, out),
        Command::Gradcheck => commands::gradcheck_cmd(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
