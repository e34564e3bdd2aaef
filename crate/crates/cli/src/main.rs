mod commands;
mod config;
mod stamp;

use clap::{Parser, Subcommand, ValueEnum};
use commands::{Kind, Pipeline};
use config::{BackendKind, Overrides};
use modfactory_core::eval::EvalMode;
use std::path::PathBuf;
use std::process::ExitCode;

/// Builds moderation instruction data, packs training mixtures and evaluates predictions.
///
/// Exit codes: 0 success, 2 configuration error, 3 annotator backend error, 4 data error.
#[derive(Debug, Parser)]
#[command(name = "modfactory", version)]
struct Cli {
    /// Pipeline configuration (TOML). Relative paths inside it resolve against its directory.
    #[arg(long, global = true, default_value = "modfactory.toml")]
    config: PathBuf,
    /// Replace every seed in the config (corpus, mock annotator, packing).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Concurrent annotator requests for generate and eval.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    /// Output directory, relative to the working directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rerun even when inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(name = "zero_shot")]
    ZeroShot,
    Sft,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the config and print decomposition diagnostics for every issue.
    Validate,
    /// Write a synthetic corpus with latent ground truth to corpus.jsonl.
    Synth,
    /// Generate Caption, VQA and CoT samples over the pretrain split.
    Generate,
    /// Mark samples that contradict human labels.
    Filter,
    /// Build stage plans and shuffled manifests.
    Pack {
        /// caption_only, mix_all, two_stage or all. Defaults to pack.strategy.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Score the eval split (zero_shot) or ingest fine-tuned probabilities (sft).
    Eval {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Render report.md from the last eval.
    Report,
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    let overrides = Overrides {
        seed: cli.seed,
        parallelism: cli.parallelism,
        backend: cli.backend,
        out: cli.out.clone(),
    };
    let loaded = match config::load(&cli.config, &overrides) {
        Ok(l) => l,
        Err(e) => {
            tracing::error!(kind = "config", "{e}");
            eprintln!("error: {e}");
            return ExitCode::from(Kind::Config.exit_code());
        }
    };
    let pipeline = Pipeline::new(loaded, cli.force);
    let result = match &cli.command {
        Command::Validate => pipeline.validate(),
        Command::Synth => pipeline.synth(),
        Command::Generate => pipeline.generate(),
        Command::Filter => pipeline.filter(),
        Command::Pack { strategy } => pipeline.pack(strategy.as_deref()),
        Command::Eval { mode } => pipeline.eval(mode.map(|m| match m {
            ModeArg::ZeroShot => EvalMode::ZeroShot,
            ModeArg::Sft => EvalMode::Sft,
        })),
        Command::Report => pipeline.report(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let kind = format!("{:?}", f.kind).to_lowercase();
            tracing::error!(kind, "{:#}", f.error);
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.kind.exit_code())
        }
    }
}
