mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use senticomp::treebank::DifficultyOptions;

use commands::Split;
use config::{Overrides, RunConfig};
use error::{CliError, Result};

/// Sentiment composition over binary constituency trees.
#[derive(Parser)]
#[command(name = "senticomp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Share of phrase labels kept for training, in [0, 1].
    #[arg(long)]
    label_fraction: Option<f64>,
    /// Number of sentiment classes.
    #[arg(long, value_parser = parse_granularity)]
    granularity: Option<u8>,
    /// Also supervise single-token nodes.
    #[arg(long)]
    token_node_objective: bool,
    /// Checkpoint and report directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let flags = Overrides {
            seed: self.seed,
            epochs: self.epochs,
            label_fraction: self.label_fraction,
            granularity: self.granularity,
            token_node_objective: self.token_node_objective,
            out_dir: self.out_dir.clone(),
        };
        RunConfig::resolve(self.config.as_deref(), &flags)
    }
}

#[derive(Args)]
struct CheckpointArgs {
    /// Directory written by `train`; defaults to `paths.checkpoint_dir`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch and write a checkpoint with its log.
    Train(ConfigArgs),
    /// Continue from a checkpoint with sentence-level labels only.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        from: PathBuf,
    },
    /// Score a checkpoint and write the full report.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        checkpoint: CheckpointArgs,
        /// Ignore leaf-edge switches in difficulty counts.
        #[arg(long)]
        phrase_edges_only: bool,
    },
    /// Export attention traces (JSON and DOT) for a run of sentences.
    Trace {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        checkpoint: CheckpointArgs,
        /// Index of the first sentence.
        #[arg(long)]
        sentence: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Difficulty, negation and node statistics of a treebank.
    Analyze {
        treebank: PathBuf,
        #[arg(long)]
        phrase_edges_only: bool,
        /// Write the JSON here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-bin accuracy differences between two reports.
    Compare { a: PathBuf, b: PathBuf },
    /// Write a synthetic labelled treebank.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the generator's opinion-word list here.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    Config(ConfigArgs),
}

fn parse_granularity(s: &str) -> std::result::Result<u8, String> {
    match s {
        "5" | "3" | "2" => Ok(s.parse().expect("digit")),
        _ => Err(format!("expected 5, 3 or 2, got `{s}`")),
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("SENTICOMP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("SENTICOMP_THREADS: expected a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::other(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let opts = |phrase_edges_only| DifficultyOptions { phrase_edges_only };
    match cli.command {
        Command::Train(args) => commands::train_cmd(&args.resolve()?),
        Command::Finetune { config, from } => commands::finetune_cmd(&config.resolve()?, &from),
        Command::Eval {
            config,
            checkpoint,
            phrase_edges_only,
        } => {
            let cfg = config.resolve()?;
            let dir = checkpoint.checkpoint.unwrap_or_else(|| cfg.paths.checkpoint_dir.clone());
            commands::eval_cmd(&cfg, &dir, checkpoint.split, opts(phrase_edges_only))
        }
        Command::Trace {
            config,
            checkpoint,
            sentence,
            count,
        } => {
            let cfg = config.resolve()?;
            let dir = checkpoint.checkpoint.unwrap_or_else(|| cfg.paths.checkpoint_dir.clone());
            commands::trace_cmd(&cfg, &dir, checkpoint.split, sentence, count)
        }
        Command::Analyze {
            treebank,
            phrase_edges_only,
            out,
        } => commands::analyze_cmd(&treebank, opts(phrase_edges_only), out.as_deref()),
        Command::Compare { a, b } => commands::compare_cmd(&a, &b),
        Command::Synth {
            count,
            seed,
            out,
            lexicon,
        } => commands::synth_cmd(count, seed, &out, lexicon.as_deref()),
        Command::Config(args) => {
            print!("{}", args.resolve()?.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
