use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use segcascade::corpus::Split;
use segcascade::workflow::{self, DecodeMode, DecodeRequest, RunConfig};

/// Segmental cascade training, pruning and decoding.
#[derive(Debug, Parser)]
#[command(name = "segcascade", version)]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct SplitArg {
    /// train, dev or test; all utterances when omitted.
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus into corpus_dir.
    Synth(ConfigArg),
    /// Train the model of one cascade level.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 1)]
        level: usize,
    },
    /// Decode with a trained level model.
    Decode {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 1)]
        level: usize,
        /// Model file; defaults to the level's trained model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Exact best-path decoding (the default).
        #[arg(long, conflicts_with = "beam")]
        exact: bool,
        /// Beam search of the given width.
        #[arg(long)]
        beam: Option<usize>,
        /// Decode these lattices instead of the level's own graphs.
        #[arg(long)]
        lattice_dir: Option<PathBuf>,
        #[command(flatten)]
        split: SplitArg,
    },
    /// Prune level graphs to lattices.
    Prune {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 1)]
        level: usize,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Overrides the configured lambda of the level.
        #[arg(long)]
        lambda: Option<f64>,
        #[command(flatten)]
        split: SplitArg,
    },
    /// Compose a directory of lattices with a bigram label model.
    Compose {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        lattice_dir: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score hypothesis transcripts against references.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        collapse: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Beam hit rate against exact search.
    Hitrate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 1)]
        level: usize,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        width: usize,
        #[command(flatten)]
        split: SplitArg,
    },
}

fn load(c: &ConfigArg) -> Result<RunConfig> {
    Ok(RunConfig::load(&c.config)?)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Synth(c) => {
            let dir = workflow::synth(&load(&c)?)?;
            println!("wrote {}", dir.display());
        }
        Command::Train { config, level } => print_json(&workflow::train(&load(&config)?, level)?),
        Command::Decode {
            config,
            level,
            model,
            exact: _,
            beam,
            lattice_dir,
            split,
        } => {
            let cfg = load(&config)?;
            let mode = match beam.or(cfg.beam()?) {
                Some(w) => DecodeMode::Beam(w),
                None => DecodeMode::Exact,
            };
            let (report, dir) = workflow::decode(
                &cfg,
                &DecodeRequest {
                    level,
                    model: model.as_deref(),
                    mode,
                    split: split.split,
                    lattice_dir: lattice_dir.as_deref(),
                },
            )?;
            print_json(&report);
            eprintln!("wrote {}", dir.display());
        }
        Command::Prune {
            config,
            level,
            model,
            lambda,
            split,
        } => print_json(&workflow::prune(&load(&config)?, level, model.as_deref(), lambda, split.split)?),
        Command::Compose {
            config,
            lattice_dir,
            lm,
            out,
        } => {
            let dir = workflow::compose(&load(&config)?, &lattice_dir, &lm, out.as_deref())?;
            println!("wrote {}", dir.display());
        }
        Command::Eval {
            hyp,
            reference,
            collapse,
            out,
        } => print_json(&workflow::eval(&hyp, &reference, collapse.as_deref(), out.as_deref())?),
        Command::Hitrate {
            config,
            level,
            model,
            width,
            split,
        } => print_json(&workflow::hitrate(&load(&config)?, level, model.as_deref(), width, split.split)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
