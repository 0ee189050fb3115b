use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use structtoken::cli;
use structtoken::config::{load_config, RunConfig};
use structtoken::Result;

#[derive(Parser)]
#[command(name = "structtoken", version, about = "Structure-token segmentation on synthetic shapes")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// `key = value` run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model checkpoint written by `train`, read by `eval` and `visualize`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output file (`train`) or directory (`synth`, `visualize`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and save a checkpoint.
    Train,
    /// Per-class IoU and mIoU on the validation split.
    Eval,
    /// Finite-difference check of every decoder gradient.
    Gradcheck,
    /// Analytic FLOPs and parameter counts of each decoder.
    Flops,
    /// Write the synthetic training and validation splits.
    Synth,
    /// Dump one class's token map at every decoder stage as PGM.
    Visualize,
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| structtoken::Error::Invalid(format!("--{flag} is required")))
}

fn run(args: Args) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let mut out = std::io::stdout().lock();
    match args.command {
        Command::Train => {
            let path = args
                .out
                .as_deref()
                .or(args.checkpoint.as_deref())
                .unwrap_or(Path::new("model.stkn"));
            cli::cmd_train(&cfg, path, &mut out).map(drop)
        }
        Command::Eval => cli::cmd_eval(&cfg, require(&args.checkpoint, "checkpoint")?, &mut out).map(drop),
        Command::Gradcheck => cli::cmd_gradcheck(&cfg, &mut out),
        Command::Flops => cli::cmd_flops(&cfg, &mut out),
        Command::Synth => {
            let dir = args.out.as_deref().unwrap_or(Path::new("data"));
            cli::cmd_synth(&cfg, dir, &mut out).map(drop)
        }
        Command::Visualize => {
            let dir = args.out.as_deref().unwrap_or(Path::new("tokens"));
            cli::cmd_visualize(&cfg, require(&args.checkpoint, "checkpoint")?, dir, &mut out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
