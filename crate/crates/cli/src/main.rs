mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use partwise::Error;

use crate::config::{resolve, Overrides, SEED_ENV};

#[derive(Parser)]
#[command(name = "partwise", version, about = "Part-dictionary ViT: synthetic data, training, evaluation, inspection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML file of run settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset with its evaluation splits.
    GenData {
        /// Replace a non-empty data directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the student/teacher pair.
    Pretrain(Common),
    /// Fine-tune a pretrained pair with the invariant losses.
    Finetune(Common),
    /// Episodic few-shot accuracy of the teacher.
    EvalFewshot(Common),
    /// Accuracy on ORIGINAL, M-SAME and M-RAND, and the BG-GAP.
    EvalSplits(Common),
    /// Write raw maps of one sample as PGM images.
    Inspect(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Sampling(_) => 2,
        Error::Numeric(_) => 3,
        Error::Io(_) | Error::Format { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> partwise::Result<()> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let load = |c: &Common| resolve(c.config.as_deref(), &c.overrides, env_seed.clone());
    match cli.command {
        Command::GenData { force, common } => commands::gen_data(&load(&common)?, force),
        Command::Pretrain(c) => commands::train(&load(&c)?, partwise::distill::Phase::Pretrain),
        Command::Finetune(c) => commands::train(&load(&c)?, partwise::distill::Phase::Finetune),
        Command::EvalFewshot(c) => commands::eval_fewshot(&load(&c)?),
        Command::EvalSplits(c) => commands::eval_splits(&load(&c)?),
        Command::Inspect(c) => commands::inspect(&load(&c)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
