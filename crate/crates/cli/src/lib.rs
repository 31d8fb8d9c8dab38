//! Command-line driver: data generation, training, inference and evaluation.

// Range checks are written `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod run_dir;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{describe_keys, RunConfig, SplitName, Strategy};
use crate::error::CliResult;
use crate::run_dir::{RunDir, StageName};

#[derive(Debug, Parser)]
#[command(name = "diffrefine", version, about = "Refine lifted 3D human poses with a conditional diffusion model")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file; omitted keys keep their defaults.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run directory to use instead of a new one (gen-data) or the latest one
    /// for the seed (other commands).
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train, val and test datasets to a new run directory.
    GenData,
    /// Train the initial lifter (`pretrain`) or the refinement network (`refine`).
    Train {
        #[arg(long, value_enum)]
        stage: StageName,
        /// Continue from the stage's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Refine a dataset with the trained model and write predictions.
    Infer {
        #[arg(long, value_enum)]
        strategy: Option<Strategy>,
        /// Number of hypotheses.
        #[arg(long = "H", value_name = "H")]
        hypotheses: Option<usize>,
        /// Refinement iterations per hypothesis.
        #[arg(long = "K", value_name = "K")]
        iterations: Option<usize>,
        #[arg(long, value_enum)]
        split: Option<SplitName>,
        /// Dataset file to refine instead of a split of the run.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score prediction files, or the strategy grid when none are given.
    Eval {
        /// Predictions files; the first one is the baseline.
        #[arg(long, num_args = 1..)]
        predictions: Vec<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitName>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Print the effective configuration.
    Config,
}

fn after_help() -> String {
    format!("Configuration keys and defaults:\n{}", describe_keys())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cmd = <Cli as clap::CommandFactory>::command().after_long_help(after_help());
    let matches = match cmd.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Effective configuration: file, then `--set`, then dedicated flags.
pub fn effective_config(cli: &Cli) -> CliResult<RunConfig> {
    let g = &cli.global;
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(t) = g.threads {
        overrides.push(format!("threads={t}"));
    }
    match &cli.command {
        Command::Infer { strategy, hypotheses, iterations, split, limit, .. } => {
            if let Some(s) = strategy {
                overrides.push(format!("infer.strategy=\"{}\"", s.name()));
            }
            if let Some(h) = hypotheses {
                overrides.push(format!("infer.hypotheses={h}"));
            }
            if let Some(k) = iterations {
                overrides.push(format!("infer.iterations={k}"));
            }
            if let Some(s) = split {
                overrides.push(format!("infer.split=\"{}\"", s.name()));
            }
            if let Some(l) = limit {
                overrides.push(format!("infer.limit={l}"));
            }
        }
        Command::Eval { split, limit, .. } => {
            if let Some(s) = split {
                overrides.push(format!("eval.split=\"{}\"", s.name()));
            }
            if let Some(l) = limit {
                overrides.push(format!("eval.limit={l}"));
            }
        }
        _ => {}
    }
    RunConfig::load(g.config.as_deref(), &overrides)
}

fn resolve_run_dir(cli: &Cli, cfg: &RunConfig) -> CliResult<RunDir> {
    match (&cli.global.run_dir, &cli.command) {
        (Some(d), _) => Ok(RunDir::at(d)),
        (None, Command::GenData) => RunDir::create_new(&cfg.paths.runs_dir, cfg.seed),
        (None, _) => RunDir::latest(&cfg.paths.runs_dir, cfg.seed),
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = effective_config(&cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let run = resolve_run_dir(&cli, &cfg)?;
    match &cli.command {
        Command::GenData => {
            let summary = commands::gen_data::run(&cfg, &run)?;
            println!("run directory: {}", run.root().display());
            for (split, count) in summary.counts {
                println!("{}: {count} samples", split.name());
            }
        }
        Command::Train { stage, resume } => {
            let logs = commands::train::run(&cfg, &run, *stage, *resume)?;
            println!("epoch, lr, mean_loss, val_mpjpe");
            for l in &logs {
                println!("{l}");
            }
            println!("checkpoint: {}", run.checkpoint(*stage).display());
        }
        Command::Infer { input, .. } => {
            let out = commands::infer::run(&cfg, &run, input.as_deref())?;
            let r = &out.report;
            println!(
                "strategy {} H {} K {} on {} ({} samples)",
                r.strategy.name(),
                r.hypotheses,
                r.iterations,
                r.input,
                r.metrics.samples
            );
            println!("MPJPE {:.3} mm, P-MPJPE {:.3} mm, PCK {:.2}%", r.metrics.mpjpe, r.metrics.p_mpjpe, r.metrics.pck);
            println!("outputs: {}", out.dir.display());
        }
        Command::Eval { predictions, .. } => {
            let out = commands::eval::run(&cfg, &run, predictions)?;
            print!("{}", out.table);
            println!("outputs: {}", out.dir.display());
        }
        Command::Config => unreachable!("handled above"),
    }
    Ok(())
}
