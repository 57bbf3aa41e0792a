use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use mouthing_cli::prepare::{prepare, PrepareStatus};
use mouthing_cli::report::{evaluate, write_report};
use mouthing_cli::run::{run_grid, run_training, RunStatus};
use mouthing_cli::ExperimentConfig;

#[derive(Parser)]
#[command(name = "mouthing", version, about = "Mouthing recognition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the seed: split seed for prepare, base seed for train and
    /// grid, perturbation seed for eval.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory: the prepared-data root for prepare,
    /// the run tree otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Crop, standardize, balance and split the raw datasets.
    Prepare(Common),
    /// Train the configured run.
    Train {
        #[command(flatten)]
        common: Common,
        /// Keep a finished run instead of failing.
        #[arg(long)]
        resume: bool,
    },
    /// Train every run of the results table, then evaluate.
    Grid {
        #[command(flatten)]
        common: Common,
        /// Skip runs that already finished.
        #[arg(long)]
        resume: bool,
    },
    /// Score finished runs and render the results table.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directories; defaults to every table run under the output directory.
        runs: Vec<PathBuf>,
    },
}

enum SeedUse {
    Split,
    Train,
    Perturb,
}

fn load(common: &Common, seed_use: SeedUse) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        match seed_use {
            SeedUse::Split => cfg.data.root = out.clone(),
            _ => cfg.set_output_dir(out.clone()),
        }
    }
    if let Some(seed) = common.seed {
        match seed_use {
            SeedUse::Split => cfg.data.split_seed = seed,
            SeedUse::Train => cfg.train.seed = seed,
            SeedUse::Perturb => cfg.perturb.seed = seed,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn eval_and_write(cfg: &ExperimentConfig, runs: &[PathBuf]) -> Result<()> {
    let report = evaluate(cfg, runs)?;
    write_report(&cfg.output.dir, &report)?;
    print!("{}", report.table);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(common) => {
            let cfg = load(&common, SeedUse::Split)?;
            for (tag, status) in prepare(&cfg)? {
                match status {
                    PrepareStatus::AlreadyPrepared => log(&format!("{tag}: already prepared")),
                    PrepareStatus::Prepared { clips } => log(&format!("{tag}: prepared {clips} clips")),
                }
            }
        }
        Command::Train { common, resume } => {
            let cfg = load(&common, SeedUse::Train)?;
            match run_training(&cfg, resume, &mut log)? {
                RunStatus::Skipped { dir } => log(&format!("{}: complete, skipped", dir.display())),
                RunStatus::Trained { dir, best_epoch, epochs } => {
                    log(&format!("{}: best epoch {best_epoch} of {epochs}", dir.display()))
                }
            }
        }
        Command::Grid { common, resume } => {
            let cfg = load(&common, SeedUse::Train)?;
            run_grid(&cfg, resume, &mut log)?;
            eval_and_write(&cfg, &[])?;
        }
        Command::Eval { common, runs } => {
            let cfg = load(&common, SeedUse::Perturb)?;
            eval_and_write(&cfg, &runs)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::FAILURE
        }
    }
}
