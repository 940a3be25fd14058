//! `eam`: train, calibrate, plan, evaluate, sweep and export.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eam_core::Error;

use crate::commands::{Ctx, Internal};
use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "eam",
    version,
    about = "Entropy-guided attention map fixing for small ViTs"
)]
struct Cli {
    /// Run configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `[run] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train a ViT and write `model.eamc`.
    Train,
    /// Record attention histogram banks over the calibration subset.
    Calibrate,
    /// Build a fixing plan from a bank.
    Plan,
    /// Top-1 accuracy on the test split, optionally with the plan applied.
    Eval,
    /// Accuracy over a grid of fixing fractions, methods and seeds.
    Sweep,
    /// Write entropy, mean or divergence maps as CSV or PGM.
    Export,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let ctx = Ctx { cfg, out: cli.out };
    match cli.command {
        Command::Train => commands::cmd_train(&ctx),
        Command::Calibrate => commands::cmd_calibrate(&ctx),
        Command::Plan => commands::cmd_plan(&ctx),
        Command::Eval => commands::cmd_eval(&ctx),
        Command::Sweep => commands::cmd_sweep(&ctx),
        Command::Export => commands::cmd_export(&ctx),
    }
}

/// 2 for broken invariants, 1 for everything the user can fix.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Internal>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(
            Error::NonFinite(_)
            | Error::Range { .. }
            | Error::CounterSaturated(_)
            | Error::EmptyCalibration,
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
