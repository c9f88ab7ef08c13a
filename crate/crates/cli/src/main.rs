//! `crnet`: synthesise data, train per fold, evaluate and plot.

mod commands;
mod plot;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "crnet", version, about = "Few-shot segmentation with cross-reference networks")]
pub struct Cli {
    /// Seed for data generation, training and evaluation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat key=value settings file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one setting; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic shapes dataset in the on-disk layout.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Train one fold (or all) and write checkpoints and metrics logs.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Run directory; fold `f` goes to `<out>/fold<f>`.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, conflicts_with = "all_folds")]
        fold: Option<usize>,
        #[arg(long)]
        all_folds: bool,
        #[arg(long)]
        episodes: Option<usize>,
        /// Continue from the fold's checkpoint when one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate per-fold checkpoints and write a report table and record.
    Eval {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        /// Report directory; defaults to the run directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Report file stem.
        #[arg(long, default_value = "eval")]
        name: String,
        /// Evaluate a single fold instead of cross-validating all folds.
        #[arg(long)]
        fold: Option<usize>,
        /// Comma-separated test scales, e.g. 0.75,1,1.25.
        #[arg(long)]
        scales: Option<String>,
        #[arg(long)]
        refine_steps: Option<usize>,
        #[arg(long)]
        kshot: Option<usize>,
        /// fusion, finetune or finetune+fusion.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Render loss curves and per-fold bars as PNG files.
    Plot {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        /// Cross-validation record; defaults to `<run>/eval.json` when present.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    // clap prints usage errors and exits with status 2 itself.
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
