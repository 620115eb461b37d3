//! Command-line driver: each subcommand reads the pipeline configuration,
//! does one stage of work and leaves its artifacts plus a manifest in a
//! run directory.

mod commands;
mod workspace;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use neoseize::config::{load_config, PipelineConfig};

pub use workspace::sha256_hex;

#[derive(Debug, Parser)]
#[command(name = "neoseize", version, about = "Neonatal seizure prediction pipeline")]
pub struct Cli {
    /// TOML configuration file; profile defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = parse_kv)]
    pub overrides: Vec<(String, String)>,
    /// Override the pipeline seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory to write instead of a fresh timestamped one.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort (EDF plus annotation CSV) into the raw directory.
    Synth,
    /// Filter, montage and window every raw recording into segment caches.
    Ingest,
    /// Compute MFCC feature caches from segment caches.
    Featurize,
    /// Stratified k-fold cross-validation over pooled segments.
    TrainCv,
    /// Leave-one-subject-out training and evaluation.
    TrainLopo,
    /// Fine-tune leave-one-subject-out models on a few held-out segments.
    Finetune,
    /// Shapley attributions and channel importances on withheld segments.
    Explain,
    /// Render scalp maps from an explain run.
    ScalpPlot,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest => "ingest",
            Command::Featurize => "featurize",
            Command::TrainCv => "train-cv",
            Command::TrainLopo => "train-lopo",
            Command::Finetune => "finetune",
            Command::Explain => "explain",
            Command::ScalpPlot => "scalp-plot",
        }
    }
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Configuration from the file and overrides, `--seed` applied last.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("--config: cannot read {}", p.display()))?,
        None => String::new(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    Ok(load_config(&text, &overrides)?)
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on configuration or runtime
/// failure, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, argv) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(cli: &Cli, argv: Vec<String>) -> Result<PathBuf> {
    let cfg = resolve_config(cli)?;
    commands::dispatch(cli.command, cfg, cli.out.as_deref(), argv)
}
