//! The `sap` command: build description catalogs, train prompts, evaluate
//! checkpoints under the standard protocols, and aggregate reports.
//!
//! Exit codes: 0 on success, 1 when a description provider fails with no
//! cached answer or training diverges, 2 for bad configuration, manifests,
//! catalogs, checkpoints, or protocol choices.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use sap_core::{AlignmentVariant, Protocol, SapError};

pub mod config;
pub mod describe;
pub mod inputs;
pub mod evaluate;
pub mod report;
pub mod train;

pub use config::{Preset, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "sap", version, about = "Description-guided prompt tuning on a frozen dual encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Query a language model for class descriptions and write a catalog.
    Describe(DescribeArgs),
    /// Train prompt parameters and write a checkpoint with its history.
    Train(TrainArgs),
    /// Score a checkpoint under one protocol and write a report.
    Eval(EvalArgs),
    /// Average several reports of the same protocol.
    Report(ReportArgs),
}

/// Flags shared by every command that reads a run configuration.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.lr=0.001`. Repeatable;
    /// applied in order after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Start from a bundled configuration with built-in data.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Clone, Args)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset manifest listing the classes to describe.
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Catalog file to write.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Never call the provider; fail on a cache miss.
    #[arg(long)]
    pub cached_only: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Training-split manifest.
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Description catalog.
    #[arg(long, value_name = "PATH")]
    pub catalog: Option<PathBuf>,
    /// Directory for `checkpoint.json`, `history.jsonl`, `epochs.jsonl`,
    /// `run.toml`, and `summary.json`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<AlignmentVariant>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Test-split manifest.
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Description catalog.
    #[arg(long, value_name = "PATH")]
    pub catalog: Option<PathBuf>,
    /// Trained checkpoint; without one the frozen encoder is scored.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// One of gzs, b2n, ovc, xdataset, fewshot.
    #[arg(long, value_parser = parse_protocol)]
    pub protocol: Option<Protocol>,
    /// Report file to write.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Alignment variant; defaults to the checkpoint's.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<AlignmentVariant>,
    /// Threads scoring test images.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Report files written by `sap eval`.
    #[arg(required = true, value_name = "REPORT")]
    pub reports: Vec<PathBuf>,
    /// Aggregate JSON to write; the table goes next to it with a `.txt`
    /// extension.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: SapError| e.to_string())
}

fn parse_variant(s: &str) -> Result<AlignmentVariant, String> {
    s.parse().map_err(|e: SapError| e.to_string())
}

/// Exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let sap = err.chain().find_map(|e| e.downcast_ref::<SapError>());
    match sap {
        Some(SapError::Provider { .. } | SapError::MissingCredential { .. } | SapError::NonFiniteLoss { .. }) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn finish(result: anyhow::Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn cmd_describe(args: &DescribeArgs) -> i32 {
    finish(describe::run(args))
}

pub fn cmd_train(args: &TrainArgs) -> i32 {
    finish(train::run(args))
}

pub fn cmd_eval(args: &EvalArgs) -> i32 {
    finish(evaluate::run(args))
}

pub fn cmd_report(args: &ReportArgs) -> i32 {
    finish(report::run(args))
}

/// Parses `args`, runs the command, and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match &cli.command {
        Command::Describe(args) => cmd_describe(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    }
}
