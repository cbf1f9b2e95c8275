//! The `ddx` command line: dataset ingestion, agent runs, metric evaluation
//! and trace replay.
//!
//! Exit codes: 0 on success, 2 for bad input (configuration, dataset,
//! trace or argument errors), 3 when a run completes no case, 1 otherwise.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use ddx_core::ingest::{DedupMode, RareBenchSubset};
use ddx_core::model::Dataset;
use ddx_core::orchestrator::IterationKind;
use ddx_core::Error;

pub mod commands;
pub mod config;
pub mod replay;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NONE_COMPLETED: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "ddx",
    version,
    about = "Multi-agent differential diagnosis runs and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Fixed,
    Dynamic,
}

impl From<PolicyArg> for IterationKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Fixed => IterationKind::Fixed,
            PolicyArg::Dynamic => IterationKind::Dynamic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DedupArg {
    Exact,
    /// Ask the configured driver backend to merge redundant names.
    Assisted,
}

impl From<DedupArg> for DedupMode {
    fn from(d: DedupArg) -> Self {
        match d {
            DedupArg::Exact => DedupMode::Exact,
            DedupArg::Assisted => DedupMode::BackendAssisted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScalarArg {
    F32,
    F64,
    /// Exact rationals.
    Exact,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a dataset, sample an evaluation set and write it out.
    Ingest(IngestArgs),
    /// Run the agents over a dataset as described by a config file.
    Run(RunArgs),
    /// Compute GTPA@k, average rank and progress for run directories.
    Eval(EvalArgs),
    /// Print a readable account of one case trace.
    Replay(ReplayArgs),
}

#[derive(Debug, clap::Args)]
pub struct IngestArgs {
    #[arg(long, value_parser = parse_dataset)]
    pub dataset: Dataset,
    #[arg(long)]
    pub path: PathBuf,
    #[arg(long, value_parser = parse_subset)]
    pub subset: Option<RareBenchSubset>,
    /// Cases to sample; all of them when omitted.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = DedupArg::Exact)]
    pub dedup: DedupArg,
    /// Run config whose driver backend performs assisted dedup.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    #[arg(long)]
    pub max_iterations: Option<u32>,
    #[arg(long)]
    pub questions: Option<u32>,
    #[arg(long)]
    pub stop_on_stable: bool,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Run directories holding case traces.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = ddx_core::metrics::DEFAULT_K_VALUES)]
    pub k: Vec<u32>,
    #[arg(long, value_enum, default_value_t = ScalarArg::F64)]
    pub scalar: ScalarArg,
    /// Write the reports as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ReplayArgs {
    pub trace: PathBuf,
    /// Include every model request and response.
    #[arg(long)]
    pub verbose: bool,
}

fn parse_dataset(s: &str) -> Result<Dataset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_subset(s: &str) -> Result<RareBenchSubset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Exit code for an error that ended a command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::InvalidName(_)
        | Error::ParseFailure(_)
        | Error::Template(_)
        | Error::Ingest(_)
        | Error::SchemaDrift { .. }
        | Error::Metrics(_)
        | Error::Json(_) => EXIT_INPUT,
        _ => EXIT_OTHER,
    }
}

/// Parse `args` (program name first), run the command and return the exit
/// code. Errors go to stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Run(a) => commands::run(a),
        Command::Eval(a) => commands::eval(a),
        Command::Replay(a) => commands::replay(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
