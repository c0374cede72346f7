//! `forge`: evaluation, consensus filtering, review, curation and toy GRPO
//! from one binary.

mod commands;
mod config;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use forge_core::grounding::Evaluator;
use forge_core::metrics::Averaging;

#[derive(Debug, Parser)]
#[command(
    name = "forge",
    version,
    about = "GUI-agent benchmark evaluation, curation and toy GRPO"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Dataset file (JSON lines, one episode per line).
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Agent trace file (JSON lines, one action per line).
    #[arg(long, global = true)]
    pub traces: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub evaluator: Option<EvaluatorArg>,
    /// Point-match tolerance in pixels.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Bbox fallback tolerance when the labeled point hits no element.
    #[arg(long, global = true)]
    pub fallback_radius: Option<f64>,
    /// Treat element borders as outside.
    #[arg(long, global = true)]
    pub boundary_exclusive: bool,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with defaults for any section.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for data-parallel work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Drop unknown fields in input records instead of rejecting them.
    #[arg(long, global = true)]
    pub lenient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvaluatorArg {
    Point,
    Bbox,
}

impl From<EvaluatorArg> for Evaluator {
    fn from(e: EvaluatorArg) -> Self {
        match e {
            EvaluatorArg::Point => Evaluator::Point,
            EvaluatorArg::Bbox => Evaluator::Bbox,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    JsonLines,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AveragingArg {
    Micro,
    Macro,
}

impl From<AveragingArg> for Averaging {
    fn from(a: AveragingArg) -> Self {
        match a {
            AveragingArg::Micro => Averaging::Micro,
            AveragingArg::Macro => Averaging::Macro,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Easy,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RewardArg {
    Gaussian,
    Binary,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score agent traces against the dataset.
    Eval {
        #[arg(long, value_enum, default_value_t = AveragingArg::Micro)]
        averaging: AveragingArg,
    },
    /// List episodes that every listed agent fails.
    Filter {
        /// Comma-separated agent ids.
        #[arg(long, value_delimiter = ',', required = true)]
        agents: Vec<String>,
        /// Candidate file to write; standard output if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reviewer proposals and the human review API.
    #[command(subcommand)]
    Review(ReviewCommand),
    /// Apply decided proposals and write the curated dataset.
    Apply {
        /// Proposal store directory or a JSON-lines proposal file.
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ignore proposals still awaiting review instead of failing.
        #[arg(long)]
        skip_pending: bool,
    },
    /// Deficiency counts per cause.
    Stats {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        accepted_only: bool,
    },
    /// Compare metrics before and after curation.
    Diff {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        /// Original / curated-box / curated report instead of a plain diff.
        #[arg(long)]
        ladder: bool,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Draw an action-kind stratified batch of dataset steps.
    Sample {
        #[arg(long)]
        batch: Option<usize>,
        /// Target shares such as `click=0.5,type=0.3,scroll=0.2`.
        #[arg(long)]
        target: Option<String>,
    },
    /// Train the toy click policy and log every iteration.
    GrpoToy {
        #[arg(long, value_enum, default_value_t = RewardArg::Both)]
        reward: RewardArg,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReviewCommand {
    /// Ask the reviewer about each candidate and queue its proposals.
    Run {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Fixture of canned replies; the live HTTP reviewer is used otherwise.
        #[arg(long)]
        canned: Option<PathBuf>,
        #[arg(long, env = "REVIEWER_ENDPOINT")]
        endpoint: Option<String>,
        #[arg(long, env = "REVIEWER_MODEL")]
        model: Option<String>,
        /// Name of the environment variable holding the reviewer token.
        #[arg(long, env = "REVIEWER_TOKEN_VAR")]
        token_var: Option<String>,
        #[arg(long)]
        max_concurrent: Option<usize>,
        #[arg(long)]
        max_retries: Option<u32>,
        /// Request timeout in seconds.
        #[arg(long)]
        timeout: Option<f64>,
    },
    /// Serve the review HTTP API over a proposal store.
    Serve {
        #[arg(long)]
        store: PathBuf,
        /// Root that screenshot paths are resolved against; defaults to the dataset's directory.
        #[arg(long)]
        screenshots: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8787")]
        bind: String,
    },
}

/// A missing or contradictory input, reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .init();

    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("Run `forge --help` for usage.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
