//! `progfuse` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage/contract/parse/config error, 2 numeric failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable capping the number of worker threads.
pub const LANES_VAR: &str = "PROGFUSE_LANES";

#[derive(Debug, Parser)]
#[command(
    name = "progfuse",
    version,
    about = "Synthetic cohorts, training, evaluation and ablations for region-level imaging/EHR fusion",
    after_help = "Environment:\n  PROGFUSE_LANES  maximum number of worker threads (default: all cores)"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML), or `micro` for the builtin gradient-check preset
    #[arg(long)]
    pub config: String,
    /// Replace the config's seed list with this single seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config's task (mortality, los, progression)
    #[arg(long)]
    pub task: Option<String>,
    /// Override the config's variant (full, A1-A4, B1-B3)
    #[arg(long)]
    pub ablation: Option<String>,
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Run directory; created if missing [default: runs/<verb>-<timestamp>]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CohortArg {
    /// Episode file to use instead of generating the config's cohort
    #[arg(long)]
    pub cohort: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Generate a synthetic cohort, its oracle sidecar and a manifest
    Synth {
        /// Experiment config whose [cohort] section is used
        #[arg(long)]
        config: String,
        #[command(flatten)]
        out: OutArg,
        /// Override the cohort seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every configured seed; writes checkpoints, histories and test metrics
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        cohort: CohortArg,
    },
    /// Evaluate a saved checkpoint (read only) on a cohort
    Eval {
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Episodes to evaluate [default: the checkpoint's held-out test split]
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Compare analytic and central-difference gradients of the full training loss
    Gradcheck {
        /// Experiment config, or `micro` for the builtin preset
        #[arg(long, default_value = "micro")]
        config: String,
        /// Check only this seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's task
        #[arg(long)]
        task: Option<String>,
        /// Override the config's variant
        #[arg(long)]
        ablation: Option<String>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train and test each ablation variant over the configured seeds
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        cohort: CohortArg,
        /// Run all eight variants (full, A1-A4, B1-B3)
        #[arg(long, conflicts_with = "ablation")]
        all: bool,
    },
    /// Exhaustive hyperparameter sweep over the config's [grid] section
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        cohort: CohortArg,
    },
    /// Train at each missing-EHR rate and tabulate rate against metric
    Robustness {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        cohort: CohortArg,
        /// Comma-separated drop rates in [0, 1]
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75")]
        rates: Vec<f64>,
    },
    /// Export mean normalized region attention of a checkpoint
    AttnExport {
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Episodes to average over [default: the checkpoint's held-out test split]
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Core(progfuse::Error),
    Usage(String),
    GradCheck(f64),
}

impl From<progfuse::Error> for CliError {
    fn from(e: progfuse::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => 2,
            CliError::GradCheck(_) => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => f.write_str(m),
            CliError::GradCheck(e) => write!(f, "gradient check failed: max relative error {e:.3e} >= 1e-4"),
        }
    }
}

fn init_lanes() -> Result<(), CliError> {
    let Ok(v) = std::env::var(LANES_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("{LANES_VAR} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}

fn dispatch(verb: Verb) -> Result<(), CliError> {
    use commands as c;
    match verb {
        Verb::Synth { config, out, seed } => c::synth(&config, out.out, seed),
        Verb::Train { config, out, cohort } => c::train(&config, out.out, cohort.cohort),
        Verb::Eval { checkpoint, out, cohort } => c::eval(&checkpoint, out.out, cohort),
        Verb::Gradcheck {
            config,
            seed,
            task,
            ablation,
            out,
        } => c::gradcheck(
            &ConfigArgs {
                config,
                seed,
                task,
                ablation,
            },
            out.out,
        ),
        Verb::Ablate {
            config,
            out,
            cohort,
            all,
        } => c::ablate(&config, out.out, cohort.cohort, all),
        Verb::Sweep { config, out, cohort } => c::sweep(&config, out.out, cohort.cohort),
        Verb::Robustness {
            config,
            out,
            cohort,
            rates,
        } => c::robustness(&config, out.out, cohort.cohort, rates),
        Verb::AttnExport { checkpoint, out, cohort } => c::attn_export(&checkpoint, out.out, cohort),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match init_lanes().and_then(|_| dispatch(cli.verb)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
