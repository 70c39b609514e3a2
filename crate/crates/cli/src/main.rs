//! `apdm`: command-line front end for the anti-personalization lab.
//!
//! Every subcommand reads an experiment config, runs one stage, and writes
//! its checkpoints, CSV ledgers and JSON reports into the config's output
//! directory. Exit codes: 0 success, 1 domain failure, 2 usage failure.

mod report;
mod run_dir;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use apdm_core::ApdmError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Domain(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

impl From<ApdmError> for Failure {
    fn from(e: ApdmError) -> Self {
        match e {
            ApdmError::Config(_) | ApdmError::Usage(_) | ApdmError::Index { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Domain(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "apdm", version, about = "Protect diffusion models against personalization (2-D lab)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct RunArgs {
    /// Experiment config (TOML); omitted keys take their defaults.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Mode {
    Naive,
    Dpo,
    L2p,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model on the prior class; writes pretrained.ckpt.
    Pretrain(RunArgs),
    /// Personalize a checkpoint to the subject; writes personalized.ckpt.
    Personalize {
        #[command(flatten)]
        run: RunArgs,
        /// Model to personalize [default: <output_dir>/pretrained.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Protect the pretrained model; writes protected.ckpt.
    Protect {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Model to protect, also the frozen reference [default: <output_dir>/pretrained.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Personalize a (protected) checkpoint as the attacker; writes attacked.ckpt.
    Attack {
        #[command(flatten)]
        run: RunArgs,
        /// [default: <output_dir>/protected.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Model the subject dataset was built from [default: <output_dir>/pretrained.ckpt].
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Score a checkpoint; writes eval-<name>.json.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// [default: <output_dir>/attacked.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// [default: <output_dir>/pretrained.ckpt]
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Gradient diagnostics of the personalization objective; writes diagnose.csv.
    Diagnose {
        #[command(flatten)]
        run: RunArgs,
        /// [default: <output_dir>/pretrained.ckpt]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// [default: <output_dir>/pretrained.ckpt]
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Independent draws, one CSV row each.
        #[arg(long, default_value_t = 100)]
        draws: usize,
        /// Step size of the first-order predictions.
        #[arg(long, default_value_t = 1e-3)]
        eta: f64,
    },
    /// Run a scored scenario end to end; writes scenario-<name>.json and appends to scenarios.csv.
    Scenario {
        #[command(flatten)]
        run: RunArgs,
        /// protect_attack/{none,naive,dpo_only,l2p}, naive_collapse, or
        /// robustness/{unseen_data_<k>,transform_flip,transform_noise,identifier_mismatch,other_subject}
        #[arg(long)]
        name: String,
        /// Reuse this pretrained checkpoint instead of pretraining.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Summarize every CSV ledger in the run directory; writes summary.csv and SVG plots.
    Report(RunArgs),
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pretrain(run) => stages::pretrain(&run),
        Command::Personalize { run, checkpoint } => stages::personalize_stage(&run, checkpoint),
        Command::Protect { run, mode, checkpoint } => stages::protect(&run, mode, checkpoint),
        Command::Attack { run, checkpoint, pretrained } => stages::attack(&run, checkpoint, pretrained),
        Command::Eval { run, checkpoint, pretrained } => stages::eval(&run, checkpoint, pretrained),
        Command::Diagnose {
            run,
            checkpoint,
            pretrained,
            draws,
            eta,
        } => stages::diagnose(&run, checkpoint, pretrained, draws, eta),
        Command::Scenario { run, name, pretrained } => stages::scenario(&run, &name, pretrained),
        Command::Report(run) => stages::report(&run),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
