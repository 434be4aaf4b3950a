//! Command-line front end. Data goes to stdout, diagnostics to stderr.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage or spec error,
//! 3 incompatible adapter, 4 training divergence, 5 I/O failure.

mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::harness::HarnessError;
use crate::model::{CheckpointError, ModelError};
use crate::optim::OptimError;
use crate::plan::PlanError;

pub use manifest::{Manifest, Overrides};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INCOMPATIBLE: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("incompatible adapter: {0}")]
    Incompatible(String),
    #[error("{0}")]
    Diverged(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Incompatible(_) => EXIT_INCOMPATIBLE,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Io(_) => EXIT_IO,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => io.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::Syntax(_) | PlanError::Bounds { .. } => CliError::Usage(e.to_string()),
            PlanError::Incompatible(m) => CliError::Incompatible(m),
            PlanError::Checkpoint(c) => c.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Diverged { .. } => CliError::Diverged(e.to_string()),
            HarnessError::Task(_) | HarnessError::Optim(OptimError::Config(_)) => {
                CliError::Usage(e.to_string())
            }
            HarnessError::Io(io) => io.into(),
            HarnessError::Plan(p) => p.into(),
            HarnessError::Model(m) => m.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

const DEFAULTS: &str = "\
Every run is described by a TOML manifest with [model], [plan], [train],
[task] and [output] tables; unknown keys are rejected and [model] seed and
[train] seed are mandatory. Flags override the manifest.

Plan specs: full-ft | bitfit | lora-i | lora-ii | spafit:N1=<int>,N2=<int>,mode=I|II

Defaults for unset [train] values: learning_rate 6e-5 (2e-5 for full-ft),
batch_size 16, epochs 10, weight_decay 0.01, beta1 0.9, beta2 0.999, eps 1e-8.
plan and audit run without a manifest against --preset (default bert-large).

Exit codes: 0 ok, 1 other failure, 2 usage or spec error,
3 incompatible adapter, 4 training diverged, 5 I/O failure.";

#[derive(Debug, Parser)]
#[command(name = "spafit", version, about = "Layer-stratified parameter-efficient fine-tuning engine", long_about = None, after_long_help = DEFAULTS)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Run manifest (TOML).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Plan spec; `compare` and `audit` accept several separated by `;`.
    #[arg(long, global = true)]
    pub spec: Option<String>,
    /// Training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Learning rate
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Batch size
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Number of epochs
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            spec: self.spec.clone(),
            seed: self.seed,
            out: self.out.clone(),
            lr: self.lr,
            batch: self.batch,
            epochs: self.epochs,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Show the compiled per-layer plan.
    Plan {
        /// Model preset when no manifest is given.
        #[arg(long, default_value = "bert-large")]
        preset: String,
    },
    /// Report trainable-parameter counts against the published table.
    Audit {
        #[arg(long, default_value = "bert-large")]
        preset: String,
        /// Count the pooler and classifier head too.
        #[arg(long)]
        include_head: bool,
    },
    /// Train one plan; writes model.ckpt, adapter.spfa and run.json.
    Train,
    /// Score a checkpoint on the manifest's validation split.
    Eval {
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every `[plan] compare` spec under every seed; prints CSV.
    Compare,
    /// Write the trainable tensors of a checkpoint as an adapter.
    ExportAdapter {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `<out>/adapter.spfa`.
        #[arg(long)]
        adapter: Option<PathBuf>,
    },
    /// Load an adapter into a checkpoint.
    SwapAdapter {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        adapter: PathBuf,
        /// Where to write the swapped checkpoint.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Write the manifest's task as train.jsonl and val.jsonl.
    GenData,
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match commands::dispatch(&cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
