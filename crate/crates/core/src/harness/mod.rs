//! Synthetic tasks, training and evaluation loops, and multi-plan comparisons.

mod compare;
mod task;
mod train;

pub use compare::{compare_configs, median, run_one, ComparisonRow, ComparisonTable};
pub use task::{
    encode, generate_task, overlap_coefficient, planted_label, read_jsonl, write_jsonl,
    DatasetRecord, Label, Task, TaskKind, TaskSpec, CLS, FIRST_CONTENT, MAX_SCORE,
    PAIR_THRESHOLD, PAD, SEP,
};
pub use train::{evaluate, predictions, train_run, RunResult};

use thiserror::Error;

use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::optim::OptimError;
use crate::plan::PlanError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("training diverged at step {step} (non-finite loss)")]
    Diverged { step: u64 },
    #[error("task error: {0}")]
    Task(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
