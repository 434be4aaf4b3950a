//! Fine-tuning plans: spec parsing, per-parameter compilation, LoRA factors,
//! trainable-count audits and task adapters.

mod adapter;
mod audit;
mod compile;
mod lora;
mod spec;

pub use adapter::{export_adapter, swap_adapter};
pub use audit::{
    count_trainable, enumerate_trainable, millions, published_millions, PUBLISHED_MILLIONS,
};
pub use compile::{compile_plan, FinetunePlan, LayerGroup};
pub use lora::{attach_lora, lora_delta, merge_lora, LoraPair};
pub use spec::{Group3Mode, PlanSpec};

use thiserror::Error;

use crate::model::CheckpointError;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("malformed plan spec `{0}` (expected full-ft | bitfit | lora-i | lora-ii | spafit:N1=<int>,N2=<int>,mode=I|II)")]
    Syntax(String),
    #[error("invalid stratification N1={n1}, N2={n2} for {layers} layers (need 0 <= N1 <= N2 <= L)")]
    Bounds { n1: usize, n2: usize, layers: usize },
    #[error("plan target error: {0}")]
    Target(String),
    #[error("no LoRA pairs attached")]
    NoLoraPairs,
    #[error("incompatible adapter or plan: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
