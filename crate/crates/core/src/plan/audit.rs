//! Trainable-parameter accounting.
//!
//! With `include_head == false` the task classifier is never counted, and the
//! pooler is counted only when the plan tunes it on its own terms (full
//! fine-tuning). Under PEFT plans the pooler is trainable solely because the
//! head is always tuned, so it belongs to the head in this accounting.

use super::{FinetunePlan, Group3Mode, PlanSpec};
use crate::model::ParamStatus;

/// Closed-form trainable count. LoRA targets contribute `r·(out + in)`.
pub fn count_trainable(plan: &FinetunePlan, include_head: bool) -> u64 {
    let c = &plan.config;
    let (d, f, r) = (c.hidden as u64, c.ffn_size as u64, c.lora_rank as u64);
    let layers = c.num_layers as u64;
    let lora_square = r * (d + d);
    let layer_biases = 7 * d + f;
    let adapted_biases = f + 2 * d;
    let head = if include_head {
        c.pooler_param_count() + c.classifier_param_count()
    } else {
        0
    };
    match plan.spec {
        PlanSpec::FullFt => {
            let backbone = c.param_count(false);
            if include_head {
                backbone + c.classifier_param_count()
            } else {
                backbone
            }
        }
        PlanSpec::FullBitFit => layers * layer_biases + head,
        PlanSpec::FullLoraI => layers * 3 * lora_square + head,
        PlanSpec::FullLoraII => layers * 4 * lora_square + head,
        PlanSpec::Spafit { n1, n2, mode } => {
            let g2 = (n2 - n1) as u64;
            let g3 = (c.num_layers - n2) as u64;
            let targets = match mode {
                Group3Mode::FtI => 3,
                Group3Mode::FtII => 4,
            };
            g2 * layer_biases + g3 * (targets * lora_square + adapted_biases) + head
        }
    }
}

fn counted(plan: &FinetunePlan, path: &str, include_head: bool) -> bool {
    if include_head {
        return true;
    }
    if path.starts_with("classifier.") {
        return false;
    }
    !(path.starts_with("pooler.") && !plan.spec.is_full_ft())
}

/// Brute-force count by walking the assignment map.
pub fn enumerate_trainable(plan: &FinetunePlan, include_head: bool) -> u64 {
    let r = plan.config.lora_rank as u64;
    plan.config
        .param_shapes()
        .into_iter()
        .filter(|(path, _)| counted(plan, path, include_head))
        .map(|(path, shape)| match plan.assignments[&path] {
            ParamStatus::Frozen => 0,
            ParamStatus::BiasTunable | ParamStatus::Trainable => {
                shape.iter().product::<usize>() as u64
            }
            ParamStatus::LoraAugmented => r * shape.iter().sum::<usize>() as u64,
        })
        .sum()
}

/// Published "Params (M)" values for BERT-large-cased, keyed by plan label.
pub const PUBLISHED_MILLIONS: [(&str, f64); 10] = [
    ("Full Fine-tuning", 333.58),
    ("Full BitFit", 31.52),
    ("Full LoRA-I", 9.44),
    ("Full LoRA-II", 12.59),
    ("SPAFIT-8-12-I", 4.44),
    ("SPAFIT-8-12-II", 5.88),
    ("SPAFIT-8-16-II", 3.81),
    ("SPAFIT-4-9-I", 5.65),
    ("SPAFIT-4-9-II", 7.49),
    ("SPAFIT-4-14-II", 4.89),
];

pub fn published_millions(spec: &PlanSpec) -> Option<f64> {
    let label = spec.label();
    PUBLISHED_MILLIONS
        .iter()
        .find(|(l, _)| *l == label)
        .map(|&(_, v)| v)
}

/// Count in millions rounded to two decimals, as in the published table.
pub fn millions(count: u64) -> f64 {
    (count as f64 / 1e4).round() / 100.0
}
