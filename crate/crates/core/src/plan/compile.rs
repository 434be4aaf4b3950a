use indexmap::IndexMap;

use super::{Group3Mode, PlanError, PlanSpec};
use crate::model::{layer_path, parse_layer_path, ModelConfig, ParamStatus};

/// Layer stratum under a stratified plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerGroup {
    /// Frozen.
    Frozen,
    /// Bias-only.
    BiasOnly,
    /// LoRA plus intermediate/output bias tuning.
    Adapted,
}

/// Compiled per-parameter status assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetunePlan {
    pub spec: PlanSpec,
    pub config: ModelConfig,
    pub assignments: IndexMap<String, ParamStatus>,
    pub lora_targets: Vec<String>,
}

const QKV: [&str; 3] = [
    "attention.self.query.weight",
    "attention.self.key.weight",
    "attention.self.value.weight",
];
const ATTN_OUT: &str = "attention.output.dense.weight";
const GROUP3_BIASES: [&str; 3] = [
    "intermediate.dense.bias",
    "output.dense.bias",
    "output.LayerNorm.bias",
];

impl PlanSpec {
    /// Check `0 ≤ N1 ≤ N2 ≤ L` for stratified plans.
    pub fn validate(&self, num_layers: usize) -> Result<(), PlanError> {
        if let PlanSpec::Spafit { n1, n2, .. } = *self {
            if n1 > n2 || n2 > num_layers {
                return Err(PlanError::Bounds {
                    n1,
                    n2,
                    layers: num_layers,
                });
            }
        }
        Ok(())
    }

    /// Group of 1-based `layer`; `None` for non-stratified plans.
    pub fn group_of(&self, layer: usize) -> Option<LayerGroup> {
        match *self {
            PlanSpec::Spafit { n1, n2, .. } => Some(if layer <= n1 {
                LayerGroup::Frozen
            } else if layer <= n2 {
                LayerGroup::BiasOnly
            } else {
                LayerGroup::Adapted
            }),
            _ => None,
        }
    }

    fn lora_on(&self, layer: usize, rest: &str) -> bool {
        let qkv = QKV.contains(&rest);
        let attn_out = rest == ATTN_OUT;
        match self {
            PlanSpec::FullLoraI => qkv,
            PlanSpec::FullLoraII => qkv || attn_out,
            PlanSpec::Spafit { mode, .. } => {
                self.group_of(layer) == Some(LayerGroup::Adapted)
                    && (qkv || (attn_out && *mode == Group3Mode::FtII))
            }
            _ => false,
        }
    }

    fn layer_status(&self, layer: usize, rest: &str) -> ParamStatus {
        if self.lora_on(layer, rest) {
            return ParamStatus::LoraAugmented;
        }
        let is_bias = rest.ends_with(".bias");
        match self {
            PlanSpec::FullFt => ParamStatus::Trainable,
            PlanSpec::FullBitFit if is_bias => ParamStatus::BiasTunable,
            PlanSpec::Spafit { .. } => match self.group_of(layer) {
                Some(LayerGroup::BiasOnly) if is_bias => ParamStatus::BiasTunable,
                Some(LayerGroup::Adapted) if GROUP3_BIASES.contains(&rest) => {
                    ParamStatus::BiasTunable
                }
                _ => ParamStatus::Frozen,
            },
            _ => ParamStatus::Frozen,
        }
    }

    /// Status of any canonical parameter path.
    pub fn status_of(&self, path: &str) -> ParamStatus {
        if let Some((layer, rest)) = parse_layer_path(path) {
            return self.layer_status(layer, rest);
        }
        if path.starts_with("pooler.") || path.starts_with("classifier.") {
            return ParamStatus::Trainable;
        }
        if self.is_full_ft() {
            ParamStatus::Trainable
        } else {
            ParamStatus::Frozen
        }
    }
}

/// Assign every parameter path of `config` exactly one status.
pub fn compile_plan(spec: &PlanSpec, config: &ModelConfig) -> Result<FinetunePlan, PlanError> {
    spec.validate(config.num_layers)?;
    let mut assignments = IndexMap::new();
    let mut lora_targets = Vec::new();
    for (path, _) in config.param_shapes() {
        let status = spec.status_of(&path);
        if status == ParamStatus::LoraAugmented {
            lora_targets.push(path.clone());
        }
        if assignments.insert(path.clone(), status).is_some() {
            return Err(PlanError::Target(format!("duplicate path {path}")));
        }
    }
    Ok(FinetunePlan {
        spec: *spec,
        config: config.clone(),
        assignments,
        lora_targets,
    })
}

impl FinetunePlan {
    pub fn status(&self, path: &str) -> Option<ParamStatus> {
        self.assignments.get(path).copied()
    }

    /// Status counts per encoder layer: `(frozen, bias, lora, trainable)`.
    pub fn layer_summary(&self, layer: usize) -> [usize; 4] {
        let mut counts = [0; 4];
        for rest in crate::model::LAYER_PARAMS {
            let idx = match self.assignments[&layer_path(layer, rest)] {
                ParamStatus::Frozen => 0,
                ParamStatus::BiasTunable => 1,
                ParamStatus::LoraAugmented => 2,
                ParamStatus::Trainable => 3,
            };
            counts[idx] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spafit(n1: usize, n2: usize, mode: Group3Mode) -> PlanSpec {
        PlanSpec::Spafit { n1, n2, mode }
    }

    #[test]
    fn spafit_8_12_ii_on_bert_large() {
        let cfg = ModelConfig::bert_large();
        let plan = compile_plan(&spafit(8, 12, Group3Mode::FtII), &cfg).unwrap();
        for rest in crate::model::LAYER_PARAMS {
            assert_eq!(plan.status(&layer_path(5, rest)), Some(ParamStatus::Frozen), "{rest}");
            let l10 = plan.status(&layer_path(10, rest)).unwrap();
            if rest.ends_with(".bias") {
                assert_eq!(l10, ParamStatus::BiasTunable, "{rest}");
            } else {
                assert_eq!(l10, ParamStatus::Frozen, "{rest}");
            }
            let l20 = plan.status(&layer_path(20, rest)).unwrap();
            let expected = if QKV.contains(&rest) || rest == ATTN_OUT {
                ParamStatus::LoraAugmented
            } else if GROUP3_BIASES.contains(&rest) {
                ParamStatus::BiasTunable
            } else {
                ParamStatus::Frozen
            };
            assert_eq!(l20, expected, "{rest}");
        }
        assert_eq!(plan.lora_targets.len(), 12 * 4);
    }

    #[test]
    fn totality_and_head_policy() {
        let cfg = ModelConfig::toy();
        for spec in [
            PlanSpec::FullFt,
            PlanSpec::FullBitFit,
            PlanSpec::FullLoraI,
            PlanSpec::FullLoraII,
            spafit(1, 3, Group3Mode::FtI),
        ] {
            let plan = compile_plan(&spec, &cfg).unwrap();
            assert_eq!(plan.assignments.len(), cfg.param_shapes().len());
            for name in ["pooler.dense.weight", "classifier.bias"] {
                assert_eq!(plan.status(name), Some(ParamStatus::Trainable));
            }
            let emb = plan.status("embeddings.word_embeddings.weight").unwrap();
            assert_eq!(emb == ParamStatus::Trainable, spec == PlanSpec::FullFt);
        }
    }

    #[test]
    fn status_kinds_respect_tensor_rank() {
        let cfg = ModelConfig::toy();
        let shapes: IndexMap<String, Vec<usize>> = cfg.param_shapes().into_iter().collect();
        for spec in [
            PlanSpec::FullBitFit,
            PlanSpec::FullLoraII,
            spafit(0, 2, Group3Mode::FtII),
        ] {
            let plan = compile_plan(&spec, &cfg).unwrap();
            for (path, status) in &plan.assignments {
                match status {
                    ParamStatus::LoraAugmented => assert_eq!(shapes[path].len(), 2),
                    ParamStatus::BiasTunable => assert_eq!(shapes[path].len(), 1),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn degenerate_stratifications() {
        let cfg = ModelConfig::toy();
        let l = cfg.num_layers;
        let probe = compile_plan(&spafit(l, l, Group3Mode::FtII), &cfg).unwrap();
        for i in 1..=l {
            assert_eq!(probe.layer_summary(i), [16, 0, 0, 0]);
        }
        let all_g3 = compile_plan(&spafit(0, 0, Group3Mode::FtII), &cfg).unwrap();
        let lora2 = compile_plan(&PlanSpec::FullLoraII, &cfg).unwrap();
        assert_eq!(all_g3.lora_targets, lora2.lora_targets);
    }

    #[test]
    fn bounds_errors() {
        let cfg = ModelConfig::toy();
        assert!(matches!(
            compile_plan(&spafit(3, 2, Group3Mode::FtI), &cfg),
            Err(PlanError::Bounds { .. })
        ));
        assert!(matches!(
            compile_plan(&spafit(1, 5, Group3Mode::FtI), &cfg),
            Err(PlanError::Bounds { .. })
        ));
    }
}
