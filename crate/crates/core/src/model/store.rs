use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::plan::{LoraPair, PlanSpec};
use crate::tensor::Tensor;

/// Fine-tuning status of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamStatus {
    Frozen,
    BiasTunable,
    LoraAugmented,
    /// Fully tuned (full fine-tuning, pooler and task head).
    Trainable,
}

impl ParamStatus {
    /// Whether the tensor itself receives optimizer updates.
    pub fn updates_tensor(self) -> bool {
        matches!(self, ParamStatus::BiasTunable | ParamStatus::Trainable)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub status: ParamStatus,
}

/// Named parameters addressed by dotted path, plus any attached LoRA pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    config: ModelConfig,
    params: IndexMap<String, Param>,
    lora: IndexMap<String, LoraPair>,
    plan: Option<PlanSpec>,
}

pub(crate) const INIT_STD: f64 = 0.02;

/// Truncated normal draw (resampled outside ±2σ).
pub(crate) fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Seeded stand-in for pre-trained weights: truncated normal (std 0.02)
/// weights, unit LayerNorm gains, zero biases.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ParamStore, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = IndexMap::new();
    for (name, shape) in config.param_shapes() {
        let tensor = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else if name.contains("LayerNorm") {
            Tensor::full(&shape, 1.0)
        } else {
            let n = shape.iter().product();
            let data = (0..n).map(|_| truncated_normal(&mut rng, INIT_STD)).collect();
            Tensor::new(shape, data)?
        };
        params.insert(
            name,
            Param {
                tensor,
                status: ParamStatus::Trainable,
            },
        );
    }
    Ok(ParamStore {
        config: config.clone(),
        params,
        lora: IndexMap::new(),
        plan: None,
    })
}

impl ParamStore {
    pub(crate) fn from_parts(
        config: ModelConfig,
        params: IndexMap<String, Param>,
        lora: IndexMap<String, LoraPair>,
        plan: Option<PlanSpec>,
    ) -> Self {
        ParamStore {
            config,
            params,
            lora,
            plan,
        }
    }

    /// Same backbone and pooler with a freshly initialized `num_labels`-way
    /// classifier. Every status resets to trainable and no plan is attached.
    /// LoRA pairs must be merged first.
    pub fn with_head(&self, num_labels: usize, seed: u64) -> Result<ParamStore, ModelError> {
        if !self.lora.is_empty() {
            return Err(ModelError::Config(
                "merge LoRA pairs before replacing the head".into(),
            ));
        }
        let config = ModelConfig {
            num_labels,
            ..self.config.clone()
        };
        let mut fresh = build_model(&config, seed)?;
        for (name, p) in fresh.params.iter_mut() {
            if !name.starts_with("classifier.") {
                p.tensor = self.params[name].tensor.clone();
                p.tensor.grad = None;
            }
        }
        Ok(fresh)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Plan applied by the last `attach_lora`, if any.
    pub fn plan(&self) -> Option<&PlanSpec> {
        self.plan.as_ref()
    }

    pub(crate) fn set_plan(&mut self, plan: Option<PlanSpec>) {
        self.plan = plan;
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn lora_pairs(&self) -> impl Iterator<Item = (&str, &LoraPair)> {
        self.lora.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn lora_pair(&self, target: &str) -> Option<&LoraPair> {
        self.lora.get(target)
    }

    pub(crate) fn lora_map_mut(&mut self) -> &mut IndexMap<String, LoraPair> {
        &mut self.lora
    }

    /// Total scalar count of base tensors (LoRA factors excluded).
    pub fn numel(&self) -> u64 {
        self.params.values().map(|p| p.tensor.numel() as u64).sum()
    }

    /// Names of every tensor that the optimizer updates, in canonical order:
    /// tunable base tensors first, then LoRA factors (`<module>.lora_A`, `<module>.lora_B`).
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .params
            .iter()
            .filter(|(_, p)| p.status.updates_tensor())
            .map(|(k, _)| k.clone())
            .collect();
        for pair in self.lora.values() {
            out.push(pair.a_name());
            out.push(pair.b_name());
        }
        out
    }

    /// Resolve a base path or a LoRA factor name.
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        if let Some(p) = self.params.get(name) {
            return Some(&p.tensor);
        }
        let (target, is_a) = LoraPair::parse_factor_name(name)?;
        let pair = self.lora.get(&target)?;
        Some(if is_a { &pair.a } else { &pair.b })
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(p) = self.params.get_mut(name) {
            return Some(&mut p.tensor);
        }
        let (target, is_a) = LoraPair::parse_factor_name(name)?;
        let pair = self.lora.get_mut(&target)?;
        Some(if is_a { &mut pair.a } else { &mut pair.b })
    }

    /// Whether `name` (base path or LoRA factor) is updated by training.
    pub fn is_trainable(&self, name: &str) -> bool {
        match self.params.get(name) {
            Some(p) => p.status.updates_tensor(),
            None => LoraPair::parse_factor_name(name)
                .is_some_and(|(t, _)| self.lora.contains_key(&t)),
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.grad = None;
        }
        for pair in self.lora.values_mut() {
            pair.a.grad = None;
            pair.b.grad = None;
        }
    }
}
