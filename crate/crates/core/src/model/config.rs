use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture dimensions plus LoRA hyperparameters.
///
/// `num_labels == 1` selects a regression head; anything larger is a
/// classification head with that many logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub type_vocab: usize,
    pub lora_rank: usize,
    pub lora_alpha: usize,
    pub dropout_p: f64,
    pub num_labels: usize,
}

/// The sub-layer tensors of one encoder layer, relative to `encoder.layer.{i}.`.
pub const LAYER_PARAMS: [&str; 16] = [
    "attention.self.query.weight",
    "attention.self.query.bias",
    "attention.self.key.weight",
    "attention.self.key.bias",
    "attention.self.value.weight",
    "attention.self.value.bias",
    "attention.output.dense.weight",
    "attention.output.dense.bias",
    "attention.output.LayerNorm.weight",
    "attention.output.LayerNorm.bias",
    "intermediate.dense.weight",
    "intermediate.dense.bias",
    "output.dense.weight",
    "output.dense.bias",
    "output.LayerNorm.weight",
    "output.LayerNorm.bias",
];

pub const LAYER_NORM_EPS: f64 = 1e-12;

pub fn layer_path(layer: usize, rest: &str) -> String {
    format!("encoder.layer.{layer}.{rest}")
}

/// Split `encoder.layer.{i}.{rest}` into `(i, rest)`.
pub fn parse_layer_path(path: &str) -> Option<(usize, &str)> {
    let tail = path.strip_prefix("encoder.layer.")?;
    let (idx, rest) = tail.split_once('.')?;
    Some((idx.parse().ok()?, rest))
}

impl ModelConfig {
    /// BERT-large-cased dimensions with r = 64, α = 128.
    pub fn bert_large() -> Self {
        ModelConfig {
            num_layers: 24,
            hidden: 1024,
            num_heads: 16,
            ffn_size: 4096,
            vocab_size: 28996,
            max_positions: 512,
            type_vocab: 2,
            lora_rank: 64,
            lora_alpha: 128,
            dropout_p: 0.1,
            num_labels: 2,
        }
    }

    /// Desk-scale encoder used by tests and the demo manifests.
    pub fn toy() -> Self {
        ModelConfig {
            num_layers: 4,
            hidden: 32,
            num_heads: 4,
            ffn_size: 64,
            vocab_size: 64,
            max_positions: 32,
            type_vocab: 2,
            lora_rank: 8,
            lora_alpha: 16,
            dropout_p: 0.1,
            num_labels: 2,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("hidden", self.hidden),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("type_vocab", self.type_vocab),
            ("lora_rank", self.lora_rank),
            ("lora_alpha", self.lora_alpha),
            ("num_labels", self.num_labels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(ModelError::Config(format!(
                "hidden {} is not divisible by num_heads {}",
                self.hidden, self.num_heads
            )));
        }
        if self.lora_rank > self.hidden.min(self.ffn_size) {
            return Err(ModelError::Config(format!(
                "lora_rank {} exceeds min(hidden, ffn_size)",
                self.lora_rank
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha as f64 / self.lora_rank as f64
    }

    pub fn is_regression(&self) -> bool {
        self.num_labels == 1
    }

    /// Shapes of the sub-layer tensors of one encoder layer, in `LAYER_PARAMS` order.
    pub fn layer_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (d, f) = (self.hidden, self.ffn_size);
        LAYER_PARAMS
            .iter()
            .map(|&rest| {
                let shape = match rest {
                    "intermediate.dense.weight" => vec![f, d],
                    "intermediate.dense.bias" => vec![f],
                    "output.dense.weight" => vec![d, f],
                    r if r.ends_with(".weight") && !r.contains("LayerNorm") => vec![d, d],
                    _ => vec![d],
                };
                (rest, shape)
            })
            .collect()
    }

    /// Every parameter path with its shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden;
        let mut out = vec![
            (
                "embeddings.word_embeddings.weight".to_string(),
                vec![self.vocab_size, d],
            ),
            (
                "embeddings.position_embeddings.weight".to_string(),
                vec![self.max_positions, d],
            ),
            (
                "embeddings.token_type_embeddings.weight".to_string(),
                vec![self.type_vocab, d],
            ),
            ("embeddings.LayerNorm.weight".to_string(), vec![d]),
            ("embeddings.LayerNorm.bias".to_string(), vec![d]),
        ];
        let layer = self.layer_shapes();
        for i in 1..=self.num_layers {
            for (rest, shape) in &layer {
                out.push((layer_path(i, rest), shape.clone()));
            }
        }
        out.push(("pooler.dense.weight".to_string(), vec![d, d]));
        out.push(("pooler.dense.bias".to_string(), vec![d]));
        out.push(("classifier.weight".to_string(), vec![self.num_labels, d]));
        out.push(("classifier.bias".to_string(), vec![self.num_labels]));
        out
    }

    pub fn embedding_param_count(&self) -> u64 {
        let d = self.hidden as u64;
        (self.vocab_size + self.max_positions + self.type_vocab) as u64 * d + 2 * d
    }

    pub fn layer_param_count(&self) -> u64 {
        let (d, f) = (self.hidden as u64, self.ffn_size as u64);
        4 * (d * d + d) + 2 * d + (f * d + f) + (d * f + d) + 2 * d
    }

    pub fn pooler_param_count(&self) -> u64 {
        let d = self.hidden as u64;
        d * d + d
    }

    pub fn classifier_param_count(&self) -> u64 {
        let (d, c) = (self.hidden as u64, self.num_labels as u64);
        c * d + c
    }

    /// Closed-form parameter total, optionally including the task head.
    pub fn param_count(&self, include_head: bool) -> u64 {
        let base = self.embedding_param_count()
            + self.num_layers as u64 * self.layer_param_count()
            + self.pooler_param_count();
        if include_head {
            base + self.classifier_param_count()
        } else {
            base
        }
    }
}
