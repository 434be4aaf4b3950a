//! Run manifests: one TOML file with `[model]`, `[plan]`, `[train]`, `[task]`
//! and `[output]` tables. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::CliError;
use crate::harness::TaskSpec;
use crate::model::ModelConfig;
use crate::optim::TrainConfig;
use crate::plan::PlanSpec;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelSection,
    #[serde(default)]
    pub plan: PlanSection,
    pub train: Option<TrainSection>,
    pub task: Option<TaskSpec>,
    pub output: Option<OutputSection>,
}

/// Either a `preset` with optional overrides, or every dimension spelled out.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    /// Seed of the random pre-trained stand-in.
    pub seed: u64,
    pub num_layers: Option<usize>,
    pub hidden: Option<usize>,
    pub num_heads: Option<usize>,
    pub ffn_size: Option<usize>,
    pub vocab_size: Option<usize>,
    pub max_positions: Option<usize>,
    pub type_vocab: Option<usize>,
    pub lora_rank: Option<usize>,
    pub lora_alpha: Option<usize>,
    pub dropout_p: Option<f64>,
    /// Defaults to what `[task]` needs.
    pub num_labels: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub spec: Option<String>,
    #[serde(default)]
    pub compare: Vec<String>,
}

/// Unset hyperparameters take the plan family's defaults.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    /// Seeds for `compare`; defaults to `[seed]`.
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Relative paths resolve against the manifest's directory.
    pub dir: PathBuf,
}

/// Command-line values that take precedence over the manifest.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub spec: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
}

pub fn preset(name: &str) -> Result<ModelConfig, CliError> {
    match name.to_ascii_lowercase().replace('_', "-").as_str() {
        "toy" => Ok(ModelConfig::toy()),
        "bert-large" | "bert-large-cased" => Ok(ModelConfig::bert_large()),
        other => Err(CliError::Usage(format!(
            "unknown model preset `{other}` (expected toy or bert-large)"
        ))),
    }
}

fn need<T: Copy>(v: Option<T>, base: Option<T>, key: &str) -> Result<T, CliError> {
    v.or(base).ok_or_else(|| {
        CliError::Usage(format!("[model] {key} is required when no preset is given"))
    })
}

impl Manifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let m: Manifest = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let m = &self.model;
        let base = m.preset.as_deref().map(preset).transpose()?;
        let b = base.as_ref();
        let num_labels = match (m.num_labels, &self.task) {
            (Some(n), _) => n,
            (None, Some(t)) => t.head_labels(),
            (None, None) => need(None, b.map(|c| c.num_labels), "num_labels")?,
        };
        let cfg = ModelConfig {
            num_layers: need(m.num_layers, b.map(|c| c.num_layers), "num_layers")?,
            hidden: need(m.hidden, b.map(|c| c.hidden), "hidden")?,
            num_heads: need(m.num_heads, b.map(|c| c.num_heads), "num_heads")?,
            ffn_size: need(m.ffn_size, b.map(|c| c.ffn_size), "ffn_size")?,
            vocab_size: need(m.vocab_size, b.map(|c| c.vocab_size), "vocab_size")?,
            max_positions: need(m.max_positions, b.map(|c| c.max_positions), "max_positions")?,
            type_vocab: need(m.type_vocab, b.map(|c| c.type_vocab), "type_vocab")?,
            lora_rank: need(m.lora_rank, b.map(|c| c.lora_rank), "lora_rank")?,
            lora_alpha: need(m.lora_alpha, b.map(|c| c.lora_alpha), "lora_alpha")?,
            dropout_p: need(m.dropout_p, b.map(|c| c.dropout_p), "dropout_p")?,
            num_labels,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn plan_spec(&self, ov: &Overrides) -> Result<PlanSpec, CliError> {
        let s = ov
            .spec
            .as_deref()
            .or(self.plan.spec.as_deref())
            .ok_or_else(|| CliError::Usage("no plan spec (set [plan] spec or --spec)".into()))?;
        parse_spec(s)
    }

    pub fn compare_specs(&self, ov: &Overrides) -> Result<Vec<PlanSpec>, CliError> {
        if let Some(s) = &ov.spec {
            return s.split(';').map(parse_spec).collect();
        }
        if self.plan.compare.is_empty() {
            return Err(CliError::Usage("[plan] compare lists no specs".into()));
        }
        self.plan.compare.iter().map(|s| parse_spec(s)).collect()
    }

    pub fn train_config(&self, spec: &PlanSpec, ov: &Overrides) -> Result<TrainConfig, CliError> {
        let t = self
            .train
            .as_ref()
            .ok_or_else(|| CliError::Usage("manifest has no [train] section".into()))?;
        let d = TrainConfig::defaults_for(spec, t.seed);
        let cfg = TrainConfig {
            learning_rate: ov.lr.or(t.learning_rate).unwrap_or(d.learning_rate),
            batch_size: ov.batch.or(t.batch_size).unwrap_or(d.batch_size),
            epochs: ov.epochs.or(t.epochs).unwrap_or(d.epochs),
            weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
            beta1: t.beta1.unwrap_or(d.beta1),
            beta2: t.beta2.unwrap_or(d.beta2),
            eps: t.eps.unwrap_or(d.eps),
            seed: ov.seed.unwrap_or(t.seed),
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn seeds(&self, ov: &Overrides) -> Result<Vec<u64>, CliError> {
        let t = self
            .train
            .as_ref()
            .ok_or_else(|| CliError::Usage("manifest has no [train] section".into()))?;
        Ok(match (ov.seed, &t.seeds) {
            (Some(s), _) => vec![s],
            (None, Some(v)) if !v.is_empty() => v.clone(),
            _ => vec![t.seed],
        })
    }

    pub fn task(&self) -> Result<&TaskSpec, CliError> {
        let t = self
            .task
            .as_ref()
            .ok_or_else(|| CliError::Usage("manifest has no [task] section".into()))?;
        t.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(t)
    }

    /// `--out`, else `[output] dir` resolved against `base`.
    pub fn output_dir(&self, base: &Path, ov: &Overrides) -> Result<PathBuf, CliError> {
        if let Some(o) = &ov.out {
            return Ok(o.clone());
        }
        let dir = &self
            .output
            .as_ref()
            .ok_or_else(|| CliError::Usage("no output directory (set [output] dir or --out)".into()))?
            .dir;
        Ok(if dir.is_absolute() {
            dir.clone()
        } else {
            base.join(dir)
        })
    }
}

pub fn parse_spec(s: &str) -> Result<PlanSpec, CliError> {
    s.trim()
        .parse()
        .map_err(|e: crate::plan::PlanError| CliError::Usage(e.to_string()))
}
