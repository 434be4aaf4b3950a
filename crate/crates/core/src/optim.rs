//! AdamW over the tensors a plan trains.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ParamStore;
use crate::plan::PlanSpec;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("trainable tensor {0} has no gradient")]
    MissingGradient(String),
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Zero is allowed and skips training entirely.
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

pub const PEFT_LR: f64 = 6e-5;
pub const FULL_FT_LR: f64 = 2e-5;
/// Learning-rate grid swept for every plan.
pub const LR_GRID: [f64; 4] = [2e-3, 6e-3, 2e-5, 6e-5];

impl TrainConfig {
    /// Batch 16, 10 epochs, weight decay 0.01, and the plan family's default rate.
    pub fn defaults_for(spec: &PlanSpec, seed: u64) -> Self {
        TrainConfig {
            learning_rate: if spec.is_full_ft() { FULL_FT_LR } else { PEFT_LR },
            batch_size: 16,
            epochs: 10,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive and finite");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Per-tensor first and second moments, created lazily for trainable tensors only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub moments: IndexMap<String, Moments>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// In-place AdamW update of one tensor at 1-based step `step`.
pub fn adamw_update(w: &mut [f64], grad: &[f64], mom: &mut Moments, step: u64, cfg: &TrainConfig) {
    let t = step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for (i, w) in w.iter_mut().enumerate() {
        let g = grad[i];
        mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
        mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = mom.m[i] / bc1;
        let v_hat = mom.v[i] / bc2;
        *w = *w * decay - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// One AdamW step using the grad slots of every trainable tensor.
///
/// `w ← w·(1 − lr·wd) − lr·m̂/(√v̂ + eps)`. Tensors that are not trainable are
/// never read or written, whatever their grad slots hold.
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut AdamWState,
    cfg: &TrainConfig,
) -> Result<(), OptimError> {
    let names = store.trainable_names();
    for name in &names {
        let t = store.tensor(name).expect("trainable name resolves");
        match &t.grad {
            Some(g) if g.len() == t.numel() => {}
            _ => return Err(OptimError::MissingGradient(name.clone())),
        }
    }
    state.step += 1;
    for name in names {
        let tensor = store.tensor_mut(&name).expect("trainable name resolves");
        let n = tensor.numel();
        let mom = state.moments.entry(name).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let grad = tensor.grad.take().expect("checked above");
        adamw_update(tensor.data_mut(), &grad, mom, state.step, cfg);
    }
    Ok(())
}
