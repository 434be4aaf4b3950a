use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{FinetunePlan, PlanError};
use crate::model::{ParamStatus, ParamStore, INIT_STD};
use crate::tensor::{kernels, Tensor};

/// Low-rank update `(α/r)·B·A` for one frozen `out×in` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub target: String,
    /// `r × in`
    pub a: Tensor,
    /// `out × r`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: usize,
}

impl LoraPair {
    /// Fresh pair: `A` Gaussian (std 0.02), `B` zero, so the update starts at exactly zero.
    pub fn init(
        target: &str,
        out: usize,
        inp: usize,
        rank: usize,
        alpha: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let a = (0..rank * inp).map(|_| normal.sample(rng)).collect();
        LoraPair {
            target: target.to_string(),
            a: Tensor::new(vec![rank, inp], a).unwrap(),
            b: Tensor::zeros(&[out, rank]),
            rank,
            alpha,
        }
    }

    pub fn from_factors(target: &str, a: Tensor, b: Tensor, alpha: usize) -> Result<Self, PlanError> {
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[0] != b.shape()[1] || a.shape()[0] == 0 {
            return Err(PlanError::Target(format!(
                "inconsistent LoRA factors for {target}: A {:?}, B {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(LoraPair {
            target: target.to_string(),
            rank: a.shape()[0],
            a,
            b,
            alpha,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha as f64 / self.rank as f64
    }

    /// Shape of the target weight, `[out, in]`.
    pub fn target_shape(&self) -> [usize; 2] {
        [self.b.shape()[0], self.a.shape()[1]]
    }

    fn module(target: &str) -> &str {
        target.strip_suffix(".weight").unwrap_or(target)
    }

    pub fn factor_name(target: &str, a: bool) -> String {
        format!("{}.lora_{}", Self::module(target), if a { "A" } else { "B" })
    }

    pub fn a_name(&self) -> String {
        Self::factor_name(&self.target, true)
    }

    pub fn b_name(&self) -> String {
        Self::factor_name(&self.target, false)
    }

    /// `<module>.lora_A` → `(<module>.weight, true)`
    pub fn parse_factor_name(name: &str) -> Option<(String, bool)> {
        if let Some(m) = name.strip_suffix(".lora_A") {
            Some((format!("{m}.weight"), true))
        } else {
            name.strip_suffix(".lora_B").map(|m| (format!("{m}.weight"), false))
        }
    }
}

/// `(α/r)·B·A`, shaped like the target weight.
pub fn lora_delta(pair: &LoraPair) -> Tensor {
    let [out, inp] = pair.target_shape();
    let mut data = kernels::matmul(pair.b.data(), pair.a.data(), out, pair.rank, inp);
    let s = pair.scale();
    for v in data.iter_mut() {
        *v *= s;
    }
    Tensor::new(vec![out, inp], data).unwrap()
}

/// Apply `plan` to `store`: set every status and attach a fresh LoRA pair to each target.
/// Existing pairs are replaced.
pub fn attach_lora(store: &mut ParamStore, plan: &FinetunePlan, seed: u64) -> Result<(), PlanError> {
    if store.config() != &plan.config {
        return Err(PlanError::Incompatible(
            "plan was compiled for a different model config".into(),
        ));
    }
    if let Some((name, _)) = store.params().find(|(n, _)| !plan.assignments.contains_key(*n)) {
        return Err(PlanError::Target(format!("no assignment for {name}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rank, alpha) = (plan.config.lora_rank, plan.config.lora_alpha);
    let mut pairs = Vec::with_capacity(plan.lora_targets.len());
    for target in &plan.lora_targets {
        let p = store
            .param(target)
            .ok_or_else(|| PlanError::Target(format!("missing LoRA target {target}")))?;
        let shape = p.tensor.shape();
        if shape.len() != 2 {
            return Err(PlanError::Target(format!(
                "LoRA target {target} is not a matrix (shape {shape:?})"
            )));
        }
        pairs.push(LoraPair::init(target, shape[0], shape[1], rank, alpha, &mut rng));
    }
    for (path, status) in &plan.assignments {
        if let Some(p) = store.param_mut(path) {
            p.status = *status;
        }
    }
    let lora = store.lora_map_mut();
    lora.clear();
    for pair in pairs {
        lora.insert(pair.target.clone(), pair);
    }
    store.set_plan(Some(plan.spec));
    store.zero_grads();
    Ok(())
}

/// Fold every attached pair into its base weight and drop the pairs.
/// The merged targets stay frozen.
pub fn merge_lora(store: &mut ParamStore) -> Result<(), PlanError> {
    if store.lora_pairs().next().is_none() {
        return Err(PlanError::NoLoraPairs);
    }
    let pairs: Vec<LoraPair> = store.lora_map_mut().drain(..).map(|(_, p)| p).collect();
    for pair in pairs {
        let delta = lora_delta(&pair);
        let p = store
            .param_mut(&pair.target)
            .ok_or_else(|| PlanError::Target(format!("missing LoRA target {}", pair.target)))?;
        for (w, d) in p.tensor.data_mut().iter_mut().zip(delta.data()) {
            *w += d;
        }
        p.status = ParamStatus::Frozen;
    }
    store.set_plan(None);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::plan::{compile_plan, PlanSpec};

    fn pair(b: Tensor, a: Tensor, alpha: usize) -> LoraPair {
        LoraPair::from_factors("x.weight", a, b, alpha).unwrap()
    }

    #[test]
    fn delta_examples() {
        let p = pair(Tensor::zeros(&[3, 2]), Tensor::full(&[2, 4], 0.3), 4);
        assert!(lora_delta(&p).data().iter().all(|&v| v == 0.0));

        let p = pair(
            Tensor::from_rows(&[&[1.0], &[1.0]]),
            Tensor::from_rows(&[&[1.0, 2.0]]),
            1,
        );
        assert_eq!(lora_delta(&p).data(), &[1.0, 2.0, 1.0, 2.0]);

        let p = pair(Tensor::full(&[4, 2], 1.0), Tensor::full(&[2, 4], 1.0), 2);
        assert!(lora_delta(&p).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn scale_for_r64_alpha128() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LoraPair::init("w.weight", 128, 128, 64, 128, &mut rng);
        assert_eq!(p.scale(), 2.0);
    }

    #[test]
    fn factor_names() {
        let t = "encoder.layer.3.attention.self.query.weight";
        let a = LoraPair::factor_name(t, true);
        assert_eq!(a, "encoder.layer.3.attention.self.query.lora_A");
        assert_eq!(LoraPair::parse_factor_name(&a), Some((t.to_string(), true)));
        assert_eq!(LoraPair::parse_factor_name("pooler.dense.weight"), None);
    }

    #[test]
    fn attach_then_merge_is_identity() {
        let cfg = ModelConfig::toy();
        let base = build_model(&cfg, 5).unwrap();
        let mut store = base.clone();
        let plan = compile_plan(&PlanSpec::FullLoraII, &cfg).unwrap();
        attach_lora(&mut store, &plan, 9).unwrap();
        assert_eq!(store.lora_pairs().count(), plan.lora_targets.len());
        merge_lora(&mut store).unwrap();
        for ((_, a), (_, b)) in base.params().zip(store.params()) {
            assert!(a.tensor.bit_eq(&b.tensor));
        }
        assert!(matches!(merge_lora(&mut store), Err(PlanError::NoLoraPairs)));
    }

    #[test]
    fn attach_rejects_foreign_plan() {
        let cfg = ModelConfig::toy();
        let mut store = build_model(&cfg, 5).unwrap();
        let other = ModelConfig {
            lora_rank: 4,
            ..cfg
        };
        let plan = compile_plan(&PlanSpec::FullLoraI, &other).unwrap();
        assert!(matches!(
            attach_lora(&mut store, &plan, 0),
            Err(PlanError::Incompatible(_))
        ));
    }
}
