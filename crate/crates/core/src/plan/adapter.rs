//! Task adapters: every tensor a plan trains, in the checkpoint container.

use std::path::Path;

use crate::model::{read_container, write_container, CheckpointError, Container, ContainerKind, ParamStore};

use super::PlanError;

/// Write LoRA factors, tunable biases and head parameters of `store`.
pub fn export_adapter(store: &ParamStore, path: &Path) -> Result<(), PlanError> {
    let plan = store
        .plan()
        .ok_or_else(|| PlanError::Incompatible("store has no plan attached".into()))?;
    let tensors = store
        .trainable_names()
        .into_iter()
        .map(|name| {
            let mut t = store.tensor(&name).expect("trainable name resolves").clone();
            t.grad = None;
            (name, t)
        })
        .collect();
    write_container(
        &Container {
            kind: ContainerKind::Adapter,
            config: store.config().clone(),
            plan: Some(plan.to_string()),
            tensors,
        },
        path,
    )?;
    Ok(())
}

/// Load an adapter into `store`, overwriting exactly the tensors it trains.
/// The adapter must come from the same model config and plan.
pub fn swap_adapter(store: &mut ParamStore, path: &Path) -> Result<(), PlanError> {
    let c = read_container(path)?;
    if c.kind != ContainerKind::Adapter {
        return Err(PlanError::Checkpoint(CheckpointError::WrongKind {
            expected: ContainerKind::Adapter,
            found: c.kind,
        }));
    }
    if &c.config != store.config() {
        let (a, s) = (&c.config, store.config());
        return Err(PlanError::Incompatible(format!(
            "adapter built for L={} d={} r={} α={} labels={}, store has L={} d={} r={} α={} labels={}",
            a.num_layers, a.hidden, a.lora_rank, a.lora_alpha, a.num_labels,
            s.num_layers, s.hidden, s.lora_rank, s.lora_alpha, s.num_labels
        )));
    }
    let store_plan = store.plan().map(|p| p.to_string());
    if c.plan != store_plan {
        return Err(PlanError::Incompatible(format!(
            "adapter plan {:?} does not match store plan {:?}",
            c.plan, store_plan
        )));
    }
    let expected = store.trainable_names();
    if c.tensors.len() != expected.len() {
        return Err(PlanError::Incompatible(format!(
            "adapter carries {} tensors, plan trains {}",
            c.tensors.len(),
            expected.len()
        )));
    }
    for (name, t) in &c.tensors {
        if !store.is_trainable(name) {
            return Err(PlanError::Checkpoint(CheckpointError::UnknownTensor(name.clone())));
        }
        let cur = store.tensor(name).expect("trainable name resolves");
        if cur.shape() != t.shape() {
            return Err(PlanError::Checkpoint(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: cur.shape().to_vec(),
                found: t.shape().to_vec(),
            }));
        }
    }
    for (name, t) in c.tensors {
        let slot = store.tensor_mut(&name).expect("validated above");
        slot.data_mut().copy_from_slice(t.data());
        slot.grad = None;
    }
    Ok(())
}
