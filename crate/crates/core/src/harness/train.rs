use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::task::{encode, DatasetRecord, Label, Task, TaskSpec};
use super::HarnessError;
use crate::metrics::{accuracy, f1_binary, matthews_corr, pearson_corr, MetricKind};
use crate::model::{model_forward, predict, ParamBinder, ParamStore};
use crate::optim::{adamw_step, AdamWState, TrainConfig};
use crate::plan::{compile_plan, count_trainable};
use crate::tensor::{Graph, Mode};

const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub plan: String,
    /// Head excluded, as reported by the audit.
    pub trainable_params: u64,
    pub trainable_params_with_head: u64,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub metric: MetricKind,
    pub train_metric: f64,
    pub eval_metric: f64,
    pub wall_clock_secs: f64,
    pub seed: u64,
    pub steps: u64,
    pub hyperparameters: TrainConfig,
}

fn check_compat(store: &ParamStore, spec: &TaskSpec) -> Result<(), HarnessError> {
    let cfg = store.config();
    if cfg.num_labels != spec.head_labels() {
        return Err(HarnessError::Task(format!(
            "model head has {} outputs, task needs {}",
            cfg.num_labels,
            spec.head_labels()
        )));
    }
    if spec.vocab_size > cfg.vocab_size {
        return Err(HarnessError::Task(format!(
            "task vocab {} exceeds model vocab {}",
            spec.vocab_size, cfg.vocab_size
        )));
    }
    if spec.seq_len() > cfg.max_positions {
        return Err(HarnessError::Task(format!(
            "task sequences of {} tokens exceed max_positions {}",
            spec.seq_len(),
            cfg.max_positions
        )));
    }
    Ok(())
}

fn class_of(label: &Label) -> Result<usize, HarnessError> {
    match *label {
        Label::Class(c) => Ok(c),
        Label::Score(_) => Err(HarnessError::Task("score label in classification task".into())),
    }
}

fn score_of(label: &Label) -> f64 {
    match *label {
        Label::Class(c) => c as f64,
        Label::Score(s) => s,
    }
}

/// Eval-mode predictions: argmax classes, or raw scores for a single-output head.
pub fn predictions(store: &ParamStore, records: &[DatasetRecord]) -> Result<Vec<f64>, HarnessError> {
    let labels = store.config().num_labels;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_CHUNK) {
        let refs: Vec<&DatasetRecord> = chunk.iter().collect();
        let logits = predict(store, &encode(&refs)?)?;
        for row in logits.data().chunks(labels) {
            if labels == 1 {
                out.push(row[0]);
            } else {
                let best = (0..labels)
                    .fold(0, |b, i| if row[i] > row[b] { i } else { b });
                out.push(best as f64);
            }
        }
    }
    Ok(out)
}

/// Score `store` on `records` with `metric`.
pub fn evaluate(
    store: &ParamStore,
    records: &[DatasetRecord],
    metric: MetricKind,
) -> Result<f64, HarnessError> {
    let preds = predictions(store, records)?;
    if metric.is_regression() {
        let gold: Vec<f64> = records.iter().map(|r| score_of(&r.label)).collect();
        return Ok(pearson_corr(&preds, &gold)?);
    }
    let p: Vec<usize> = preds.iter().map(|&v| v as usize).collect();
    let g = records
        .iter()
        .map(|r| class_of(&r.label))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(match metric {
        MetricKind::Accuracy => accuracy(&p, &g)?,
        MetricKind::F1 => f1_binary(&p, &g)?,
        MetricKind::Mcc => matthews_corr(&p, &g)?,
        MetricKind::Pearson => unreachable!(),
    })
}

/// Minibatch AdamW over `task.train`, then eval-mode scoring of both splits.
///
/// The store must carry an attached plan. Shuffling and dropout draw from one
/// generator seeded by `cfg.seed`.
pub fn train_run(
    store: &mut ParamStore,
    task: &Task,
    cfg: &TrainConfig,
) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    task.spec.validate()?;
    check_compat(store, &task.spec)?;
    let spec = *store
        .plan()
        .ok_or_else(|| HarnessError::Task("no fine-tuning plan attached".into()))?;
    let plan = compile_plan(&spec, store.config())?;
    let regression = store.config().is_regression();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamWState::new();
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let recs: Vec<&DatasetRecord> = idx.iter().map(|&i| &task.train[i]).collect();
            let batch = encode(&recs)?;
            let mut g = Graph::new();
            let mut binder = ParamBinder::new(true);
            let logits = model_forward(&mut g, &mut binder, store, &batch, Mode::Train, &mut rng)?;
            let loss = if regression {
                let y: Vec<f64> = recs.iter().map(|r| score_of(&r.label)).collect();
                g.mse(logits, &y)?
            } else {
                let y = recs
                    .iter()
                    .map(|r| class_of(&r.label))
                    .collect::<Result<Vec<_>, _>>()?;
                g.cross_entropy(logits, &y)?
            };
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(HarnessError::Diverged {
                    step: state.step + 1,
                });
            }
            g.backward(loss)?;
            store.zero_grads();
            binder.write_grads(&g, store);
            adamw_step(store, &mut state, cfg)?;
            total += value;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }

    let metric = task.spec.metric();
    let train_metric = evaluate(store, &task.train, metric)?;
    let eval_metric = evaluate(store, &task.val, metric)?;
    Ok(RunResult {
        plan: spec.to_string(),
        trainable_params: count_trainable(&plan, false),
        trainable_params_with_head: count_trainable(&plan, true),
        epoch_losses,
        metric,
        train_metric,
        eval_metric,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        steps: state.step,
        hyperparameters: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::generate_task;
    use crate::model::{build_model, ModelConfig};
    use crate::plan::{attach_lora, PlanSpec};

    fn setup(spec: &str) -> (ParamStore, Task) {
        let mc = ModelConfig::toy();
        let mut store = build_model(&mc, 11).unwrap();
        let plan = compile_plan(&spec.parse().unwrap(), &mc).unwrap();
        attach_lora(&mut store, &plan, 12).unwrap();
        let task = generate_task(&TaskSpec::pair_classification(4, 64, 32)).unwrap();
        (store, task)
    }

    fn cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 2e-3,
            epochs,
            ..TrainConfig::defaults_for(&PlanSpec::FullLoraI, seed)
        }
    }

    #[test]
    fn zero_epochs_matches_base_metric() {
        let (mut store, task) = setup("spafit:N1=1,N2=2,mode=II");
        let base = evaluate(&store, &task.val, MetricKind::Accuracy).unwrap();
        let r = train_run(&mut store, &task, &cfg(0, 1)).unwrap();
        assert_eq!(r.eval_metric, base);
        assert_eq!(r.steps, 0);
        assert!(r.epoch_losses.is_empty());
    }

    #[test]
    fn rerun_is_bit_identical() {
        let run = || {
            let (mut store, task) = setup("lora-ii");
            let r = train_run(&mut store, &task, &cfg(2, 5)).unwrap();
            (r, store)
        };
        let (r1, s1) = run();
        let (r2, s2) = run();
        assert_eq!(r1.epoch_losses, r2.epoch_losses);
        assert_eq!(r1.eval_metric, r2.eval_metric);
        assert_eq!(r1.steps, 2 * 4);
        for name in s1.trainable_names() {
            assert!(s1.tensor(&name).unwrap().bit_eq(s2.tensor(&name).unwrap()));
        }
    }

    #[test]
    fn evaluation_is_repeatable() {
        let (store, task) = setup("bitfit");
        let a = evaluate(&store, &task.val, MetricKind::F1).unwrap();
        let b = evaluate(&store, &task.val, MetricKind::F1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn head_mismatch_is_rejected() {
        let (mut store, mut task) = setup("bitfit");
        task.spec.kind = crate::harness::TaskKind::PairRegression;
        assert!(matches!(
            train_run(&mut store, &task, &cfg(1, 0)),
            Err(HarnessError::Task(_))
        ));
    }

    #[test]
    fn divergence_reports_step() {
        let (mut store, task) = setup("full-ft");
        store.tensor_mut("classifier.weight").unwrap().data_mut()[0] = f64::NAN;
        match train_run(&mut store, &task, &cfg(1, 0)) {
            Err(HarnessError::Diverged { step }) => assert_eq!(step, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
