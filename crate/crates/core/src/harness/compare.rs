use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::task::Task;
use super::train::{train_run, RunResult};
use super::HarnessError;
use crate::metrics::MetricKind;
use crate::model::{build_model, ModelConfig};
use crate::optim::TrainConfig;
use crate::plan::{attach_lora, compile_plan, PlanSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub spec: PlanSpec,
    pub label: String,
    pub trainable_params: u64,
    pub metric: MetricKind,
    /// One value per seed, in seed order.
    pub seed_metrics: Vec<f64>,
    pub max: f64,
    pub median: f64,
    /// Highest `max` among non-full-fine-tuning rows (or the only row).
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// One run: fresh base model from `model_seed`, plan attached with `seed`, trained with `seed`.
pub fn run_one(
    spec: &PlanSpec,
    model_cfg: &ModelConfig,
    model_seed: u64,
    task: &Task,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<RunResult, HarnessError> {
    let mut store = build_model(model_cfg, model_seed)?;
    let plan = compile_plan(spec, model_cfg)?;
    attach_lora(&mut store, &plan, seed)?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    train_run(&mut store, task, &cfg)
}

/// Train every spec under every seed on parallel workers; rows keep the order of `specs`.
pub fn compare_configs(
    specs: &[PlanSpec],
    model_cfg: &ModelConfig,
    model_seed: u64,
    task: &Task,
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<ComparisonTable, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::Task("at least one seed is required".into()));
    }
    for s in specs {
        s.validate(model_cfg.num_layers)?;
    }
    let jobs: Vec<(usize, u64)> = (0..specs.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(i, seed)| run_one(&specs[i], model_cfg, model_seed, task, train_cfg, seed))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows: Vec<ComparisonRow> = specs
        .iter()
        .zip(results.chunks(seeds.len()))
        .map(|(spec, runs)| {
            let vals: Vec<f64> = runs.iter().map(|r| r.eval_metric).collect();
            ComparisonRow {
                spec: *spec,
                label: spec.label(),
                trainable_params: runs[0].trainable_params,
                metric: runs[0].metric,
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                median: median(&vals),
                seed_metrics: vals,
                best: false,
            }
        })
        .collect();
    flag_best(&mut rows);
    Ok(ComparisonTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

fn flag_best(rows: &mut [ComparisonRow]) {
    let peft: Vec<usize> = (0..rows.len())
        .filter(|&i| !rows[i].spec.is_full_ft())
        .collect();
    let pool = if peft.is_empty() {
        (0..rows.len()).collect()
    } else {
        peft
    };
    // First row wins ties.
    let best = pool
        .into_iter()
        .reduce(|b, i| if rows[i].max > rows[b].max { i } else { b });
    if let Some(b) = best {
        rows[b].best = true;
    }
}

impl ComparisonTable {
    /// Header row, then one row per spec.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| HarnessError::Task(format!("csv: {e}"));
        out.write_record([
            "spec",
            "label",
            "trainable_params",
            "metric",
            "seeds",
            "seed_metrics",
            "max",
            "median",
            "best",
        ])
        .map_err(io)?;
        let seeds = self
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(";");
        for r in &self.rows {
            let vals = r
                .seed_metrics
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect::<Vec<_>>()
                .join(";");
            out.write_record([
                r.spec.to_string(),
                r.label.clone(),
                r.trainable_params.to_string(),
                r.metric.to_string(),
                seeds.clone(),
                vals,
                format!("{:.6}", r.max),
                format!("{:.6}", r.median),
                r.best.to_string(),
            ])
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }
}
