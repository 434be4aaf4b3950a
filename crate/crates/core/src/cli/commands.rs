use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::manifest::{parse_spec, preset};
use super::{Cli, CliError, Command, Manifest, Overrides};
use crate::harness::{compare_configs, evaluate, generate_task, train_run, write_jsonl, Task};
use crate::model::{build_model, load_checkpoint, save_checkpoint, ModelConfig};
use crate::plan::{
    attach_lora, compile_plan, count_trainable, enumerate_trainable, export_adapter, millions,
    published_millions, swap_adapter, FinetunePlan, LayerGroup, PlanError, PlanSpec,
};
#[cfg(test)]
use crate::plan::PUBLISHED_MILLIONS;

type Out<'a> = &'a mut dyn Write;

pub(super) fn dispatch(cli: &Cli, out: Out, err: Out) -> Result<(), CliError> {
    let ov = cli.common.overrides();
    let manifest = cli
        .common
        .manifest
        .as_deref()
        .map(Manifest::load)
        .transpose()?;
    let need = || {
        manifest
            .as_ref()
            .ok_or_else(|| CliError::Usage("this command needs --manifest".into()))
    };
    match &cli.command {
        Command::Plan { preset: p } => {
            let cfg = config_or_preset(manifest.as_ref().map(|m| &m.0), p)?;
            let spec = match &manifest {
                Some((m, _)) => m.plan_spec(&ov)?,
                None => parse_spec(ov.spec.as_deref().ok_or_else(|| {
                    CliError::Usage("plan needs --spec or --manifest".into())
                })?)?,
            };
            cmd_plan(&compile_plan(&spec, &cfg)?, out)
        }
        Command::Audit {
            preset: p,
            include_head,
        } => {
            let cfg = config_or_preset(manifest.as_ref().map(|m| &m.0), p)?;
            let specs = audit_specs(manifest.as_ref().map(|m| &m.0), &ov)?;
            cmd_audit(&cfg, &specs, *include_head, out)
        }
        Command::Train => {
            let (m, base) = need()?;
            cmd_train(m, base, &ov, out, err)
        }
        Command::Eval { checkpoint } => {
            let (m, base) = need()?;
            let ckpt = match checkpoint {
                Some(p) => p.clone(),
                None => m.output_dir(base, &ov)?.join("model.ckpt"),
            };
            cmd_eval(m, &ckpt, out)
        }
        Command::Compare => {
            let (m, base) = need()?;
            cmd_compare(m, base, &ov, out, err)
        }
        Command::ExportAdapter {
            checkpoint,
            adapter,
        } => {
            let dir = || -> Result<PathBuf, CliError> {
                let (m, base) = need()?;
                m.output_dir(base, &ov)
            };
            let ckpt = match checkpoint {
                Some(p) => p.clone(),
                None => dir()?.join("model.ckpt"),
            };
            let dest = match adapter {
                Some(p) => p.clone(),
                None => dir()?.join("adapter.spfa"),
            };
            let store = load_checkpoint(&ckpt)?;
            export_adapter(&store, &dest)?;
            writeln!(out, "{}", dest.display())?;
            Ok(())
        }
        Command::SwapAdapter {
            checkpoint,
            adapter,
            save,
        } => {
            let ckpt = match (checkpoint, &manifest) {
                (Some(p), _) => p.clone(),
                (None, Some((m, base))) => m.output_dir(base, &ov)?.join("model.ckpt"),
                (None, None) => {
                    return Err(CliError::Usage(
                        "swap-adapter needs --checkpoint or --manifest".into(),
                    ))
                }
            };
            cmd_swap(manifest.as_ref().map(|m| &m.0), &ckpt, adapter, save.as_deref(), out, err)
        }
        Command::GenData => {
            let (m, base) = need()?;
            let dir = m.output_dir(base, &ov)?;
            let task = generate_task(m.task()?)?;
            std::fs::create_dir_all(&dir)?;
            for (name, split) in [("train.jsonl", &task.train), ("val.jsonl", &task.val)] {
                let path = dir.join(name);
                write_jsonl(split, BufWriter::new(File::create(&path)?))?;
                writeln!(out, "{}\t{}", path.display(), split.len())?;
            }
            Ok(())
        }
    }
}

fn config_or_preset(m: Option<&Manifest>, name: &str) -> Result<ModelConfig, CliError> {
    match m {
        Some(m) => m.model_config(),
        None => preset(name),
    }
}

fn audit_specs(m: Option<&Manifest>, ov: &Overrides) -> Result<Vec<PlanSpec>, CliError> {
    if let Some(s) = &ov.spec {
        return s.split(';').map(parse_spec).collect();
    }
    if let Some(m) = m {
        let mut v: Vec<String> = m.plan.spec.iter().cloned().collect();
        v.extend(m.plan.compare.iter().filter(|s| Some(*s) != m.plan.spec.as_ref()).cloned());
        if !v.is_empty() {
            return v.iter().map(|s| parse_spec(s)).collect();
        }
    }
    PUBLISHED_SPECS.iter().map(|s| parse_spec(s)).collect()
}

/// Spec strings for every row of `PUBLISHED_MILLIONS`, in the same order.
const PUBLISHED_SPECS: [&str; 10] = [
    "full-ft",
    "bitfit",
    "lora-i",
    "lora-ii",
    "spafit:N1=8,N2=12,mode=I",
    "spafit:N1=8,N2=12,mode=II",
    "spafit:N1=8,N2=16,mode=II",
    "spafit:N1=4,N2=9,mode=I",
    "spafit:N1=4,N2=9,mode=II",
    "spafit:N1=4,N2=14,mode=II",
];

fn ranges(plan: &FinetunePlan, group: LayerGroup) -> Option<(usize, usize)> {
    let layers: Vec<usize> = (1..=plan.config.num_layers)
        .filter(|&l| plan.spec.group_of(l) == Some(group))
        .collect();
    Some((*layers.first()?, *layers.last()?))
}

fn cmd_plan(plan: &FinetunePlan, out: Out) -> Result<(), CliError> {
    let c = &plan.config;
    writeln!(out, "plan: {} ({})", plan.spec, plan.spec.label())?;
    writeln!(out, "layers: {}", c.num_layers)?;
    if let PlanSpec::Spafit { n1, n2, .. } = plan.spec {
        let sizes = [n1, n2 - n1, c.num_layers - n2];
        let names = ["frozen", "bias-only", "LoRA + biases"];
        let groups = [LayerGroup::Frozen, LayerGroup::BiasOnly, LayerGroup::Adapted];
        for (i, g) in groups.into_iter().enumerate() {
            match ranges(plan, g) {
                Some((a, b)) => writeln!(
                    out,
                    "group {} ({}): layers {a}-{b} ({} layers)",
                    i + 1,
                    names[i],
                    sizes[i]
                )?,
                None => writeln!(out, "group {} ({}): empty", i + 1, names[i])?,
            }
        }
        if n2 == c.num_layers && n1 == n2 {
            writeln!(out, "encoder fully frozen: only the head is tuned")?;
        }
    } else {
        writeln!(out, "uniform across all layers")?;
    }
    writeln!(out, "layer\tfrozen\tbias\tlora\ttrainable")?;
    for l in 1..=c.num_layers {
        let [f, b, lo, t] = plan.layer_summary(l);
        writeln!(out, "{l}\t{f}\t{b}\t{lo}\t{t}")?;
    }
    let mut totals = [0usize; 4];
    for s in plan.assignments.values() {
        totals[*s as usize] += 1;
    }
    writeln!(
        out,
        "tensors: frozen {} bias {} lora {} trainable {}",
        totals[0], totals[1], totals[2], totals[3]
    )?;
    let n = count_trainable(plan, false);
    writeln!(out, "trainable parameters (head excluded): {n} ({:.2}M)", millions(n))?;
    writeln!(out, "trainable parameters (head included): {}", count_trainable(plan, true))?;
    Ok(())
}

fn is_bert_large(c: &ModelConfig) -> bool {
    ModelConfig {
        num_labels: c.num_labels,
        dropout_p: c.dropout_p,
        ..ModelConfig::bert_large()
    } == *c
}

fn cmd_audit(
    cfg: &ModelConfig,
    specs: &[PlanSpec],
    include_head: bool,
    out: Out,
) -> Result<(), CliError> {
    let compare_published = !include_head && is_bert_large(cfg);
    writeln!(
        out,
        "{:<28} {:<18} {:>12} {:>10} {:>10}  note",
        "spec", "label", "trainable", "millions", "published"
    )?;
    for spec in specs {
        let plan = compile_plan(spec, cfg)?;
        let n = count_trainable(&plan, include_head);
        let brute = enumerate_trainable(&plan, include_head);
        if n != brute {
            return Err(CliError::Other(format!(
                "{spec}: closed-form count {n} disagrees with enumeration {brute}"
            )));
        }
        let m = millions(n);
        let (published, note) = match published_millions(spec).filter(|_| compare_published) {
            Some(p) if (p - m).abs() < 0.005 => (format!("{p:.2}"), "matches".to_string()),
            Some(p) => (format!("{p:.2}"), format!("DIFFERS by {:+.2}M", m - p)),
            None => ("-".into(), String::new()),
        };
        writeln!(
            out,
            "{:<28} {:<18} {:>12} {:>10.2} {:>10}  {}",
            spec.to_string(),
            spec.label(),
            n,
            m,
            published,
            note
        )?;
    }
    Ok(())
}

fn build_run(m: &Manifest, ov: &Overrides) -> Result<(ModelConfig, PlanSpec, Task), CliError> {
    let cfg = m.model_config()?;
    let spec = m.plan_spec(ov)?;
    let task = generate_task(m.task()?)?;
    Ok((cfg, spec, task))
}

fn cmd_train(m: &Manifest, base: &Path, ov: &Overrides, out: Out, err: Out) -> Result<(), CliError> {
    let (cfg, spec, task) = build_run(m, ov)?;
    let tc = m.train_config(&spec, ov)?;
    let dir = m.output_dir(base, ov)?;
    let mut store = build_model(&cfg, m.model.seed)?;
    let plan = compile_plan(&spec, &cfg)?;
    attach_lora(&mut store, &plan, tc.seed)?;
    writeln!(
        err,
        "training {} for {} epochs on {} examples (lr {}, batch {}, seed {})",
        spec.label(),
        tc.epochs,
        task.train.len(),
        tc.learning_rate,
        tc.batch_size,
        tc.seed
    )?;
    let result = train_run(&mut store, &task, &tc)?;
    std::fs::create_dir_all(&dir)?;
    save_checkpoint(&store, &dir.join("model.ckpt"))?;
    export_adapter(&store, &dir.join("adapter.spfa"))?;
    let json = serde_json::to_string_pretty(&result).map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(dir.join("run.json"), &json)?;
    writeln!(out, "{json}")?;
    writeln!(
        err,
        "eval {} = {:.6}; artifacts in {}",
        result.metric,
        result.eval_metric,
        dir.display()
    )?;
    Ok(())
}

fn cmd_eval(m: &Manifest, ckpt: &Path, out: Out) -> Result<(), CliError> {
    let spec = m.task()?;
    let store = load_checkpoint(ckpt)?;
    let task = generate_task(spec)?;
    let metric = spec.metric();
    let value = evaluate(&store, &task.val, metric)?;
    let json = serde_json::json!({
        "checkpoint": ckpt.display().to_string(),
        "split": "val",
        "metric": metric,
        "value": value,
    });
    writeln!(out, "{json}")?;
    Ok(())
}

fn cmd_compare(m: &Manifest, base: &Path, ov: &Overrides, out: Out, err: Out) -> Result<(), CliError> {
    let cfg = m.model_config()?;
    let specs = m.compare_specs(ov)?;
    let seeds = m.seeds(ov)?;
    let task = generate_task(m.task()?)?;
    // Per-spec defaults would give rows different learning rates; one config is shared.
    let tc = m.train_config(&specs[0], ov)?;
    writeln!(
        err,
        "comparing {} plans x {} seeds (lr {}, {} epochs)",
        specs.len(),
        seeds.len(),
        tc.learning_rate,
        tc.epochs
    )?;
    let table = compare_configs(&specs, &cfg, m.model.seed, &task, &tc, &seeds)?;
    table.write_csv(&mut *out)?;
    if ov.out.is_some() || m.output.is_some() {
        let dir = m.output_dir(base, ov)?;
        std::fs::create_dir_all(&dir)?;
        table.write_csv(BufWriter::new(File::create(dir.join("compare.csv"))?))?;
        let json =
            serde_json::to_string_pretty(&table).map_err(|e| CliError::Other(e.to_string()))?;
        std::fs::write(dir.join("compare.json"), json)?;
    }
    Ok(())
}

fn cmd_swap(
    m: Option<&Manifest>,
    ckpt: &Path,
    adapter: &Path,
    save: Option<&Path>,
    out: Out,
    err: Out,
) -> Result<(), CliError> {
    let mut store = load_checkpoint(ckpt)?;
    swap_adapter(&mut store, adapter).map_err(|e| match e {
        PlanError::Checkpoint(crate::model::CheckpointError::Io(io)) => CliError::from(io),
        other => CliError::Incompatible(other.to_string()),
    })?;
    writeln!(err, "adapter {} loaded", adapter.display())?;
    if let Some(dest) = save {
        save_checkpoint(&store, dest)?;
        writeln!(out, "{}", dest.display())?;
    }
    if let Some(spec) = m.and_then(|m| m.task.as_ref()) {
        let task = generate_task(spec)?;
        let value = evaluate(&store, &task.val, spec.metric())?;
        writeln!(out, "{}\t{value:.6}", spec.metric())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_specs_follow_the_table() {
        for (s, (label, _)) in PUBLISHED_SPECS.iter().zip(PUBLISHED_MILLIONS) {
            assert_eq!(parse_spec(s).unwrap().label(), label);
        }
        assert_eq!(PUBLISHED_SPECS.len(), PUBLISHED_MILLIONS.len());
    }
}
