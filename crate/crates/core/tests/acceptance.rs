//! Acceptance criteria 1 to 11. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fails.

// `ensure!(x < tol)` must fail on NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use spafit::harness::{evaluate, generate_task, train_run, Task, TaskSpec};
use spafit::metrics::{accuracy, f1_binary, matthews_corr, pearson_corr, MetricKind};
use spafit::model::{
    build_model, encoder_layer_forward, layer_path, model_forward, parse_layer_path, predict,
    Batch, ModelConfig, ParamBinder, ParamStore, LAYER_PARAMS,
};
use spafit::optim::{adamw_update, Moments, TrainConfig};
use spafit::plan::{
    attach_lora, compile_plan, count_trainable, enumerate_trainable, export_adapter, merge_lora,
    millions, swap_adapter, Group3Mode, PlanSpec,
};
use spafit::tensor::{Graph, Mode, NodeId, Tensor};

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    // Panics are reported on the criterion's FAIL line.
    std::panic::set_hook(Box::new(|_| {}));
    let criteria: [(u8, &str, f64, Check); 8] = [
        (1, "count reproduction", 1.0, c1_counts),
        (2, "count oracle", 10.0, c2_count_oracle),
        (3, "gradient checks", 30.0, c3_gradients),
        (4, "zero-init transparency", 5.0, c4_zero_init),
        (5, "merge equivalence", 60.0, c5_merge),
        (6, "freeze/selectivity", 120.0, c6_selectivity),
        (7, "AdamW unit", 1.0, c7_adamw),
        (8, "metric oracles", 10.0, c8_metrics),
    ];
    let mut passed = 0;
    for (id, name, budget, f) in criteria {
        passed += usize::from(report(id, name, budget, f));
    }
    let mut smoke = Vec::new();
    passed += usize::from(report(9, "learning smoke", 600.0, || c9_smoke(&mut smoke)));
    passed += usize::from(report(10, "adapter swap", 900.0, c10_adapter_swap));
    passed += usize::from(report(11, "determinism", 600.0, || c11_determinism(&smoke)));
    println!("acceptance: {passed} of 11 criteria passed");
    if passed < 11 {
        std::process::exit(1);
    }
}

fn report(id: u8, name: &str, budget: f64, f: impl FnOnce() -> Result<String, String>) -> bool {
    let start = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f))
        .unwrap_or_else(|p| Err(format!("panic: {}", panic_text(&p))));
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match res {
        Ok(d) if secs <= budget => (true, d),
        Ok(d) => (false, format!("{d}; took {secs:.2}s, budget {budget}s")),
        Err(e) => (false, e),
    };
    println!(
        "{} criterion {id:>2} {name} ({secs:.2}s): {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn spec(s: &str) -> PlanSpec {
    s.parse().unwrap()
}

fn toy(layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        ..ModelConfig::toy()
    }
}

fn random_batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig, batch: usize, seq: usize) -> Batch {
    let n = batch * seq;
    let tokens = (0..n).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let types = (0..n).map(|_| rng.random_range(0..cfg.type_vocab)).collect();
    let mut mask = vec![false; n];
    for b in 0..batch {
        let len = rng.random_range(1..=seq);
        mask[b * seq..b * seq + len].fill(true);
    }
    Batch::new(tokens, types, Some(mask), batch, seq).unwrap()
}

fn c1_counts() -> Result<String, String> {
    let cfg = ModelConfig::bert_large();
    let count = |s: &str| count_trainable(&compile_plan(&spec(s), &cfg).unwrap(), false);
    let (lora1, lora2, total) = (count("lora-i"), count("lora-ii"), cfg.param_count(false));
    ensure!(lora1 == 9_437_184, "FullLoraI = {lora1}, expected 9437184");
    ensure!(lora2 == 12_582_912, "FullLoraII = {lora2}, expected 12582912");
    ensure!(total == 333_579_264, "total = {total}, expected 333579264");
    ensure!(count("full-ft") == total, "full-ft count differs from total");
    Ok(format!(
        "LoRA-I {lora1} ({:.2}M), LoRA-II {lora2} ({:.2}M, published 12.59M), total {total} ({:.2}M)",
        millions(lora1),
        millions(lora2),
        millions(total)
    ))
}

fn random_spec(rng: &mut ChaCha8Rng, layers: usize) -> PlanSpec {
    match rng.random_range(0..5) {
        0 => PlanSpec::FullFt,
        1 => PlanSpec::FullBitFit,
        2 => PlanSpec::FullLoraI,
        3 => PlanSpec::FullLoraII,
        _ => {
            let n2 = rng.random_range(0..=layers);
            PlanSpec::Spafit {
                n1: rng.random_range(0..=n2),
                n2,
                mode: if rng.random() { Group3Mode::FtI } else { Group3Mode::FtII },
            }
        }
    }
}

fn c2_count_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let heads = rng.random_range(1..=4);
        let hidden = heads * rng.random_range(1..=8);
        let ffn_size = rng.random_range(1..=48);
        let cfg = ModelConfig {
            num_layers: rng.random_range(1..=8),
            hidden,
            num_heads: heads,
            ffn_size,
            vocab_size: rng.random_range(3..=40),
            max_positions: rng.random_range(1..=16),
            type_vocab: rng.random_range(1..=3),
            lora_rank: rng.random_range(1..=hidden.min(ffn_size).min(8)),
            lora_alpha: rng.random_range(1..=16),
            dropout_p: 0.1,
            num_labels: rng.random_range(1..=4),
        };
        let s = random_spec(&mut rng, cfg.num_layers);
        let plan = compile_plan(&s, &cfg).map_err(|e| e.to_string())?;
        // Independent path: attach to real weights and sum the trainable tensors.
        let mut store = build_model(&cfg, case).unwrap();
        attach_lora(&mut store, &plan, case).unwrap();
        for head in [false, true] {
            let closed = count_trainable(&plan, head);
            let brute = enumerate_trainable(&plan, head);
            let from_store: u64 = store
                .trainable_names()
                .iter()
                .filter(|n| {
                    head || !(n.starts_with("classifier.")
                        || (n.starts_with("pooler.") && !s.is_full_ft()))
                })
                .map(|n| store.tensor(n).unwrap().numel() as u64)
                .sum();
            ensure!(
                closed == brute && brute == from_store,
                "case {case}: {s} on {cfg:?} head={head}: closed {closed}, enumerated {brute}, store {from_store}"
            );
        }
    }
    Ok("100 random (config, spec) pairs agree, head excluded and included".into())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over the concatenated gradient vector.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

const H: f64 = 1e-5;

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let d = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

/// Central differences of `f` w.r.t. every element of every input leaf.
fn fd_leaves(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let run = |ts: &[Tensor], grad: bool| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ts.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let loss = f(&mut g, &ids);
        (g, ids, loss)
    };
    let (mut g, ids, loss) = run(inputs, true);
    g.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for (id, t) in ids.iter().zip(inputs) {
        match g.grad(*id) {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    let mut numeric = Vec::new();
    let mut work = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + H;
            let (g1, _, l1) = run(&work, false);
            work[i].data_mut()[j] = orig - H;
            let (g2, _, l2) = run(&work, false);
            work[i].data_mut()[j] = orig;
            numeric.push((g1.value(l1).data()[0] - g2.value(l2).data()[0]) / (2.0 * H));
        }
    }
    rel_err(&analytic, &numeric)
}

fn weighted_sum(g: &mut Graph, x: NodeId, r: &Tensor) -> NodeId {
    let c = g.constant(r.clone());
    let p = g.mul(x, c).unwrap();
    g.sum(p)
}

fn grad_cfg() -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        hidden: 8,
        num_heads: 2,
        ffn_size: 16,
        vocab_size: 16,
        max_positions: 8,
        type_vocab: 2,
        lora_rank: 2,
        lora_alpha: 4,
        dropout_p: 0.1,
        num_labels: 2,
    }
}

/// Gradient of `Σ R ⊙ layer(x)` w.r.t. `x` and every trainable tensor of layer 1,
/// analytic versus central differences.
fn fd_encoder_layer(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> f64 {
    let (b, s, d) = (2, 3, store.config().hidden);
    let x = normal_tensor(rng, &[b, s, d], 1.0);
    let r = normal_tensor(rng, &[b, s, d], 1.0);
    let key_bias = [0.0, 0.0, -1e9, 0.0, 0.0, 0.0];
    let names: Vec<String> = store
        .trainable_names()
        .into_iter()
        .filter(|n| parse_layer_path(n).is_some())
        .collect();

    let loss_of = |store: &ParamStore, x: &Tensor, grads: bool| {
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(grads);
        let xi = g.leaf(x.clone(), grads);
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let out = encoder_layer_forward(&mut g, &mut binder, store, 1, xi, &key_bias, Mode::Eval, &mut dummy)
            .unwrap();
        let loss = weighted_sum(&mut g, out, &r);
        (g, binder, xi, loss)
    };

    let (mut g, binder, xi, loss) = loss_of(store, &x, true);
    g.backward(loss).unwrap();
    let mut analytic = g.grad(xi).unwrap().to_vec();
    for n in &names {
        let id = binder.leaf(n).unwrap();
        match g.grad(id) {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(std::iter::repeat_n(0.0, store.tensor(n).unwrap().numel())),
        }
    }

    let value = |store: &ParamStore, x: &Tensor| {
        let (g, _, _, loss) = loss_of(store, x, false);
        g.value(loss).data()[0]
    };
    let mut numeric = Vec::new();
    let mut xw = x.clone();
    for j in 0..xw.numel() {
        let orig = xw.data()[j];
        xw.data_mut()[j] = orig + H;
        let up = value(store, &xw);
        xw.data_mut()[j] = orig - H;
        let down = value(store, &xw);
        xw.data_mut()[j] = orig;
        numeric.push((up - down) / (2.0 * H));
    }
    for n in &names {
        for j in 0..store.tensor(n).unwrap().numel() {
            let orig = store.tensor(n).unwrap().data()[j];
            store.tensor_mut(n).unwrap().data_mut()[j] = orig + H;
            let up = value(store, &x);
            store.tensor_mut(n).unwrap().data_mut()[j] = orig - H;
            let down = value(store, &x);
            store.tensor_mut(n).unwrap().data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
    }
    rel_err(&analytic, &numeric)
}

fn perturb_layer(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let d = Normal::new(0.0, 0.3).unwrap();
    for rest in LAYER_PARAMS {
        let t = store.tensor_mut(&layer_path(1, rest)).unwrap();
        for v in t.data_mut() {
            *v += d.sample(rng);
        }
    }
}

fn c3_gradients() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut errs = Vec::new();

    let x = normal_tensor(&mut rng, &[4, 6], 2.0);
    let r = normal_tensor(&mut rng, &[4, 6], 1.0);
    let e = fd_leaves(&[x], &|g, ids| {
        let y = g.gelu(ids[0]);
        weighted_sum(g, y, &r)
    });
    errs.push(("gelu", e));

    let x = normal_tensor(&mut rng, &[3, 8], 1.5);
    let gamma = normal_tensor(&mut rng, &[8], 1.0);
    let beta = normal_tensor(&mut rng, &[8], 1.0);
    let r = normal_tensor(&mut rng, &[3, 8], 1.0);
    let e = fd_leaves(&[x, gamma, beta], &|g, ids| {
        let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-12).unwrap();
        weighted_sum(g, y, &r)
    });
    errs.push(("layer_norm", e));

    let (b, h, s, dh) = (2, 2, 3, 4);
    let q = normal_tensor(&mut rng, &[b, h, s, dh], 1.0);
    let k = normal_tensor(&mut rng, &[b, h, s, dh], 1.0);
    let v = normal_tensor(&mut rng, &[b, h, s, dh], 1.0);
    let r = normal_tensor(&mut rng, &[b, h, s, dh], 1.0);
    let key_bias = [0.0, 0.0, 0.0, 0.0, -1e9, 0.0];
    let e = fd_leaves(&[q, k, v], &|g, ids| {
        let sc = g.batch_matmul(ids[0], ids[1], true).unwrap();
        let sc = g.scale(sc, 0.5);
        let sc = g.add_key_mask(sc, &key_bias).unwrap();
        let p = g.softmax(sc).unwrap();
        let ctx = g.batch_matmul(p, ids[2], false).unwrap();
        weighted_sum(g, ctx, &r)
    });
    errs.push(("softmax-attention", e));

    let cfg = grad_cfg();
    let mut store = build_model(&cfg, 30).unwrap();
    perturb_layer(&mut store, &mut rng);
    errs.push(("encoder layer", fd_encoder_layer(&mut store, &mut rng)));

    let mut store = build_model(&cfg, 31).unwrap();
    perturb_layer(&mut store, &mut rng);
    attach_lora(&mut store, &compile_plan(&spec("spafit:N1=0,N2=0,mode=II"), &cfg).unwrap(), 32)
        .unwrap();
    let bnames: Vec<String> = store.lora_pairs().map(|(_, p)| p.b_name()).collect();
    for n in bnames {
        let t = normal_tensor(&mut rng, store.tensor(&n).unwrap().shape(), 0.3);
        *store.tensor_mut(&n).unwrap() = t;
    }
    errs.push(("encoder layer + LoRA", fd_encoder_layer(&mut store, &mut rng)));

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure!(worst < 1e-6, "relative error above 1e-6: {detail}");
    Ok(format!("h=1e-5, d<=16: {detail}"))
}

fn c4_zero_init() -> Result<String, String> {
    let cfg = toy(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = build_model(&cfg, 40).unwrap();
    let batches: Vec<Batch> = (0..10).map(|_| random_batch(&mut rng, &cfg, 3, 7)).collect();
    let mut specs: Vec<PlanSpec> = ["full-ft", "bitfit", "lora-i", "lora-ii"].map(spec).to_vec();
    specs.extend((0..8).map(|_| random_spec(&mut rng, 4)));
    let train_logits = |store: &ParamStore, b: &Batch| {
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(true);
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let out = model_forward(&mut g, &mut binder, store, b, Mode::Train, &mut r).unwrap();
        g.value(out).clone()
    };
    for (i, s) in specs.iter().enumerate() {
        let mut store = base.clone();
        attach_lora(&mut store, &compile_plan(s, &cfg).unwrap(), i as u64).unwrap();
        for b in &batches {
            let (x, y) = (predict(&base, b).unwrap(), predict(&store, b).unwrap());
            ensure!(x.bit_eq(&y), "{s}: eval logits differ by {}", x.max_abs_diff(&y));
            let (x, y) = (train_logits(&base, b), train_logits(&store, b));
            ensure!(x.bit_eq(&y), "{s}: train-mode logits differ by {}", x.max_abs_diff(&y));
        }
    }
    Ok(format!("{} plans x 10 batches bit-identical (eval and train mode)", specs.len()))
}

fn smoke_lr() -> f64 {
    spafit::optim::LR_GRID[0]
}

fn trained(s: &str, cfg: &ModelConfig, task: &Task, epochs: usize, seed: u64) -> (ParamStore, ParamStore) {
    let mut store = build_model(cfg, 100 + seed).unwrap();
    attach_lora(&mut store, &compile_plan(&spec(s), cfg).unwrap(), seed).unwrap();
    let init = store.clone();
    let tc = TrainConfig {
        learning_rate: smoke_lr(),
        epochs,
        ..TrainConfig::defaults_for(&spec(s), seed)
    };
    train_run(&mut store, task, &tc).unwrap();
    (init, store)
}

fn c5_merge() -> Result<String, String> {
    let cfg = toy(4);
    // 400 examples at batch 16 for 8 epochs: 200 steps.
    let task = generate_task(&TaskSpec::pair_classification(5, 400, 50)).unwrap();
    let (_, store) = trained("spafit:N1=1,N2=2,mode=II", &cfg, &task, 8, 5);
    let mut merged = store.clone();
    merge_lora(&mut merged).map_err(|e| e.to_string())?;
    ensure!(merged.lora_pairs().next().is_none(), "pairs left after merge");
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let b = random_batch(&mut rng, &cfg, 4, 12);
        let d = predict(&store, &b).unwrap().max_abs_diff(&predict(&merged, &b).unwrap());
        worst = worst.max(d);
    }
    let moved = store
        .lora_pairs()
        .any(|(_, p)| p.b.data().iter().any(|&v| v != 0.0));
    ensure!(moved, "LoRA B factors never left zero");
    ensure!(worst <= 1e-9, "max abs difference {worst:e} > 1e-9");
    Ok(format!("200 steps, max abs logit difference {worst:.1e} over 10 batches"))
}

fn c6_selectivity() -> Result<String, String> {
    let cfg = toy(4);
    let task = generate_task(&TaskSpec::pair_classification(6, 500, 100)).unwrap();
    let (init, store) = trained("spafit:N1=2,N2=3,mode=II", &cfg, &task, 10, 6);
    let g3_biases = ["intermediate.dense.bias", "output.dense.bias", "output.LayerNorm.bias"];
    let mut changed = [0usize; 5];
    for (path, p) in store.params() {
        let same = p.tensor.bit_eq(init.tensor(path).unwrap());
        match parse_layer_path(path) {
            Some((l, _)) if l <= 2 => ensure!(same, "group-1 tensor {path} changed"),
            Some((3, rest)) => {
                ensure!(same || rest.ends_with(".bias"), "group-2 non-bias {path} changed");
                changed[1] += usize::from(!same);
            }
            Some((_, rest)) => {
                ensure!(same || g3_biases.contains(&rest), "group-3 tensor {path} changed");
                changed[2] += usize::from(!same);
            }
            None if path.starts_with("embeddings.") => ensure!(same, "embedding {path} changed"),
            None => changed[4] += usize::from(!same),
        }
    }
    let mut lora = 0;
    for (target, pair) in store.lora_pairs() {
        ensure!(
            parse_layer_path(target).is_some_and(|(l, _)| l == 4),
            "LoRA pair outside group 3: {target}"
        );
        let before = init.lora_pair(target).unwrap();
        lora += usize::from(!pair.a.bit_eq(&before.a)) + usize::from(!pair.b.bit_eq(&before.b));
    }
    changed[3] = lora;
    ensure!(changed[1] == 8 && changed[2] == 3, "expected 8 group-2 and 3 group-3 bias tensors to move, got {changed:?}");
    ensure!(lora == 8, "expected all 8 LoRA factors of layer 4 to move, got {lora}");
    Ok(format!(
        "{} tensors scanned: group 1 and embeddings unchanged; group 2 moved {} biases; group 3 moved {} biases and {} LoRA factors; head moved {}",
        store.len(),
        changed[1],
        changed[2],
        changed[3],
        changed[4]
    ))
}

fn c7_adamw() -> Result<String, String> {
    let mut w = [1.0];
    let mut mom = Moments {
        m: vec![0.0],
        v: vec![0.0],
    };
    let cfg = TrainConfig {
        learning_rate: 0.1,
        weight_decay: 0.01,
        ..TrainConfig::defaults_for(&PlanSpec::FullFt, 0)
    };
    adamw_update(&mut w, &[0.5], &mut mom, 1, &cfg);
    let err = (w[0] - 0.899000002).abs();
    ensure!(err <= 1e-12, "w' = {:.12}, error {err:e}", w[0]);
    Ok(format!("w' = {:.12} (error {err:.1e})", w[0]))
}

fn oracle_acc(p: &[usize], g: &[usize]) -> f64 {
    p.iter().zip(g).filter(|(a, b)| a == b).count() as f64 / p.len() as f64
}

fn oracle_f1(p: &[usize], g: &[usize]) -> f64 {
    let tp = p.iter().zip(g).filter(|&(&a, &b)| a == 1 && b == 1).count() as f64;
    let pp = p.iter().filter(|&&a| a == 1).count() as f64;
    let gp = g.iter().filter(|&&b| b == 1).count() as f64;
    if pp == 0.0 || gp == 0.0 || tp == 0.0 {
        return 0.0;
    }
    let (prec, rec) = (tp / pp, tp / gp);
    2.0 * prec * rec / (prec + rec)
}

/// Pairwise-difference form of the Pearson correlation.
fn oracle_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for j in 0..i {
            let (dx, dy) = (x[i] - x[j], y[i] - y[j]);
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// MCC as the Pearson correlation of the two 0/1 vectors; 0 when undefined.
fn oracle_mcc(p: &[usize], g: &[usize]) -> f64 {
    let x: Vec<f64> = p.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = g.iter().map(|&v| v as f64).collect();
    oracle_pearson(&x, &y).unwrap_or(0.0)
}

fn c8_metrics() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut degenerate = 0;
    for case in 0..1000 {
        let n = rng.random_range(1..=40);
        // Biased draws so constant vectors (degenerate denominators) are common.
        let bias_p: f64 = [0.0, 1.0, rng.random()][rng.random_range(0..3)];
        let bias_g: f64 = [0.0, 1.0, rng.random()][rng.random_range(0..3)];
        let p: Vec<usize> = (0..n).map(|_| usize::from(rng.random_bool(bias_p))).collect();
        let g: Vec<usize> = (0..n).map(|_| usize::from(rng.random_bool(bias_g))).collect();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        let (acc, f1, mcc) = (
            accuracy(&p, &g).unwrap(),
            f1_binary(&p, &g).unwrap(),
            matthews_corr(&p, &g).unwrap(),
        );
        ensure!(close(acc, oracle_acc(&p, &g)), "case {case}: accuracy {acc}");
        ensure!(close(f1, oracle_f1(&p, &g)), "case {case}: f1 {f1} vs {}", oracle_f1(&p, &g));
        ensure!(close(mcc, oracle_mcc(&p, &g)), "case {case}: mcc {mcc} vs {}", oracle_mcc(&p, &g));

        let x: Vec<f64> = if rng.random_bool(0.1) {
            vec![rng.random(); n]
        } else {
            (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
        };
        let y: Vec<f64> = x.iter().map(|v| 0.7 * v + rng.random_range(-3.0..3.0)).collect();
        match (pearson_corr(&x, &y), oracle_pearson(&x, &y)) {
            (Ok(a), Some(b)) => ensure!(close(a, b), "case {case}: pearson {a} vs {b}"),
            (Err(_), None) => degenerate += 1,
            (a, b) => return Err(format!("case {case}: pearson {a:?} vs oracle {b:?}")),
        }
    }
    Ok(format!(
        "1000 instances within 1e-12 ({degenerate} zero-variance Pearson cases rejected by both)"
    ))
}

fn c10_adapter_swap() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = toy(4);
    let s = spec("spafit:N1=1,N2=2,mode=II");
    let task_a = generate_task(&TaskSpec::pair_classification(101, 600, 200)).unwrap();
    let mut spec_b = TaskSpec::pair_classification(202, 600, 200);
    spec_b.segment_len = 5;
    let task_b = generate_task(&spec_b).unwrap();
    let tc = TrainConfig {
        learning_rate: smoke_lr(),
        epochs: 3,
        ..TrainConfig::defaults_for(&s, 10)
    };

    let mut store = build_model(&cfg, 10).unwrap();
    attach_lora(&mut store, &compile_plan(&s, &cfg).unwrap(), 10).unwrap();
    let ra = train_run(&mut store, &task_a, &tc).map_err(|e| e.to_string())?;
    let snapshot = store.clone();
    let path_a = dir.path().join("a.spfa");
    export_adapter(&store, &path_a).map_err(|e| e.to_string())?;

    let rb = train_run(&mut store, &task_b, &tc).map_err(|e| e.to_string())?;
    export_adapter(&store, &dir.path().join("b.spfa")).map_err(|e| e.to_string())?;
    let names = store.trainable_names();
    let drifted = names
        .iter()
        .filter(|n| !store.tensor(n).unwrap().bit_eq(snapshot.tensor(n).unwrap()))
        .count();
    ensure!(drifted > 0, "training on B left every trainable tensor unchanged");

    swap_adapter(&mut store, &path_a).map_err(|e| e.to_string())?;
    for (path, p) in store.params() {
        ensure!(p.tensor.bit_eq(snapshot.tensor(path).unwrap()), "{path} differs after swap");
    }
    for n in &names {
        ensure!(store.tensor(n).unwrap().bit_eq(snapshot.tensor(n).unwrap()), "{n} differs after swap");
    }
    let restored = evaluate(&store, &task_a.val, MetricKind::Accuracy).map_err(|e| e.to_string())?;
    ensure!(
        restored.to_bits() == ra.eval_metric.to_bits(),
        "restored A metric {restored} != {}",
        ra.eval_metric
    );
    Ok(format!(
        "A val {:.4} restored exactly after B (val {:.4}); {} trainable tensors bit-identical, {} had drifted",
        ra.eval_metric,
        rb.eval_metric,
        names.len(),
        drifted
    ))
}

struct SmokeRun {
    train: f64,
    val: f64,
    losses: Vec<f64>,
    store: ParamStore,
}

const SMOKE_SEEDS: [u64; 3] = [1, 2, 3];

fn smoke_run(seed: u64) -> SmokeRun {
    let cfg = toy(4);
    let task = generate_task(&TaskSpec::pair_classification(9, 2000, 500)).unwrap();
    let s = spec("spafit:N1=1,N2=2,mode=II");
    let mut store = build_model(&cfg, 0).unwrap();
    attach_lora(&mut store, &compile_plan(&s, &cfg).unwrap(), seed).unwrap();
    let tc = TrainConfig {
        learning_rate: smoke_lr(),
        ..TrainConfig::defaults_for(&s, seed)
    };
    let r = train_run(&mut store, &task, &tc).unwrap();
    SmokeRun {
        train: r.train_metric,
        val: r.eval_metric,
        losses: r.epoch_losses,
        store,
    }
}

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

fn c9_smoke(runs: &mut Vec<SmokeRun>) -> Result<String, String> {
    *runs = SMOKE_SEEDS.iter().map(|&s| smoke_run(s)).collect();
    let train = median3(runs.iter().map(|r| r.train).collect());
    let val = median3(runs.iter().map(|r| r.val).collect());
    let per_seed = runs
        .iter()
        .map(|r| format!("{:.3}/{:.3}", r.train, r.val))
        .collect::<Vec<_>>()
        .join(" ");
    let detail = format!(
        "SPAFIT-1-2-II median train {train:.4} (need >= 0.95), val {val:.4} (need >= 0.90); per seed train/val {per_seed}"
    );
    ensure!(train >= 0.95 && val >= 0.90, "{detail}");
    Ok(detail)
}

/// Reruns criterion 9 under the same seeds.
fn c11_determinism(first: &[SmokeRun]) -> Result<String, String> {
    ensure!(first.len() == SMOKE_SEEDS.len(), "criterion 9 did not complete");
    for (seed, a) in SMOKE_SEEDS.iter().zip(first) {
        let b = smoke_run(*seed);
        ensure!(
            a.train.to_bits() == b.train.to_bits() && a.val.to_bits() == b.val.to_bits(),
            "seed {seed}: metrics differ"
        );
        ensure!(
            a.losses.len() == b.losses.len()
                && a.losses.iter().zip(&b.losses).all(|(x, y)| x.to_bits() == y.to_bits()),
            "seed {seed}: epoch losses differ"
        );
        let names = a.store.trainable_names();
        ensure!(names == b.store.trainable_names(), "seed {seed}: trainable sets differ");
        for (path, p) in a.store.params() {
            ensure!(p.tensor.bit_eq(b.store.tensor(path).unwrap()), "seed {seed}: {path} differs");
        }
        for n in &names {
            ensure!(
                a.store.tensor(n).unwrap().bit_eq(b.store.tensor(n).unwrap()),
                "seed {seed}: {n} differs"
            );
        }
    }
    Ok("3 seeds rerun: metrics, epoch losses and every parameter bit-identical".into())
}
