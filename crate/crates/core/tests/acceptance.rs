//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{max_diff, oracle_forward, oracle_loss, sensitivity_oracle};
use glab::analysis::paper_fixture_report;
use glab::garfa::{alpha_of, GarfaParams, ALPHA_HI, ALPHA_LO};
use glab::harness::{derive_plan, generate_tasks, run_ablation, TaskKind, TaskSpec};
use glab::lslora::{llama_table_comparison, LoraAdapter, LoraSpec, PUBLISHED_LLAMA_LORA_PARAMS};
use glab::model::{apply_rope, ForwardOptions, Model, ModelConfig, Projection};
use glab::numcore::{derive_seed, Tape, Tensor};
use glab::probes::{rope_influence_profile, sensitivity_profile, InfluenceOptions, PairedStimulus};
use glab::trainer::{accumulated_gradients, lr_at, train, trainable_snapshot, TrainingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

fn fixture_statistics() -> Outcome {
    let start = Instant::now();
    let r = paper_fixture_report().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let ten: BTreeSet<usize> = [0, 23, 24, 25, 26, 27, 28, 29, 30, 31].into();
    let detail = format!(
        "r_s = {:.5} (want -0.735 ± 0.005), p = {:.3e} (want [1.0e-6, 3.0e-6]), overlap {:?}, expected {}, {:?}",
        r.r_s, r.p_value, r.overlap, r.expected_overlap, elapsed
    );
    ensure!(
        r.top_k_sensitivity == ten,
        "sensitive set {:?}; {detail}",
        r.top_k_sensitivity
    );
    ensure!(
        r.top_k_influence == (0..10).collect(),
        "influence set {:?}; {detail}",
        r.top_k_influence
    );
    ensure!(r.overlap == [0].into(), "{detail}");
    ensure!((r.expected_overlap - 3.125).abs() < 1e-12, "{detail}");
    ensure!(elapsed < Duration::from_secs(1), "{detail}");
    ensure!((r.r_s - -0.735).abs() <= 0.005, "{detail}");
    ensure!((1.0e-6..=3.0e-6).contains(&r.p_value), "{detail}");
    Ok(detail)
}

fn garfa_identity() -> Outcome {
    let cfg = ModelConfig::toy();
    let base = Model::init(&cfg, 11).map_err(|e| e.to_string())?;
    let mut with = base.clone();
    with.attach_garfa(GarfaParams::init_identity(&(0..8).collect(), cfg.n_kv_heads).unwrap())
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.gen_range(1..=24);
        let t = tokens(&mut rng, cfg.vocab_size, len);
        let a = base.forward(&t).unwrap().logits;
        let b = with.forward(&t).unwrap().logits;
        worst = worst.max(a.max_abs_diff(&b));
    }
    ensure!(worst <= 1e-12, "max logit difference {worst:.2e}");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let w: f64 = rng.gen_range(-50.0..=50.0);
        let a = alpha_of(w);
        ensure!(a > ALPHA_LO && a < ALPHA_HI, "alpha_of({w}) = {a}");
    }
    Ok(format!(
        "max logit difference {worst:.2e} over 100 inputs; 10000 alphas strictly inside (0.1, 10)"
    ))
}

fn lora_noop_and_selectivity() -> Outcome {
    let cfg = ModelConfig::toy();
    let base = Model::init(&cfg, 21).unwrap();
    let mut zero = base.clone();
    let every = LoraSpec {
        layers: (0..8).collect(),
        targets: Projection::ALL.into_iter().collect(),
        ..LoraSpec::default()
    };
    zero.attach_lora(LoraAdapter::inject(&every, &cfg, 5).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let t = tokens(&mut rng, cfg.vocab_size, 16);
        worst = worst.max(
            base.forward(&t)
                .unwrap()
                .logits
                .max_abs_diff(&zero.forward(&t).unwrap().logits),
        );
    }
    ensure!(worst <= 1e-12, "zero-init adapters moved logits by {worst:.2e}");

    let targets: BTreeSet<usize> = [2, 5].into();
    let mut m = base.clone();
    let spec = LoraSpec {
        layers: targets.clone(),
        dropout: 0.05,
        ..LoraSpec::default()
    };
    m.attach_lora(LoraAdapter::inject(&spec, &cfg, 6).unwrap()).unwrap();
    m.attach_garfa(GarfaParams::init_identity(&targets, cfg.n_kv_heads).unwrap())
        .unwrap();
    let data = generate_tasks(&TaskSpec {
        n_train: 64,
        ..TaskSpec::default()
    })
    .unwrap();
    let before = trainable_snapshot(&m);
    let tc = TrainingConfig {
        max_steps: 50,
        lr_lora: 2e-3,
        lr_rope: 1e-2,
        ..TrainingConfig::default()
    };
    train(&mut m, &data.train, &[], &tc).map_err(|e| e.to_string())?;
    let mut moved = 0;
    for l in 0..8 {
        let same = m.params.layers[l] == base.params.layers[l];
        ensure!(same, "base weights of layer {l} changed");
    }
    ensure!(m.params == base.params, "embedding, final norm or head changed");
    for (name, v) in trainable_snapshot(&m) {
        let layer: usize = name.split('.').nth(1).unwrap().parse().unwrap();
        ensure!(targets.contains(&layer), "adapter {name} on a non-target layer");
        moved += usize::from(v != before[&name]);
    }
    ensure!(
        moved == before.len(),
        "only {moved} of {} adapter tensors trained",
        before.len()
    );
    Ok(format!(
        "zero adapters: max diff {worst:.2e}; after 50 steps every base tensor is bit-identical, {moved} adapter tensors on layers {{2,5}} moved"
    ))
}

/// One random configuration of the full toy model with every parameter
/// trainable, and a sample of coordinates to check.
fn gradient_configuration(seed: u64) -> Result<f64, String> {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::init(&cfg, derive_seed(&[seed, 0])).unwrap();
    let lora_layers: BTreeSet<usize> = (0..2).map(|_| rng.gen_range(0..8)).collect();
    let garfa_layers: BTreeSet<usize> = (0..2).map(|_| rng.gen_range(0..8)).collect();
    let spec = LoraSpec {
        layers: lora_layers,
        targets: Projection::ALL.into_iter().collect(),
        ..LoraSpec::default()
    };
    let mut lora = LoraAdapter::inject(&spec, &cfg, derive_seed(&[seed, 1])).unwrap();
    for f in lora.factors.values_mut() {
        f.b.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
    }
    m.attach_lora(lora).unwrap();
    let mut g = GarfaParams::init_identity(&garfa_layers, cfg.n_kv_heads).unwrap();
    for &l in &garfa_layers {
        for h in 0..cfg.n_kv_heads {
            g.set_alpha(l, h, rng.gen_range(0.3..6.0)).unwrap();
        }
    }
    m.attach_garfa(g).unwrap();
    m.params.set_requires_grad(true);
    m.lora.as_mut().unwrap().set_requires_grad(true);
    m.garfa.as_mut().unwrap().set_requires_grad(true);

    let len = rng.gen_range(5..=10);
    let t = tokens(&mut rng, cfg.vocab_size, len);
    let targets: Vec<(usize, usize)> = (0..len - 1).map(|i| (i, t[i + 1])).collect();
    let loss_of = |m: &Model| {
        let mut tape = Tape::new();
        let tr = m.record(&mut tape, &t, &ForwardOptions::default()).unwrap();
        let l = tape.cross_entropy(tr.logits, &targets).unwrap();
        tape.value(l).data[0]
    };
    let mut tape = Tape::new();
    let tr = m.record(&mut tape, &t, &ForwardOptions::default()).unwrap();
    let loss = tape.cross_entropy(tr.logits, &targets).unwrap();
    tape.backward(loss).unwrap();

    // (reverse-mode value, closure that nudges the same coordinate)
    type Nudge = Box<dyn Fn(&mut Model, f64)>;
    let mut checks: Vec<(f64, Nudge)> = Vec::new();
    for (i, (name, tensor)) in m.params.named_tensors().into_iter().enumerate() {
        let idx = rng.gen_range(0..tensor.numel());
        let grad = tape.grad(tr.base[i]).map_or(0.0, |g| g[idx]);
        let name = name.clone();
        checks.push((
            grad,
            Box::new(move |m: &mut Model, h: f64| {
                let mut all = m.params.named_tensors_mut();
                let (_, t) = all.iter_mut().find(|(n, _)| *n == name).unwrap();
                t.data[idx] += h;
            }),
        ));
    }
    for (&key, &(a, b)) in &tr.lora {
        for (which, var) in [(0, a), (1, b)] {
            let f = &m.lora.as_ref().unwrap().factors[&key];
            let n = if which == 0 { f.a.numel() } else { f.b.numel() };
            let idx = rng.gen_range(0..n);
            let grad = tape.grad(var).map_or(0.0, |g| g[idx]);
            checks.push((
                grad,
                Box::new(move |m: &mut Model, h: f64| {
                    let f = m.lora.as_mut().unwrap().factors.get_mut(&key).unwrap();
                    let t = if which == 0 { &mut f.a } else { &mut f.b };
                    t.data[idx] += h;
                }),
            ));
        }
    }
    for (&key, &var) in &tr.garfa {
        let grad = tape.grad(var).map_or(0.0, |g| g[0]);
        checks.push((
            grad,
            Box::new(move |m: &mut Model, h: f64| {
                m.garfa.as_mut().unwrap().raw.get_mut(&key).unwrap().data[0] += h;
            }),
        ));
    }

    let h = 1e-5;
    let (mut diff, mut norm_g, mut norm_fd) = (0.0, 0.0, 0.0);
    for (g, nudge) in &checks {
        let mut plus = m.clone();
        nudge(&mut plus, h);
        let mut minus = m.clone();
        nudge(&mut minus, -h);
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        diff += (g - fd) * (g - fd);
        norm_g += g * g;
        norm_fd += fd * fd;
    }
    let rel = diff.sqrt() / norm_g.sqrt().max(norm_fd.sqrt()).max(1e-8);
    Ok(rel)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let rel = gradient_configuration(seed)?;
        ensure!(rel < 1e-5, "configuration {seed}: relative error {rel:.2e}");
        worst = worst.max(rel);
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "5 configurations (every base tensor, every LoRA factor, every GARFA scalar sampled), worst relative error {worst:.2e}, {elapsed:?}"
    ))
}

fn rope_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rot = |v: &[f64], p: usize, base: f64| {
        apply_rope(&Tensor::new(vec![1, v.len()], v.to_vec()).unwrap(), &[p], base)
            .unwrap()
            .data
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = 2 * rng.gen_range(1..=8);
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let k: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (m, n, s) = (rng.gen_range(0..512), rng.gen_range(0..512), rng.gen_range(0..512));
        let base = 10f64.powf(rng.gen_range(1.0..6.5));
        let before = dot(&rot(&q, m, base), &rot(&k, n, base));
        let after = dot(&rot(&q, m + s, base), &rot(&k, n + s, base));
        worst = worst.max((before - after).abs());
        ensure!(rot(&q, 0, base) == q, "position 0 is not the identity");
    }
    ensure!(worst <= 1e-9, "relative-position error {worst:.2e}");

    let mha = ModelConfig {
        n_layers: 3,
        d_model: 32,
        n_q_heads: 4,
        n_kv_heads: 4,
        d_head: 8,
        d_ff: 48,
        vocab_size: 20,
        rope_base: 10_000.0,
        max_seq_len: 16,
    };
    let mut oracle_worst = 0.0f64;
    for seed in 0..5 {
        let m = Model::init(&mha, seed).unwrap();
        let t = tokens(&mut rng, mha.vocab_size, 12);
        let got = m.forward(&t).unwrap();
        let want = oracle_forward(&m, &t, &BTreeMap::new());
        oracle_worst = oracle_worst.max(max_diff(&want.logits, &got.logits));
        for (w, g) in want.hidden.iter().zip(&got.hidden) {
            oracle_worst = oracle_worst.max(max_diff(w, g));
        }
    }
    ensure!(
        oracle_worst <= 1e-9,
        "group size 1 differs from the MHA oracle by {oracle_worst:.2e}"
    );
    Ok(format!(
        "1000 tuples, worst drift {worst:.2e}; m=0 exact; group size 1 vs MHA oracle {oracle_worst:.2e}"
    ))
}

fn probe_correctness() -> Outcome {
    let m = Model::init(&ModelConfig::toy(), 8).unwrap();
    let data = generate_tasks(&TaskSpec {
        n_eval: 16,
        ..TaskSpec::default()
    })
    .unwrap();
    let rho_one = rope_influence_profile(&m, &data.eval, 1.0, &InfluenceOptions::default()).unwrap();
    ensure!(
        rho_one.values.iter().all(|&v| v == 0.0),
        "gamma 1 gave {:?}",
        rho_one.values
    );
    let same: Vec<PairedStimulus> = data
        .stimuli
        .iter()
        .map(|p| PairedStimulus {
            incorrect: p.correct.clone(),
            ..p.clone()
        })
        .collect();
    let delta_same = sensitivity_profile(&m, &same).unwrap();
    ensure!(
        delta_same.values.iter().all(|&v| v == 0.0),
        "identical pairs gave {:?}",
        delta_same.values
    );

    let delta = sensitivity_profile(&m, &data.stimuli).unwrap();
    let want = sensitivity_oracle(&m, &data.stimuli);
    let dw = delta
        .values
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure!(dw <= 1e-12, "sensitivity differs from oracle by {dw:.2e}");

    let rho = rope_influence_profile(&m, &data.eval, 2.0, &InfluenceOptions::default()).unwrap();
    let base = oracle_loss(&m, &data.eval, &BTreeMap::new());
    let mut rw = 0.0f64;
    for l in 0..8 {
        let want = oracle_loss(&m, &data.eval, &[(l, 2.0)].into()) - base;
        rw = rw.max((rho.values[l] - want).abs());
    }
    ensure!(rw <= 1e-12, "influence differs from oracle by {rw:.2e}");
    Ok(format!(
        "zero profiles exact; oracle gaps: sensitivity {dw:.2e}, influence {rw:.2e}"
    ))
}

fn parameter_counting() -> Outcome {
    let ten: BTreeSet<usize> = [0, 23, 24, 25, 26, 27, 28, 29, 30, 31].into();
    let g = GarfaParams::init_identity(&ten, 8).unwrap();
    ensure!(g.param_count() == 80, "GARFA count {}", g.param_count());
    let c = llama_table_comparison();
    ensure!(
        c.published == PUBLISHED_LLAMA_LORA_PARAMS && c.published == 42_598_400,
        "published {}",
        c.published
    );
    ensure!(c.delta() == c.direct as i64 - c.published as i64, "inconsistent delta");
    Ok(format!(
        "GARFA 80; LoRA direct summation {} vs published {} (delta {:+})",
        c.direct,
        c.published,
        c.delta()
    ))
}

fn dual_optimizer() -> Outcome {
    let c = TrainingConfig::default();
    let w = c.warmup_steps();
    for s in w..c.max_steps {
        let r = lr_at(s, c.lr_rope, &c) / lr_at(s, c.lr_lora, &c);
        ensure!((r - 5.0).abs() < 1e-12, "step {s}: ratio {r}");
    }
    ensure!(lr_at(0, c.lr_lora, &c) == 0.0, "lr(0) = {}", lr_at(0, c.lr_lora, &c));
    ensure!(
        (lr_at(w, c.lr_lora, &c) - c.lr_lora).abs() < 1e-18,
        "lr(warmup) != peak"
    );
    ensure!(lr_at(c.max_steps, c.lr_lora, &c).abs() < 1e-15, "lr(max) not ~0");

    let cfg = ModelConfig::toy();
    let mut m = Model::init(&cfg, 4).unwrap();
    let spec = LoraSpec {
        layers: [1, 6].into(),
        ..LoraSpec::default()
    };
    let mut lora = LoraAdapter::inject(&spec, &cfg, 4).unwrap();
    lora.factors
        .values_mut()
        .for_each(|f| f.b.data.iter_mut().for_each(|v| *v = 0.01));
    m.attach_lora(lora).unwrap();
    let mut g = GarfaParams::init_identity(&[6].into(), 2).unwrap();
    g.set_alpha(6, 1, 3.0).unwrap();
    m.attach_garfa(g).unwrap();
    let data = generate_tasks(&TaskSpec {
        n_train: 8,
        ..TaskSpec::default()
    })
    .unwrap()
    .train;
    let (_, full) = accumulated_gradients(&m, std::slice::from_ref(&data), None).unwrap();
    let split: Vec<Vec<_>> = data.chunks(4).map(<[_]>::to_vec).collect();
    let (_, acc) = accumulated_gradients(&m, &split, None).unwrap();
    let gap = full
        .iter()
        .flatten()
        .zip(acc.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure!(gap <= 1e-10, "accumulation gap {gap:.2e}");
    Ok(format!(
        "ratio 5.0 on steps {w}..{}; endpoints 0 / peak / 0; accumulation gap {gap:.2e}",
        c.max_steps
    ))
}

fn end_to_end_protocol() -> Outcome {
    let start = Instant::now();
    let seed = 0;
    let cfg = ModelConfig::toy();
    let task = TaskSpec {
        kind: TaskKind::PositionalRetrieval,
        seed,
        ..TaskSpec::default()
    };
    let tc = TrainingConfig {
        lr_lora: 2e-3,
        lr_rope: 1e-2,
        seed,
        ..TrainingConfig::default()
    };
    let probe_model = Model::init(&cfg, derive_seed(&[seed, 1])).unwrap();
    let sens = sensitivity_profile(&probe_model, &generate_tasks(&task).unwrap().stimuli).unwrap();
    let plan = derive_plan(&sens, cfg.n_layers, 2, seed).map_err(|e| e.to_string())?;
    let res = run_ablation(&plan, &task, &tc, &cfg, &LoraSpec::default(), seed).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let fp = &res.runs[0].base_fingerprint;
    let mut drops = Vec::new();
    for r in &res.runs {
        ensure!(
            &r.base_fingerprint == fp,
            "run {} started from a different base",
            r.label
        );
        let drop = 1.0 - r.train_loss / r.initial_train_loss;
        ensure!(
            drop >= 0.2,
            "run {}: train loss {} -> {}",
            r.label,
            r.initial_train_loss,
            r.train_loss
        );
        drops.push(format!("{} -{:.0}%", r.label, 100.0 * drop));
    }
    let (s, rn) = (&plan.sensitive_set, &plan.random_set);
    let join = |x: &BTreeSet<usize>| x.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";");
    let csv = res.to_csv();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let wiring = [("A", s, s), ("B", s, rn), ("C", rn, s), ("D", rn, rn)];
    ensure!(rows.len() == 4, "{} rows", rows.len());
    for (row, (label, l, g)) in rows.iter().zip(wiring) {
        ensure!(
            row[0] == label && row[1] == join(l) && row[2] == join(g),
            "row {row:?} does not match {label}"
        );
    }
    ensure!(elapsed < Duration::from_secs(20 * 60), "took {elapsed:?}");
    Ok(format!(
        "sensitive {s:?}, random {rn:?}; {}; {:.0?} total",
        drops.join(", "),
        elapsed
    ))
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 7\n[training]\nmax_steps = 5\nbatch_size = 4\ngrad_accum = 2\n[task]\nn_train = 24\nn_eval = 8\nn_stimuli = 2\n",
    )
    .unwrap();
    let commands: [&[&str]; 7] = [
        &["reproduce-paper-stats"],
        &["probe-sensitivity"],
        &["probe-rope"],
        &["analyze"],
        &["train"],
        &["ablate", "--layers", "6,7"],
        &["export-figures"],
    ];
    let mut files = 0;
    for args in commands {
        let mut trees = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{}-{rep}", args[0]));
            let status = Command::new(env!("CARGO_BIN_EXE_glab"))
                .args(args)
                .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
                .env_remove("GLAB_FIXTURES")
                .output()
                .map_err(|e| e.to_string())?
                .status;
            ensure!(
                status.code().is_some_and(|c| c == 0 || c == 5),
                "{} failed: {status}",
                args[0]
            );
            trees.push(read_tree(&out));
        }
        ensure!(trees[0] == trees[1], "{} output differs between reruns", args[0]);
        ensure!(
            trees[0].contains_key("run_manifest.json"),
            "{} wrote no manifest",
            args[0]
        );
        files += trees[0].len();
    }
    Ok(format!("7 commands, {files} artifacts byte-identical across reruns"))
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("fixture statistics", fixture_statistics),
        ("GARFA identity", garfa_identity),
        ("LoRA no-op and selectivity", lora_noop_and_selectivity),
        ("gradient correctness", gradient_correctness),
        ("RoPE properties", rope_properties),
        ("probe correctness", probe_correctness),
        ("parameter counting", parameter_counting),
        ("dual-optimizer contract", dual_optimizer),
        ("end-to-end ablation protocol", end_to_end_protocol),
        ("CLI determinism", cli_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {id:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {id:>2} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
