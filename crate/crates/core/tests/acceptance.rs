//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criterion 8 pretrains three base models and adapts each under five plans;
//! expect roughly half an hour on one core.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use cogsym::eval::{evaluate, LexiconOracle, Predictor};
use cogsym::experiment::{self, cmd_pretrain, execute_runs, ExperimentConfig, Method, RunSpec, Workspace};
use cogsym::lingua::*;
use cogsym::model::{Example, Group, LoraConfig, ModelConfig, ModelState, Reduction};
use cogsym::rank::{diagonal_fisher, fim_layer_scores, hill_alpha, hill_alpha_k, FimConfig, FimMode, HillConfig, SigmoidModel};
use cogsym::report::cmd_report;
use cogsym::sweep::{self, Strategy};
use cogsym::train::{train, TrainConfig};
use cogsym::TrainPlan;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances.
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_SAMPLES: usize = 240;
const FIM_REL_TOL: f64 = 1e-6;
const SIGMOID_TOL: f64 = 1e-6;
const HILL_EXACT_TOL: f64 = 1e-12;
const HILL_PARETO_REL: f64 = 0.10;
const COGSYM_GAP: f64 = 0.10;
const SUITE_BUDGET_S: f64 = 2.0 * 3600.0;
const SEEDS: [u64; 3] = [42, 43, 44];

type Outcome = (bool, String);

fn c1_sweeps() -> Outcome {
    let t = Instant::now();
    let f = sweep::front_sweep(32).unwrap().len();
    let r = sweep::rear_sweep(32).unwrap().len();
    let c = sweep::cogsym_sweep(32).unwrap().len();
    let pos: Vec<Vec<usize>> = sweep::positional_plans(32, 8, 4).unwrap().iter().map(|p| p.layers()).collect();
    let want: Vec<Vec<usize>> = vec![
        (0..4).chain(28..32).collect(),
        (4..8).chain(24..28).collect(),
        (8..12).chain(20..24).collect(),
        (12..20).collect(),
    ];
    let secs = t.elapsed().as_secs_f64();
    let ok = (f, r, c) == (16, 16, 8) && pos == want && secs < 1.0;
    (ok, format!("front={f} rear={r} cogsym={c} positional={} center=12..19, {secs:.4}s", pos.len()))
}

fn adaptation_rows(n: usize) -> Vec<Example> {
    let langs = [("k0", Role::Known), ("u0", Role::Unknown)];
    let suite = generate_language_suite(42, 200, &langs, 1024).unwrap();
    let spec = CorpusSpec {
        n_examples: n,
        ..CorpusSpec::adaptation_default(11)
    };
    render_adaptation_corpus(&suite, "u0", "k0", &spec).unwrap().iter().map(|r| r.example()).collect()
}

fn bitwise_changed(a: &ModelState<f32>, b: &ModelState<f32>) -> Vec<String> {
    a.params
        .iter()
        .zip(&b.params)
        .filter(|(x, y)| x.data.iter().zip(&y.data).any(|(u, v)| u.to_bits() != v.to_bits()))
        .map(|(x, _)| x.name.clone())
        .collect()
}

fn c2_freeze() -> Outcome {
    let t = Instant::now();
    let rows = adaptation_rows(400);
    let base = ModelState::<f32>::init(&ModelConfig::toy(), 42).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        checkpoints: 1,
        ..TrainConfig::default()
    };
    let mut bad = Vec::new();
    let mut steps = 0;
    for plan in [TrainPlan::new("rear-2", 6..8, false, true), TrainPlan::new("mid", [2, 5], true, false)] {
        let mut m = base.clone();
        steps = train(&mut m, &plan, &rows, &cfg, |_, _, _| Ok(())).unwrap().steps;
        let trainable = base.apply_train_plan(&plan).unwrap();
        bad.extend(bitwise_changed(&base, &m).into_iter().filter(|n| !trainable.contains(n)));
    }
    let secs = t.elapsed().as_secs_f64();
    (
        bad.is_empty() && steps == 100 && secs < 60.0,
        format!("{steps} steps x 2 plans, frozen tensors moved: {}, {secs:.1}s", bad.len()),
    )
}

fn c3_gradients() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        vocab_size: 20,
        context_len: 16,
        tie_embeddings: false,
    };
    let mut m = ModelState::<f64>::init(&cfg, 5).unwrap();
    let batch = vec![
        Example::full(vec![1, 5, 7, 2, 9, 3, 14]),
        Example {
            tokens: vec![4, 4, 11, 19, 0, 6],
            loss_mask: vec![false, true, false, true, true, true],
        },
    ];
    let none = vec![false; m.params.len()];
    let loss = |m: &ModelState<f64>| m.loss_and_grads(&batch, Reduction::Mean, Some(&none)).unwrap().0;
    let (_, g) = m.backward(&batch).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..GRAD_SAMPLES {
        let pi = rng.random_range(0..m.params.len());
        let ei = rng.random_range(0..m.params[pi].len());
        let orig = m.params[pi].data[ei];
        m.params[pi].data[ei] = orig + h;
        let lp = loss(&m);
        m.params[pi].data[ei] = orig - h;
        let lm = loss(&m);
        m.params[pi].data[ei] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let an = g.grads[pi].as_ref().unwrap()[ei];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-7));
    }
    let secs = t.elapsed().as_secs_f64();
    (
        worst < GRAD_REL_TOL && secs < 60.0,
        format!("{GRAD_SAMPLES} parameters, worst relative error {worst:.2e}, {secs:.1}s"),
    )
}

fn c4_fisher() -> Outcome {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        vocab_size: 24,
        context_len: 16,
        tie_embeddings: false,
    };
    let model = ModelState::<f32>::init(&cfg, 3).unwrap();
    let rows = vec![
        Example::full(vec![1, 4, 9, 2, 3]),
        Example::full(vec![7, 7, 1]),
        Example::full(vec![5, 6, 11, 20, 0, 3]),
        Example::full(vec![23, 2]),
    ];
    let score = fim_layer_scores(&model, &rows, &FimConfig::default()).unwrap();
    let m64: ModelState<f64> = model.cast();
    let mut want = vec![0.0; 2];
    for row in &rows {
        let (_, g) = m64.loss_and_grads(std::slice::from_ref(row), Reduction::Sum, None).unwrap();
        for (p, gr) in m64.params.iter().zip(&g.grads) {
            if let Group::Layer(i) = p.group {
                want[i] += gr.as_ref().unwrap().iter().map(|v| v * v).sum::<f64>() / rows.len() as f64;
            }
        }
    }
    let rel = score
        .values
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs() / b.abs())
        .fold(0.0, f64::max);
    let sig = diagonal_fisher(&SigmoidModel { theta: 0.0 }, &vec![false; 250], FimMode::Sampled, 42).unwrap()[0][0];
    (
        rel <= FIM_REL_TOL && (sig - 0.25).abs() <= SIGMOID_TOL,
        format!("brute-force relative error {rel:.2e}, sigmoid Fisher {sig}"),
    )
}

fn c5_hill() -> Outcome {
    let e = std::f64::consts::E;
    let hand = hill_alpha_k(&[e * e, e, 1.0], 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let draws: Vec<f64> = (0..10_000).map(|_| (1.0 - rng.random::<f64>()).powf(-1.0 / 1.5)).collect();
    let a = hill_alpha(&draws, &HillConfig { tail_fraction: 0.1 }).unwrap();
    let ok = (hand - (1.0 + 2.0 / 3.0)).abs() <= HILL_EXACT_TOL && ((a - 2.5) / 2.5).abs() <= HILL_PARETO_REL;
    (ok, format!("hand case {hand:.15}, Pareto(2.5) estimate {a:.4}"))
}

fn c6_adapters() -> Outcome {
    let t = Instant::now();
    let base = ModelState::<f32>::init(&ModelConfig::toy(), 8).unwrap();
    let plan = TrainPlan::new("lora", [0, 7], false, true);
    let mut m = base.clone();
    m.attach_lora(&LoraConfig::default(), &plan).unwrap();
    let tokens: Vec<u32> = (0..64).map(|i| (i * 131 % 1024) as u32).collect();
    let neutral = base
        .forward_logits(&tokens)
        .unwrap()
        .data
        .iter()
        .zip(&m.forward_logits(&tokens).unwrap().data)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let cfg = TrainConfig {
        batch_size: 8,
        checkpoints: 1,
        ..TrainConfig::default()
    };
    let attached = m.clone();
    train(&mut m, &plan, &adaptation_rows(160), &cfg, |_, _, _| Ok(())).unwrap();
    let n = base.params.len();
    let mut trimmed = m.clone();
    trimmed.params.truncate(n);
    let moved = bitwise_changed(&base, &trimmed);
    let head: Vec<&str> = base.params.iter().filter(|p| p.group == Group::LmHead).map(|p| p.name.as_str()).collect();
    let adapters_moved = !bitwise_changed(&attached, &m).iter().all(|p| !p.contains(".lora_"));
    let parity = adapters_moved && !moved.is_empty() && moved.iter().all(|p| head.contains(&p.as_str()));
    let secs = t.elapsed().as_secs_f64();
    (
        neutral && parity && secs < 300.0,
        format!("bitwise-neutral init: {neutral}, adapters trained: {adapters_moved}, base tensors moved (all head): {moved:?}, {secs:.1}s"),
    )
}

struct Uniform(Vec<u32>);

impl Predictor for Uniform {
    fn next_logits(&self, prompts: &[Vec<u32>]) -> cogsym::Result<Vec<Vec<f32>>> {
        let mut row = vec![f32::NEG_INFINITY; 1024];
        for &t in &self.0 {
            row[t as usize] = 0.0;
        }
        Ok(vec![row; prompts.len()])
    }
}

fn c7_floors() -> Outcome {
    let langs = [("k0", Role::Known), ("k1", Role::Known), ("k2", Role::Known), ("u0", Role::Unknown)];
    let suite = generate_language_suite(42, 200, &langs, 1024).unwrap();
    let oracle = LexiconOracle {
        suite: &suite,
        vocab_size: 1024,
    };
    let set = render_eval_set(&suite, Task::WordTranslation, "k0", "u0", 4, 42, 2000).unwrap();
    let top = evaluate(&oracle, &set, Some(64), "oracle").unwrap().value;
    let set = render_eval_set(&suite, Task::WordTranslation, "u0", "k0", 4, 42, 2000).unwrap();
    let low = evaluate(&Uniform(suite.language("k0").unwrap().lexicon.clone()), &set, Some(64), "uniform")
        .unwrap()
        .value;
    // Exact central 95% binomial interval for n=2000, p=1/200.
    let (n, p) = (2000u64, 1.0f64 / 200.0);
    let mut pmf = (1.0 - p).powi(n as i32);
    let (mut cdf, mut lo, mut hi) = (0.0, u64::MAX, 0);
    for k in 0..=n {
        cdf += pmf;
        if lo == u64::MAX && cdf >= 0.025 {
            lo = k;
        }
        if cdf >= 0.975 {
            hi = k;
            break;
        }
        pmf *= (n - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
    }
    let hits = (low * n as f64).round() as u64;
    (
        top == 1.0 && (lo..=hi).contains(&hits),
        format!("oracle {top}, uniform guesser {hits}/2000 hits, interval [{lo}, {hi}]"),
    )
}

/// Final-checkpoint mean accuracy per (plan, direction) over eval seeds.
fn final_accuracy(ws: &Workspace, seed: u64) -> BTreeMap<(String, String), f64> {
    let rows = ws.results().unwrap();
    let prefix = format!("s{seed}/");
    let mut last: BTreeMap<String, usize> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.run_id.starts_with(&prefix)) {
        let e = last.entry(r.run_id.clone()).or_insert(0);
        *e = (*e).max(r.step);
    }
    let mut acc: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.run_id.starts_with(&prefix) && r.task == Task::WordTranslation) {
        if r.step == last[&r.run_id] {
            acc.entry((r.plan_label.clone(), r.direction.clone())).or_default().push(r.value);
        }
    }
    acc.into_iter()
        .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
        .collect()
}

fn specialization_config(out: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.out_dir = out.to_path_buf();
    c.adaptation.checkpoints = 2;
    c.adaptation.save_checkpoints = false;
    c.eval.classification.clear();
    c
}

fn c8_c9_specialization() -> (Outcome, Outcome) {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(specialization_config(dir.path())).unwrap();
    let l = ws.config.model.n_layers;
    let k = l / 4;
    let front = sweep::front_sweep(l).unwrap().remove(k / 2 - 1);
    let rear = sweep::rear_sweep(l).unwrap().remove(k / 2 - 1);
    let cog = sweep::cogsym_plan(l, ws.config.sweep.cogsym_fraction).unwrap();
    let positional = sweep::positional_plans(l, k, 1).unwrap();
    let (outer, center) = (positional[0].clone(), positional.last().unwrap().clone());
    let k2u = ["k0->u0", "k1->u0"];
    let u2k = ["u0->k0", "u0->k1"];

    let mut votes = [0usize; 4];
    let mut gaps = Vec::new();
    let mut lines = Vec::new();
    for seed in SEEDS {
        let report = match cmd_pretrain(&ws, seed) {
            Ok(r) => r,
            Err(e) => return ((false, format!("seed {seed}: {e}")), (false, "no base model".into())),
        };
        let mut specs = experiment::reference_runs(&ws, seed, Method::Full);
        for (name, p) in [("front", &front), ("rear", &rear), ("cogsym", &cog), ("positional", &outer), ("positional", &center)] {
            specs.push(RunSpec {
                run_id: experiment::run_id(&ws, seed, Method::Full, name, &p.label),
                strategy: name.into(),
                phases: vec![p.clone()],
            });
        }
        let o = execute_runs(&ws, seed, Method::Full, &specs, 1).unwrap();
        assert!(o.failed.is_empty(), "{:?}", o.failed);
        let acc = final_accuracy(&ws, seed);
        let mean = |label: &str, dirs: &[&str]| dirs.iter().map(|d| acc[&(label.to_string(), d.to_string())]).sum::<f64>() / dirs.len() as f64;
        let both: Vec<&str> = k2u.iter().chain(&u2k).copied().collect();
        let (fk, fu) = (mean(&front.label, &k2u), mean(&front.label, &u2k));
        let (rk, ru) = (mean(&rear.label, &k2u), mean(&rear.label, &u2k));
        let (ck, cu) = (mean(&cog.label, &k2u), mean(&cog.label, &u2k));
        let (om, cm) = (mean(&outer.label, &both), mean(&center.label, &both));
        let claims = [rk > fk, fu > ru, ck >= fk.max(rk) && cu >= fu.max(ru), om > cm];
        for (v, c) in votes.iter_mut().zip(claims) {
            *v += c as usize;
        }
        let full = mean("full", &both);
        gaps.push((mean(&cog.label, &both), full));
        lines.push(format!(
            "seed {seed} gate {:.3}: k->u front {fk:.3} rear {rk:.3} cogsym {ck:.3}; u->k front {fu:.3} rear {ru:.3} cogsym {cu:.3}; outer {om:.3} center {cm:.3}; claims a-d {:?}",
            report.mean_known_accuracy, claims
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    for line in &lines {
        println!("    {line}");
    }
    let majority: Vec<bool> = votes.iter().map(|&v| 2 * v > SEEDS.len()).collect();
    let ok8 = majority.iter().all(|&m| m) && secs < SUITE_BUDGET_S;
    let d8 = format!(
        "votes a={}/3 b={}/3 c={}/3 d={}/3, {:.0}s for {} seeds",
        votes[0], votes[1], votes[2], votes[3], secs, SEEDS.len()
    );
    let cog_mean = gaps.iter().map(|g| g.0).sum::<f64>() / gaps.len() as f64;
    let full_mean = gaps.iter().map(|g| g.1).sum::<f64>() / gaps.len() as f64;
    let ok9 = full_mean - cog_mean <= COGSYM_GAP;
    let d9 = format!("{} mean {cog_mean:.3} vs full {full_mean:.3} (gap {:.3})", cog.label, full_mean - cog_mean);
    ((ok8, d8), (ok9, d9))
}

fn c10_replay() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let run = || {
        let ws = Workspace::open(common::tiny(&out)).unwrap();
        cmd_pretrain(&ws, 42).unwrap();
        experiment::cmd_sweep(&ws, 42, Strategy::Cogsym, Method::Full, 2).unwrap();
        experiment::cmd_sweep(&ws, 42, Strategy::Front, Method::Full, 2).unwrap();
        let files = cmd_report(&ws, &out.join("report")).unwrap();
        let results = std::fs::read(out.join("results.jsonl")).unwrap();
        let mut registry: Vec<serde_json::Value> = ws
            .registry()
            .unwrap()
            .into_iter()
            .map(|r| serde_json::to_value(r).unwrap())
            .collect();
        for r in &mut registry {
            r.as_object_mut().unwrap().remove("wall_clock_s");
        }
        let csvs: Vec<(String, Vec<u8>)> = files
            .tables
            .iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap()))
            .collect();
        let base = std::fs::read(ws.base_path(42)).unwrap();
        (results, registry, csvs, base)
    };
    let first = run();
    std::fs::remove_dir_all(&out).unwrap();
    let second = run();
    let ok = first == second && !first.0.is_empty() && !first.2.is_empty();
    (
        ok,
        format!(
            "results log {} bytes, {} CSV tables, registry and base checkpoint identical: {}",
            first.0.len(),
            first.2.len(),
            ok
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags; a filter argument that names nothing here skips the suite.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let mut all = true;
    let mut report = |n: usize, name: &str, (ok, detail): Outcome| {
        all &= ok;
        println!("criterion {n:>2} {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    };
    report(1, "sweep enumeration", c1_sweeps());
    report(2, "freeze soundness", c2_freeze());
    report(3, "gradient correctness", c3_gradients());
    report(4, "FIM oracle", c4_fisher());
    report(5, "Hill oracle", c5_hill());
    report(6, "adapter neutrality and parity", c6_adapters());
    report(7, "chance floor and oracle ceiling", c7_floors());
    report(10, "end-to-end replayability", c10_replay());
    let (c8, c9) = c8_c9_specialization();
    report(8, "specialization replication", c8);
    report(9, "CogSym versus full finetune", c9);
    if !all {
        std::process::exit(1);
    }
}
