use cogsym::model::{Example, Group, ModelConfig, ModelState, Projection, Slot};
use cogsym::rank::*;
use cogsym::sweep::plan_from_scores;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        vocab_size: 24,
        context_len: 16,
        tie_embeddings: false,
    }
}

fn rows() -> Vec<Example> {
    vec![
        Example::full(vec![1, 4, 9, 2, 3]),
        Example::full(vec![7, 7, 1]),
        Example {
            tokens: vec![5, 6, 11, 20, 0, 3],
            loss_mask: vec![false, false, true, false, true, true],
        },
        Example::full(vec![23, 2]),
    ]
}

/// Independent accumulation: one backward pass per row, squares summed by hand.
fn brute_force_layers(model: &ModelState<f32>, rows: &[Example]) -> (Vec<f64>, f64, f64) {
    let m: ModelState<f64> = model.cast();
    let mut layers = vec![0.0; model.config.n_layers];
    let (mut embed, mut head) = (0.0, 0.0);
    for row in rows {
        let (_, g) = m
            .loss_and_grads(std::slice::from_ref(row), cogsym::model::Reduction::Sum, None)
            .unwrap();
        for (p, gr) in m.params.iter().zip(&g.grads) {
            let sq: f64 = gr.as_ref().unwrap().iter().map(|v| v * v).sum::<f64>() / rows.len() as f64;
            match p.group {
                Group::Layer(i) => layers[i] += sq,
                Group::Embedding => embed += sq,
                Group::LmHead => head += sq,
            }
        }
    }
    (layers, embed, head)
}

#[test]
fn fim_matches_brute_force_loop() {
    let model = ModelState::<f32>::init(&small(), 3).unwrap();
    let score = fim_layer_scores(&model, &rows(), &FimConfig::default()).unwrap();
    let (want, embed, head) = brute_force_layers(&model, &rows());
    assert_eq!(score.values.len(), 2);
    for (a, b) in score.values.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-6 * b.abs(), "{a} vs {b}");
        assert!(*a >= 0.0);
    }
    let e = score.metadata["embedding"].as_f64().unwrap();
    let h = score.metadata["lm_head"].as_f64().unwrap();
    assert!((e - embed).abs() <= 1e-6 * embed && (h - head).abs() <= 1e-6 * head);
    assert_eq!(score.metadata["sample_size"], 4);
}

#[test]
fn fim_is_invariant_to_duplicated_rows() {
    let model = ModelState::<f32>::init(&small(), 4).unwrap();
    let once = fim_layer_scores(&model, &rows(), &FimConfig::default()).unwrap();
    let twice_rows: Vec<Example> = rows().into_iter().flat_map(|r| [r.clone(), r]).collect();
    let twice = fim_layer_scores(&model, &twice_rows, &FimConfig::default()).unwrap();
    for (a, b) in once.values.iter().zip(&twice.values) {
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }
}

#[test]
fn fim_mean_aggregation_and_sampled_mode() {
    let model = ModelState::<f32>::init(&small(), 5).unwrap();
    let sum = fim_layer_scores(&model, &rows(), &FimConfig::default()).unwrap();
    let cfg = FimConfig {
        aggregation: Aggregation::Mean,
        ..FimConfig::default()
    };
    let mean = fim_layer_scores(&model, &rows(), &cfg).unwrap();
    let per_layer = (model.params.iter().filter(|p| p.group == Group::Layer(0)).map(|p| p.len()).sum::<usize>()) as f64;
    assert!((mean.values[0] * per_layer - sum.values[0]).abs() <= 1e-9 * sum.values[0]);

    let cfg = FimConfig {
        mode: FimMode::Sampled,
        ..FimConfig::default()
    };
    let a = fim_layer_scores(&model, &rows(), &cfg).unwrap();
    let b = fim_layer_scores(&model, &rows(), &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(fim_layer_scores(&model, &[], &FimConfig::default()).is_err());
}

#[test]
fn sigmoid_fisher_is_one_quarter() {
    let m = SigmoidModel { theta: 0.0 };
    let f = diagonal_fisher(&m, &vec![false; 250], FimMode::Sampled, 42).unwrap();
    assert!((f[0][0] - 0.25).abs() < 1e-6);
    // Away from zero the sampled estimate concentrates on p(1-p).
    let m = SigmoidModel { theta: 1.3 };
    let p = 1.0 / (1.0 + (-1.3f64).exp());
    let f = diagonal_fisher(&m, &vec![false; 20_000], FimMode::Sampled, 7).unwrap();
    assert!((f[0][0] - p * (1.0 - p)).abs() < 0.01);
}

#[test]
fn hill_recovers_pareto_exponent() {
    // Density exponent 2.5: x = u^(-1/1.5) has P(X > x) = x^-1.5.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let draws: Vec<f64> = (0..10_000).map(|_| (1.0 - rng.random::<f64>()).powf(-1.0 / 1.5)).collect();
    let a = hill_alpha(&draws, &HillConfig { tail_fraction: 0.1 }).unwrap();
    assert!((a - 2.5).abs() / 2.5 < 0.1, "alpha {a}");
}

#[test]
fn htsr_scores_are_finite_and_rank_by_sort() {
    let cfg = ModelConfig {
        d_model: 16,
        d_ffn: 32,
        ..small()
    };
    let model = ModelState::<f32>::init(&cfg, 8).unwrap();
    let s = htsr_layer_scores(&model, &HillConfig::default()).unwrap();
    assert_eq!(s.values.len(), 2);
    assert!(s.values.iter().all(|v| v.is_finite() && *v > 1.0));
    let plan = plan_from_scores("htsr-1", &s.values, 1, true, true).unwrap();
    let best = if s.values[1] > s.values[0] { 1 } else { 0 };
    assert_eq!(plan.layers(), vec![best]);
}

#[test]
fn htsr_pools_identical_spectra() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 4,
        n_heads: 1,
        d_ffn: 4,
        vocab_size: 8,
        context_len: 4,
        tie_embeddings: false,
    };
    let mut model = ModelState::<f32>::init(&cfg, 1).unwrap();
    let diag = [3.0f32, 1.5, 1.0, 0.5];
    for proj in Projection::ALL {
        let p = model.layer_param_mut(1, proj.slot());
        p.data.iter_mut().for_each(|v| *v = 0.0);
        for (i, &v) in diag.iter().enumerate() {
            p.data[i * 4 + i] = v;
        }
    }
    let eig: Vec<f64> = diag.iter().map(|&v| (v as f64).powi(2) / 4.0).collect();
    let single = hill_alpha(&eig, &HillConfig::default()).unwrap();
    let s = htsr_layer_scores(&model, &HillConfig::default()).unwrap();
    assert!((s.values[1] - single).abs() < 1e-9);
}

/// One feed-forward unit in layer 1 reads a feature that only target-language
/// embeddings carry; every other weight is zero.
#[test]
fn lsn_finds_the_hand_wired_unit() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 4,
        n_heads: 1,
        d_ffn: 6,
        vocab_size: 12,
        context_len: 16,
        tie_embeddings: false,
    };
    let mut model = ModelState::<f32>::init(&cfg, 0).unwrap();
    for p in model.params.iter_mut() {
        if !p.name.contains("ln") {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let tok = model.param_mut("embed.tok").unwrap();
    for t in 0..12 {
        let sign = if t < 6 { 1.0 } else { -1.0 };
        tok.data[t * 4] = sign;
        tok.data[t * 4 + 1] = -sign;
    }
    model.layer_param_mut(1, Slot::W1).data[3 * 4] = 1.0;

    let target: Vec<Vec<u32>> = (0..30).map(|i| vec![(i % 6) as u32; 8]).collect();
    let other: Vec<Vec<u32>> = (0..30).map(|i| vec![(6 + i % 6) as u32; 8]).collect();
    let corpora = vec![("tgt".to_string(), target), ("other".to_string(), other)];
    let s = lsn_layer_counts(&model, &corpora, "tgt", &LsnConfig::default()).unwrap();
    assert_eq!(s.values, vec![0.0, 1.0]);

    let same = vec![("tgt".to_string(), corpora[0].1.clone()), ("twin".to_string(), corpora[0].1.clone())];
    let s = lsn_layer_counts(&model, &same, "tgt", &LsnConfig::default()).unwrap();
    assert_eq!(s.values, vec![0.0, 0.0]);

    let short = vec![("tgt".to_string(), vec![vec![1u32, 2]])];
    match lsn_layer_counts(&model, &short, "tgt", &LsnConfig::default()) {
        Err(cogsym::Error::Input(m)) => assert!(m.contains("tgt")),
        other => panic!("{other:?}"),
    }
    assert!(lsn_layer_counts(&model, &corpora, "missing", &LsnConfig::default()).is_err());
}

#[test]
fn score_record_round_trips() {
    let model = ModelState::<f32>::init(&small(), 2).unwrap();
    let s = htsr_layer_scores(&model, &HillConfig::default()).unwrap();
    let text = serde_json::to_string(&s).unwrap();
    assert!(text.contains("\"L\":2") && text.contains("\"method\":\"htsr\""));
    let back: LayerScore = serde_json::from_str(&text).unwrap();
    assert_eq!(back, s);
    assert_eq!(htsr_layer_scores(&model, &HillConfig::default()).unwrap(), s);
}
