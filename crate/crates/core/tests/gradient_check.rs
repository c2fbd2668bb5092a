//! Analytic gradients against central finite differences in f64.

use cogsym::model::{Example, LoraConfig, ModelConfig, ModelState, Reduction};
use cogsym::TrainPlan;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        vocab_size: 20,
        context_len: 16,
        tie_embeddings: false,
    }
}

fn batch() -> Vec<Example> {
    vec![
        Example::full(vec![1, 5, 7, 2, 9, 3]),
        Example {
            tokens: vec![4, 4, 11, 19, 0],
            loss_mask: vec![false, true, false, true, true],
        },
    ]
}

fn loss(m: &ModelState<f64>, b: &[Example]) -> f64 {
    m.loss_and_grads(b, Reduction::Mean, Some(&vec![false; m.params.len()])).unwrap().0
}

/// Max relative error over sampled coordinates; near-zero gradients use an absolute floor.
fn check(model: &mut ModelState<f64>, samples: usize, seed: u64) -> (usize, f64) {
    let b = batch();
    let (_, grads) = model.backward(&b).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let pi = rng.random_range(0..model.params.len());
        let ei = rng.random_range(0..model.params[pi].len());
        let orig = model.params[pi].data[ei];
        model.params[pi].data[ei] = orig + h;
        let lp = loss(model, &b);
        model.params[pi].data[ei] = orig - h;
        let lm = loss(model, &b);
        model.params[pi].data[ei] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let an = grads.grads[pi].as_ref().unwrap()[ei];
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        assert!(
            err < 1e-3,
            "{}[{ei}]: analytic {an:e} vs finite-difference {fd:e}",
            model.params[pi].name
        );
        worst = worst.max(err);
    }
    (samples, worst)
}

#[test]
fn base_model_gradients_match_finite_differences() {
    let mut m = ModelState::<f64>::init(&small(), 7).unwrap();
    // Move LayerNorm gains and biases off their init so every path carries signal.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in m.params.iter_mut() {
        for v in p.data.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let (n, worst) = check(&mut m, 300, 11);
    assert!(n >= 200 && worst < 1e-3);
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let mut m = ModelState::<f64>::init(&small(), 3).unwrap();
    let cfg = LoraConfig {
        rank: 2,
        scale: 2.0,
        ..LoraConfig::default()
    };
    m.attach_lora(&cfg, &TrainPlan::new("p", [0, 1], true, true)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in m.params.iter_mut() {
        for v in p.data.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    check(&mut m, 200, 12);
}

#[test]
fn tied_embedding_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        tie_embeddings: true,
        ..small()
    };
    let mut m = ModelState::<f64>::init(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in m.params.iter_mut() {
        for v in p.data.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    check(&mut m, 100, 13);
}
