//! Few-shot evaluation with greedy single-token decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lingua::{EvalSet, LanguageSuite, Task, NUM_CLASSES};
use crate::model::ModelState;
use crate::scalar::Scalar;

/// Anything that scores next tokens for a batch of prompts.
pub trait Predictor {
    /// Next-token logits after each prompt.
    fn next_logits(&self, prompts: &[Vec<u32>]) -> Result<Vec<Vec<f32>>>;
}

impl<F: Scalar> Predictor for ModelState<F> {
    fn next_logits(&self, prompts: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .last_logits(prompts)?
            .into_iter()
            .map(|row| row.into_iter().map(|v| v.as_f64() as f32).collect())
            .collect())
    }
}

/// Looks every query up in the suite's lexicons; scores 1.0 on word translation.
pub struct LexiconOracle<'a> {
    pub suite: &'a LanguageSuite,
    pub vocab_size: usize,
}

impl Predictor for LexiconOracle<'_> {
    fn next_logits(&self, prompts: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
        prompts
            .iter()
            .map(|p| {
                let n = p.len();
                if n < 2 {
                    return Err(Error::Input("prompt too short for lookup".into()));
                }
                let (word, tag) = (p[n - 2], p[n - 1]);
                let src = self
                    .suite
                    .owner(word)
                    .ok_or_else(|| Error::Input(format!("token {word} belongs to no language")))?;
                let tgt = self
                    .suite
                    .languages
                    .iter()
                    .find(|l| l.tag == tag)
                    .ok_or_else(|| Error::Input(format!("token {tag} is not a language tag")))?;
                let concept = src.concept(word).expect("owner knows the token");
                let mut logits = vec![0.0f32; self.vocab_size];
                logits[tgt.token(concept) as usize] = 1.0;
                Ok(logits)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MacroF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: Task,
    pub direction: String,
    pub metric: Metric,
    pub value: f64,
    pub n_items: usize,
    pub checkpoint: String,
    pub eval_seed: u64,
}

/// Argmax with ties broken uniformly at random; the tie stream is seeded so
/// results are reproducible.
fn greedy(logits: &[f32], rng: &mut ChaCha8Rng) -> u32 {
    let best = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let ties: Vec<usize> = logits
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == best)
        .map(|(i, _)| i)
        .collect();
    if ties.len() == 1 {
        ties[0] as u32
    } else {
        ties[rng.random_range(0..ties.len())] as u32
    }
}

fn decode(model: &dyn Predictor, set: &EvalSet, context_len: Option<usize>) -> Result<Vec<u32>> {
    if set.items.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    if let Some(limit) = context_len {
        if let Some(it) = set.items.iter().find(|it| it.prompt.len() > limit) {
            return Err(Error::Input(format!(
                "prompt of {} tokens exceeds context_len {limit}",
                it.prompt.len()
            )));
        }
    }
    let prompts: Vec<Vec<u32>> = set.items.iter().map(|it| it.prompt.clone()).collect();
    let logits = model.next_logits(&prompts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(set.seed ^ 0x71e_b8ea4);
    Ok(logits.iter().map(|row| greedy(row, &mut rng)).collect())
}

pub fn eval_word_translation(
    model: &dyn Predictor,
    set: &EvalSet,
    context_len: Option<usize>,
    checkpoint: &str,
) -> Result<EvalResult> {
    if set.task != Task::WordTranslation {
        return Err(Error::Input("expected a word-translation evaluation set".into()));
    }
    let preds = decode(model, set, context_len)?;
    let hits = preds.iter().zip(&set.items).filter(|(p, it)| **p == it.gold).count();
    Ok(EvalResult {
        task: set.task,
        direction: set.direction(),
        metric: Metric::Accuracy,
        value: hits as f64 / set.items.len() as f64,
        n_items: set.items.len(),
        checkpoint: checkpoint.to_string(),
        eval_seed: set.seed,
    })
}

pub fn eval_classification(
    model: &dyn Predictor,
    set: &EvalSet,
    context_len: Option<usize>,
    checkpoint: &str,
) -> Result<EvalResult> {
    if set.task != Task::Classification {
        return Err(Error::Input("expected a classification evaluation set".into()));
    }
    let preds = decode(model, set, context_len)?;
    let golds: Vec<u32> = set.items.iter().map(|it| it.gold).collect();
    Ok(EvalResult {
        task: set.task,
        direction: set.direction(),
        metric: Metric::MacroF1,
        value: macro_f1(&preds, &golds, &set.labels),
        n_items: set.items.len(),
        checkpoint: checkpoint.to_string(),
        eval_seed: set.seed,
    })
}

/// Dispatch on the set's task.
pub fn evaluate(model: &dyn Predictor, set: &EvalSet, context_len: Option<usize>, checkpoint: &str) -> Result<EvalResult> {
    match set.task {
        Task::WordTranslation => eval_word_translation(model, set, context_len, checkpoint),
        Task::Classification => eval_classification(model, set, context_len, checkpoint),
    }
}

/// Unweighted mean of per-class F1. Predictions outside `labels` are errors
/// for every class; a class never predicted scores F1 = 0.
pub fn macro_f1(preds: &[u32], golds: &[u32], labels: &[u32]) -> f64 {
    debug_assert_eq!(labels.len(), NUM_CLASSES);
    let mut total = 0.0;
    for &label in labels {
        let tp = preds.iter().zip(golds).filter(|(p, g)| **p == label && **g == label).count() as f64;
        let predicted = preds.iter().filter(|&&p| p == label).count() as f64;
        let actual = golds.iter().filter(|&&g| g == label).count() as f64;
        if predicted == 0.0 || actual == 0.0 || tp == 0.0 {
            continue;
        }
        let p = tp / predicted;
        let r = tp / actual;
        total += 2.0 * p * r / (p + r);
    }
    total / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation; 0 when undefined.
    pub std: f64,
    pub std_defined: bool,
    pub n: usize,
}

/// Mean and sample standard deviation over runs that share task, direction and checkpoint.
pub fn aggregate_runs(results: &[EvalResult]) -> Result<Aggregate> {
    let first = results.first().ok_or_else(|| Error::Input("no results to aggregate".into()))?;
    if results
        .iter()
        .any(|r| r.task != first.task || r.direction != first.direction || r.checkpoint != first.checkpoint)
    {
        return Err(Error::Input("results mix task, direction or checkpoint".into()));
    }
    let values: Vec<f64> = results.iter().map(|r| r.value).collect();
    Ok(mean_std(&values))
}

pub fn mean_std(values: &[f64]) -> Aggregate {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Aggregate {
            mean,
            std: 0.0,
            std_defined: false,
            n,
        };
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Aggregate {
        mean,
        std: var.sqrt(),
        std_defined: true,
        n,
    }
}
