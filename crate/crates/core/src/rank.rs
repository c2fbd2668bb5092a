//! Layer-importance scores: diagonal Fisher, heavy-tail spectral alpha, and
//! language-specific neuron counts.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::{Example, Group, ModelState, Projection, Reduction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    Fim,
    Htsr,
    Lsn,
}

impl RankMethod {
    pub fn name(self) -> &'static str {
        match self {
            RankMethod::Fim => "fim",
            RankMethod::Htsr => "htsr",
            RankMethod::Lsn => "lsn",
        }
    }
}

impl std::str::FromStr for RankMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fim" => Ok(RankMethod::Fim),
            "htsr" => Ok(RankMethod::Htsr),
            "lsn" => Ok(RankMethod::Lsn),
            other => Err(Error::Config(format!("unknown ranking method `{other}`"))),
        }
    }
}

/// One score per transformer layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub method: RankMethod,
    #[serde(rename = "L")]
    pub n_layers: usize,
    pub values: Vec<f64>,
    pub metadata: BTreeMap<String, Value>,
}

impl LayerScore {
    fn new(method: RankMethod, values: Vec<f64>, metadata: BTreeMap<String, Value>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Consistency(format!("{} score of layer {i} is not finite", method.name())));
        }
        Ok(LayerScore {
            method,
            n_layers: values.len(),
            values,
            metadata,
        })
    }
}

// ---------------------------------------------------------------- Fisher

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FimMode {
    /// Targets come from the data.
    Empirical,
    /// Targets are drawn from the model's own predictive distribution.
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FimConfig {
    pub sample_size: usize,
    pub mode: FimMode,
    pub aggregation: Aggregation,
    /// Seeds row sampling and, in sampled mode, target draws.
    pub seed: u64,
}

impl Default for FimConfig {
    fn default() -> Self {
        FimConfig {
            sample_size: 250,
            mode: FimMode::Empirical,
            aggregation: Aggregation::Sum,
            seed: 42,
        }
    }
}

/// A model whose per-sample log-likelihood gradient is available.
pub trait FisherModel {
    type Sample;

    fn n_tensors(&self) -> usize;

    /// Gradient of `log p(y | x)` per tensor. With `draw`, `y` is sampled from
    /// the model; otherwise the sample's own target is used.
    fn log_likelihood_grad(&self, sample: &Self::Sample, draw: Option<&mut dyn RngCore>) -> Result<Vec<Vec<f64>>>;
}

/// Mean over samples of the squared log-likelihood gradient, per tensor element.
pub fn diagonal_fisher<M: FisherModel>(
    model: &M,
    samples: &[M::Sample],
    mode: FimMode,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if samples.is_empty() {
        return Err(Error::Input("Fisher estimate needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc: Vec<Vec<f64>> = Vec::new();
    for s in samples {
        let g = match mode {
            FimMode::Empirical => model.log_likelihood_grad(s, None)?,
            FimMode::Sampled => model.log_likelihood_grad(s, Some(&mut rng))?,
        };
        if acc.is_empty() {
            acc = g.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        for (a, t) in acc.iter_mut().zip(&g) {
            for (x, v) in a.iter_mut().zip(t) {
                *x += v * v;
            }
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for a in acc.iter_mut() {
        for x in a.iter_mut() {
            *x *= inv;
        }
    }
    Ok(acc)
}

/// `p(y=1) = sigmoid(theta)`; samples are observed labels.
#[derive(Clone, Debug)]
pub struct SigmoidModel {
    pub theta: f64,
}

impl FisherModel for SigmoidModel {
    type Sample = bool;

    fn n_tensors(&self) -> usize {
        1
    }

    fn log_likelihood_grad(&self, y: &bool, draw: Option<&mut dyn RngCore>) -> Result<Vec<Vec<f64>>> {
        let p = 1.0 / (1.0 + (-self.theta).exp());
        let y = match draw {
            Some(rng) => rng.random_bool(p),
            None => *y,
        };
        Ok(vec![vec![if y { 1.0 - p } else { -p }]])
    }
}

impl FisherModel for ModelState<f64> {
    type Sample = Example;

    fn n_tensors(&self) -> usize {
        self.params.len()
    }

    fn log_likelihood_grad(&self, ex: &Example, draw: Option<&mut dyn RngCore>) -> Result<Vec<Vec<f64>>> {
        let batch = std::slice::from_ref(ex);
        let (_, grads) = match draw {
            None => self.loss_and_grads(batch, Reduction::Sum, None)?,
            Some(rng) => {
                let n = ex.tokens.len();
                if n < 2 {
                    return Err(Error::Input("example needs at least two tokens".into()));
                }
                let logits = self.forward_logits(&ex.tokens[..n - 1])?;
                let mut targets = ex.tokens[1..].to_vec();
                for (t, y) in targets.iter_mut().enumerate() {
                    if !ex.loss_mask[t + 1] {
                        continue;
                    }
                    let row = logits.row(t);
                    let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = row.iter().map(|v| (v - top).exp()).collect();
                    let dist = WeightedIndex::new(&w).map_err(|e| Error::Consistency(e.to_string()))?;
                    *y = dist.sample(rng) as u32;
                }
                self.loss_and_grads_for_targets(batch, &[targets], Reduction::Sum, None)?
            }
        };
        // The loss is the negative log-likelihood; the sign vanishes once squared
        // but is restored so callers get the true score function.
        Ok(grads
            .grads
            .into_iter()
            .map(|g| g.expect("all gradients requested").into_iter().map(|v| -v).collect())
            .collect())
    }
}

/// Seeded sample of `n` rows without replacement (all rows when fewer exist).
pub fn sample_rows(rows: &[Example], n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, rows.len(), n.min(rows.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| rows[i].clone()).collect()
}

/// Per-layer diagonal Fisher scores over `rows` (already sampled).
///
/// Embedding and head totals are reported in the metadata only.
pub fn fim_layer_scores(model: &ModelState<f32>, rows: &[Example], cfg: &FimConfig) -> Result<LayerScore> {
    if cfg.sample_size == 0 {
        return Err(Error::Config("FIM sample size must be at least 1".into()));
    }
    if rows.is_empty() {
        return Err(Error::Input("FIM sample is empty".into()));
    }
    let m64: ModelState<f64> = model.cast();
    let fisher = diagonal_fisher(&m64, rows, cfg.mode, cfg.seed)?;
    let l = model.config.n_layers;
    let mut sums = vec![0.0; l];
    let mut counts = vec![0usize; l];
    let (mut embed, mut head) = (0.0, 0.0);
    for (p, f) in model.params.iter().zip(&fisher) {
        let s: f64 = f.iter().sum();
        match p.group {
            Group::Layer(i) => {
                sums[i] += s;
                counts[i] += f.len();
            }
            Group::Embedding => embed += s,
            Group::LmHead => head += s,
        }
    }
    let values = match cfg.aggregation {
        Aggregation::Sum => sums,
        Aggregation::Mean => sums.iter().zip(&counts).map(|(s, &c)| s / c.max(1) as f64).collect(),
    };
    let mut meta = BTreeMap::new();
    meta.insert("sample_size".into(), json!(rows.len()));
    meta.insert("mode".into(), json!(cfg.mode));
    meta.insert("aggregation".into(), json!(cfg.aggregation));
    meta.insert("seed".into(), json!(cfg.seed));
    meta.insert("embedding".into(), json!(embed));
    meta.insert("lm_head".into(), json!(head));
    LayerScore::new(RankMethod::Fim, values, meta)
}

// ---------------------------------------------------------------- Hill / HT-SR

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HillConfig {
    pub tail_fraction: f64,
}

impl Default for HillConfig {
    fn default() -> Self {
        HillConfig { tail_fraction: 0.5 }
    }
}

/// Tail exponent with an explicit tail size: `1 + k / sum ln(l_i / l_{k+1})`
/// over the `k` largest values.
pub fn hill_alpha_k(eigenvalues: &[f64], k_tail: usize) -> Result<f64> {
    if eigenvalues.len() < 2 {
        return Err(Error::Input("Hill estimator needs at least two eigenvalues".into()));
    }
    if let Some(v) = eigenvalues.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Input(format!("eigenvalue {v} is not strictly positive and finite")));
    }
    if k_tail == 0 || k_tail >= eigenvalues.len() {
        return Err(Error::Config(format!(
            "tail size {k_tail} must be in 1..{}",
            eigenvalues.len()
        )));
    }
    let mut sorted = eigenvalues.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[k_tail];
    let denom: f64 = sorted[..k_tail].iter().map(|v| (v / threshold).ln()).sum();
    if denom <= 0.0 {
        return Err(Error::DegenerateSpectrum(format!(
            "the {k_tail} tail eigenvalues all equal the threshold {threshold}"
        )));
    }
    Ok(1.0 + k_tail as f64 / denom)
}

pub fn hill_alpha(eigenvalues: &[f64], cfg: &HillConfig) -> Result<f64> {
    if !(cfg.tail_fraction > 0.0 && cfg.tail_fraction < 1.0) {
        return Err(Error::Config(format!("tail fraction {} outside (0, 1)", cfg.tail_fraction)));
    }
    let k = ((cfg.tail_fraction * eigenvalues.len() as f64).floor() as usize).max(1);
    hill_alpha_k(eigenvalues, k)
}

/// Nonzero spectrum of `W^T W / d_out` for a row-major `d_out x d_in` matrix.
///
/// Uses whichever Gram matrix is smaller; both share their nonzero eigenvalues,
/// and the larger one would add `|d_out - d_in|` exact zeros.
pub fn correlation_spectrum(w: &[f64], d_out: usize, d_in: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(d_out, d_in, w);
    let gram = if d_out >= d_in { m.transpose() * &m } else { &m * m.transpose() };
    let gram = gram / d_out as f64;
    let mut eig: Vec<f64> = SymmetricEigen::new(gram).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig
}

/// Per-layer alpha, averaged over the attention and feed-forward projections.
pub fn htsr_layer_scores(model: &ModelState<f32>, cfg: &HillConfig) -> Result<LayerScore> {
    let mut values = Vec::with_capacity(model.config.n_layers);
    let mut per_matrix = BTreeMap::new();
    for layer in 0..model.config.n_layers {
        let mut alphas = Vec::new();
        for proj in Projection::ALL {
            let p = model.layer_param(layer, proj.slot());
            let w: Vec<f64> = p.data.iter().map(|&v| v as f64).collect();
            let eig = correlation_spectrum(&w, p.rows, p.cols);
            let a = hill_alpha(&eig, cfg).map_err(|e| match e {
                Error::DegenerateSpectrum(m) => Error::DegenerateSpectrum(format!("{}: {m}", p.name)),
                Error::Input(m) => Error::Input(format!("{}: {m}", p.name)),
                other => other,
            })?;
            per_matrix.insert(p.name.clone(), a);
            alphas.push(a);
        }
        values.push(alphas.iter().sum::<f64>() / alphas.len() as f64);
    }
    let mut meta = BTreeMap::new();
    meta.insert("tail_fraction".into(), json!(cfg.tail_fraction));
    meta.insert("matrix_alpha".into(), json!(per_matrix));
    LayerScore::new(RankMethod::Htsr, values, meta)
}

// ---------------------------------------------------------------- language-specific neurons

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsnConfig {
    pub tau_high: f64,
    pub tau_low: f64,
    /// Minimum token positions per language corpus.
    pub min_tokens: usize,
}

impl Default for LsnConfig {
    fn default() -> Self {
        LsnConfig {
            tau_high: 0.9,
            tau_low: 0.1,
            min_tokens: 200,
        }
    }
}

/// Fraction of positions where each feed-forward unit is active (`> 0`), per layer.
pub fn activation_probabilities(model: &ModelState<f32>, corpus: &[Vec<u32>]) -> Result<(Vec<Vec<f64>>, usize)> {
    let l = model.config.n_layers;
    let f = model.config.d_ffn;
    let mut counts = vec![vec![0usize; f]; l];
    let mut positions = 0usize;
    for seq in corpus {
        if seq.is_empty() {
            continue;
        }
        let acts = model.ffn_activations(seq)?;
        positions += seq.len();
        for (layer, m) in acts.iter().enumerate() {
            for r in 0..m.rows {
                for (c, &v) in m.row(r).iter().enumerate() {
                    if v > 0.0 {
                        counts[layer][c] += 1;
                    }
                }
            }
        }
    }
    let probs = counts
        .into_iter()
        .map(|row| row.into_iter().map(|c| c as f64 / positions.max(1) as f64).collect())
        .collect();
    Ok((probs, positions))
}

/// Units with activation probability `>= tau_high` on the target language and
/// `<= tau_low` on every other language, counted per layer.
pub fn lsn_layer_counts(
    model: &ModelState<f32>,
    corpora: &[(String, Vec<Vec<u32>>)],
    target: &str,
    cfg: &LsnConfig,
) -> Result<LayerScore> {
    if !(0.0 <= cfg.tau_low && cfg.tau_low < cfg.tau_high && cfg.tau_high <= 1.0) {
        return Err(Error::Config(format!(
            "thresholds need 0 <= tau_low < tau_high <= 1, got {} and {}",
            cfg.tau_low, cfg.tau_high
        )));
    }
    if !corpora.iter().any(|(name, _)| name == target) {
        return Err(Error::Input(format!("no monolingual corpus for target language `{target}`")));
    }
    let mut probs = Vec::new();
    for (name, corpus) in corpora {
        let tokens: usize = corpus.iter().map(|s| s.len()).sum();
        if tokens < cfg.min_tokens {
            return Err(Error::Input(format!(
                "corpus for language `{name}` has {tokens} tokens, need at least {}",
                cfg.min_tokens
            )));
        }
        probs.push((name.as_str(), activation_probabilities(model, corpus)?.0));
    }
    let (_, tp) = probs.iter().find(|(n, _)| *n == target).expect("checked above");
    let mut values = Vec::with_capacity(model.config.n_layers);
    for layer in 0..model.config.n_layers {
        let count = (0..model.config.d_ffn)
            .filter(|&u| {
                tp[layer][u] >= cfg.tau_high
                    && probs
                        .iter()
                        .filter(|(n, _)| *n != target)
                        .all(|(_, p)| p[layer][u] <= cfg.tau_low)
            })
            .count();
        values.push(count as f64);
    }
    let mut meta = BTreeMap::new();
    meta.insert("target".into(), json!(target));
    meta.insert("tau_high".into(), json!(cfg.tau_high));
    meta.insert("tau_low".into(), json!(cfg.tau_low));
    meta.insert(
        "languages".into(),
        json!(corpora.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>()),
    );
    LayerScore::new(RankMethod::Lsn, values, meta)
}
