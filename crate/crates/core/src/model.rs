//! Micro decoder-only transformer: pre-LayerNorm blocks, causal multi-head
//! attention, GELU feed-forward, untied embedding and LM head.
//!
//! All parameters live in one flat list. Each tensor belongs to exactly one
//! [`Group`]: a transformer layer, the embedding, or the LM head. Low-rank
//! adapters are appended to the same list after the base tensors.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::TrainPlan;
use crate::scalar::{matmul_dy_w, matmul_dyt_x, matmul_plain, matmul_wt, Scalar};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Default desk-scale profile.
    pub fn toy() -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            vocab_size: 1024,
            context_len: 64,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model={} is not divisible by n_heads={}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::Config("n_layers must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Embedding,
    Layer(usize),
    LmHead,
}

/// Position of a tensor inside a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Ln1W,
    Ln1B,
    Wq,
    Bq,
    Wk,
    Bk,
    Wv,
    Bv,
    Wo,
    Bo,
    Ln2W,
    Ln2B,
    W1,
    B1,
    W2,
    B2,
}

pub const LAYER_SLOTS: usize = 16;

const SLOT_NAMES: [&str; LAYER_SLOTS] = [
    "ln1.weight",
    "ln1.bias",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ln2.weight",
    "ln2.bias",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
];

/// Projection matrices that can carry adapters and feed the spectral ranker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Wq,
    Wk,
    Wv,
    Wo,
    W1,
    W2,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Wq,
        Projection::Wk,
        Projection::Wv,
        Projection::Wo,
        Projection::W1,
        Projection::W2,
    ];

    pub fn slot(self) -> Slot {
        match self {
            Projection::Wq => Slot::Wq,
            Projection::Wk => Slot::Wk,
            Projection::Wv => Slot::Wv,
            Projection::Wo => Slot::Wo,
            Projection::W1 => Slot::W1,
            Projection::W2 => Slot::W2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub group: Group,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Param<F> {
    fn zeros(name: String, group: Group, rows: usize, cols: usize) -> Self {
        Param {
            name,
            group,
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            scale: 2.0,
            targets: Projection::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraState {
    pub config: LoraConfig,
    /// Indexed by base parameter index: `(a, b)` adapter tensor indices.
    adapter_of: Vec<Option<(usize, usize)>>,
}

impl LoraState {
    pub fn adapter_for(&self, base: usize) -> Option<(usize, usize)> {
        self.adapter_of.get(base).copied().flatten()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<F = f32> {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: Vec<Param<F>>,
    n_base: usize,
    pub lora: Option<LoraState>,
}

/// Token sequence plus per-token loss mask; `loss_mask[t]` marks token `t` as a
/// prediction target (from the prefix `..t`). `loss_mask[0]` is ignored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl Example {
    pub fn full(tokens: Vec<u32>) -> Self {
        let loss_mask = vec![true; tokens.len()];
        Example { tokens, loss_mask }
    }

    pub fn targets(&self) -> usize {
        self.loss_mask.iter().skip(1).filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Copy> Matrix<F> {
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Gradients aligned with `ModelState::params`; `None` where not requested.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub names: Vec<String>,
    pub grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, name: &str) -> Option<&[F]> {
        let i = self.names.iter().position(|n| n == name)?;
        self.grads[i].as_deref()
    }

    fn slot(&mut self, idx: usize) -> Option<&mut Vec<F>> {
        self.grads[idx].as_mut()
    }
}

/// Set of trainable parameter names, plus the matching index mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableSet {
    pub names: BTreeSet<String>,
    pub mask: Vec<bool>,
}

impl TrainableSet {
    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }
}

pub fn layer_param_index(layer: usize, slot: Slot) -> usize {
    2 + layer * LAYER_SLOTS + slot as usize
}

const EMB_TOK: usize = 0;
const EMB_POS: usize = 1;

impl<F: Scalar> ModelState<F> {
    /// Deterministic seeded initialization: scaled normal matrices, zero biases, unit LayerNorm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_ffn;
        let l = config.n_layers;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();

        let normal = |p: &mut Param<F>, std: f64, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, std).expect("positive std");
            for v in p.data.iter_mut() {
                *v = F::of(dist.sample(rng));
            }
        };

        let mut tok = Param::zeros("embed.tok".into(), Group::Embedding, config.vocab_size, d);
        normal(&mut tok, INIT_STD, &mut rng);
        params.push(tok);
        let mut pos = Param::zeros("embed.pos".into(), Group::Embedding, config.context_len, d);
        normal(&mut pos, INIT_STD / 2.0, &mut rng);
        params.push(pos);

        let resid_std = INIT_STD / (2.0 * l as f64).sqrt();
        for layer in 0..l {
            let g = Group::Layer(layer);
            for (s, slot_name) in SLOT_NAMES.iter().enumerate() {
                let name = format!("layers.{layer}.{slot_name}");
                let (rows, cols) = match s {
                    s if s == Slot::Wq as usize
                        || s == Slot::Wk as usize
                        || s == Slot::Wv as usize
                        || s == Slot::Wo as usize =>
                    {
                        (d, d)
                    }
                    s if s == Slot::W1 as usize => (f, d),
                    s if s == Slot::B1 as usize => (1, f),
                    s if s == Slot::W2 as usize => (d, f),
                    _ => (1, d),
                };
                let mut p = Param::zeros(name, g, rows, cols);
                if s == Slot::Ln1W as usize || s == Slot::Ln2W as usize {
                    p.data.iter_mut().for_each(|v| *v = F::one());
                } else if rows > 1 {
                    let std = if s == Slot::Wo as usize || s == Slot::W2 as usize {
                        resid_std
                    } else {
                        INIT_STD
                    };
                    normal(&mut p, std, &mut rng);
                }
                params.push(p);
            }
        }

        let mut lnf = Param::zeros("final_ln.weight".into(), Group::LmHead, 1, d);
        lnf.data.iter_mut().for_each(|v| *v = F::one());
        params.push(lnf);
        params.push(Param::zeros("final_ln.bias".into(), Group::LmHead, 1, d));
        if !config.tie_embeddings {
            let mut head = Param::zeros("lm_head.weight".into(), Group::LmHead, config.vocab_size, d);
            normal(&mut head, INIT_STD, &mut rng);
            params.push(head);
        }
        params.push(Param::zeros("lm_head.bias".into(), Group::LmHead, 1, config.vocab_size));

        let n_base = params.len();
        Ok(ModelState {
            config: config.clone(),
            seed,
            params,
            n_base,
            lora: None,
        })
    }

    /// Reassemble a model from stored tensors, checking names and shapes against the layout.
    pub fn from_parts(
        config: ModelConfig,
        seed: u64,
        params: Vec<Param<F>>,
        lora: Option<LoraConfig>,
        lora_layers: &[usize],
    ) -> Result<Self> {
        config.validate()?;
        let mut template = ModelState::<F>::init(&config, 0)?;
        if let Some(cfg) = &lora {
            let plan = TrainPlan::new("restore", lora_layers.iter().copied(), false, false);
            template.attach_lora(cfg, &plan)?;
        }
        if template.params.len() != params.len() {
            return Err(Error::Consistency(format!(
                "expected {} tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (t, p) in template.params.iter().zip(&params) {
            if t.name != p.name || t.rows != p.rows || t.cols != p.cols || t.group != p.group {
                return Err(Error::Consistency(format!(
                    "tensor `{}` [{}x{}] does not match expected `{}` [{}x{}]",
                    p.name, p.rows, p.cols, t.name, t.rows, t.cols
                )));
            }
        }
        template.params = params;
        template.seed = seed;
        Ok(template)
    }

    pub fn n_base_params(&self) -> usize {
        self.n_base
    }

    pub fn param(&self, name: &str) -> Option<&Param<F>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn layer_param(&self, layer: usize, slot: Slot) -> &Param<F> {
        &self.params[layer_param_index(layer, slot)]
    }

    pub fn layer_param_mut(&mut self, layer: usize, slot: Slot) -> &mut Param<F> {
        &mut self.params[layer_param_index(layer, slot)]
    }

    fn head_base(&self) -> usize {
        2 + self.config.n_layers * LAYER_SLOTS
    }

    fn head_weight_index(&self) -> usize {
        if self.config.tie_embeddings {
            EMB_TOK
        } else {
            self.head_base() + 2
        }
    }

    fn head_bias_index(&self) -> usize {
        self.n_base - 1
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Cast every tensor to another precision.
    pub fn cast<G: Scalar>(&self) -> ModelState<G> {
        ModelState {
            config: self.config.clone(),
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    rows: p.rows,
                    cols: p.cols,
                    data: p.data.iter().map(|v| G::of(v.as_f64())).collect(),
                })
                .collect(),
            n_base: self.n_base,
            lora: self.lora.clone(),
        }
    }

    /// Layers carrying adapters, in ascending order.
    pub fn adapted_layers(&self) -> Vec<usize> {
        let mut layers: BTreeSet<usize> = BTreeSet::new();
        for p in &self.params[self.n_base..] {
            if let Group::Layer(l) = p.group {
                layers.insert(l);
            }
        }
        layers.into_iter().collect()
    }

    /// Attach low-rank adapters to the target projections of the plan's layers.
    ///
    /// `A` is drawn from a normal with std `1/sqrt(d_in)`, `B` starts at zero so
    /// outputs are unchanged.
    pub fn attach_lora(&mut self, cfg: &LoraConfig, plan: &TrainPlan) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::State("adapters are already attached".into()));
        }
        plan.validate(self.config.n_layers)?;
        if cfg.rank == 0 || cfg.rank >= self.config.d_model {
            return Err(Error::Config(format!(
                "adapter rank {} must be in [1, d_model={})",
                cfg.rank, self.config.d_model
            )));
        }
        if !(cfg.scale > 0.0) {
            return Err(Error::Config("adapter scale must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x4c6f_5241);
        let mut adapter_of = vec![None; self.n_base];
        for &layer in &plan.trainable_layers {
            for proj in Projection::ALL {
                if !cfg.targets.contains(&proj) {
                    continue;
                }
                let base = layer_param_index(layer, proj.slot());
                let (d_out, d_in) = (self.params[base].rows, self.params[base].cols);
                let name = self.params[base].name.clone();
                let mut a = Param::zeros(format!("{name}.lora_a"), Group::Layer(layer), d_in, cfg.rank);
                let dist = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("positive std");
                for v in a.data.iter_mut() {
                    *v = F::of(dist.sample(&mut rng));
                }
                let b = Param::zeros(format!("{name}.lora_b"), Group::Layer(layer), cfg.rank, d_out);
                let ai = self.params.len();
                self.params.push(a);
                self.params.push(b);
                adapter_of[base] = Some((ai, ai + 1));
            }
        }
        self.lora = Some(LoraState {
            config: cfg.clone(),
            adapter_of,
        });
        Ok(())
    }

    /// Names of trainable parameters under a plan.
    ///
    /// Without adapters, layer membership selects whole layers. With adapters
    /// attached, base weights of layers are frozen and only the adapter
    /// tensors of plan layers train. Embedding and head follow the plan flags.
    pub fn apply_train_plan(&self, plan: &TrainPlan) -> Result<TrainableSet> {
        plan.validate(self.config.n_layers)?;
        let mut mask = vec![false; self.params.len()];
        for (i, p) in self.params.iter().enumerate() {
            let is_adapter = i >= self.n_base;
            mask[i] = match p.group {
                Group::Embedding => plan.train_embedding,
                Group::LmHead => plan.train_lm_head,
                Group::Layer(l) => {
                    plan.trainable_layers.contains(&l) && (self.lora.is_none() || is_adapter)
                }
            };
        }
        if self.config.tie_embeddings && plan.train_lm_head {
            mask[EMB_TOK] = true;
        }
        let names = self
            .params
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| p.name.clone())
            .collect();
        Ok(TrainableSet { names, mask })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds context_len {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {t} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Next-token logits for every position of one sequence.
    pub fn forward_logits(&self, tokens: &[u32]) -> Result<Matrix<F>> {
        self.check_tokens(tokens)?;
        let packed = Packed::new(&[tokens]);
        let (hf, _) = self.forward_core(&packed, false);
        let rows: Vec<usize> = (0..packed.n).collect();
        Ok(self.head_rows(&hf, &rows))
    }

    /// Logits at the final position of each prompt.
    pub fn last_logits(&self, prompts: &[Vec<u32>]) -> Result<Vec<Vec<F>>> {
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(32) {
            for p in chunk {
                self.check_tokens(p)?;
            }
            let seqs: Vec<&[u32]> = chunk.iter().map(|p| p.as_slice()).collect();
            let packed = Packed::new(&seqs);
            let (hf, _) = self.forward_core(&packed, false);
            let rows: Vec<usize> = packed.seqs.iter().map(|&(s, len)| s + len - 1).collect();
            let logits = self.head_rows(&hf, &rows);
            out.extend((0..rows.len()).map(|r| logits.row(r).to_vec()));
        }
        Ok(out)
    }

    /// Post-GELU feed-forward activations, one `positions x d_ffn` matrix per layer.
    pub fn ffn_activations(&self, tokens: &[u32]) -> Result<Vec<Matrix<F>>> {
        self.check_tokens(tokens)?;
        let packed = Packed::new(&[tokens]);
        let (_, cache) = self.forward_core(&packed, true);
        Ok(cache
            .layers
            .into_iter()
            .map(|c| Matrix {
                rows: packed.n,
                cols: self.config.d_ffn,
                data: c.act,
            })
            .collect())
    }

    fn head_rows(&self, hf: &[F], rows: &[usize]) -> Matrix<F> {
        let d = self.config.d_model;
        let v = self.config.vocab_size;
        let mut sel = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            sel.extend_from_slice(&hf[r * d..(r + 1) * d]);
        }
        let mut logits = vec![F::zero(); rows.len() * v];
        matmul_wt(&sel, &self.params[self.head_weight_index()].data, &mut logits, rows.len(), d, v, false);
        let bias = &self.params[self.head_bias_index()].data;
        for row in logits.chunks_mut(v) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x = *x + *b;
            }
        }
        Matrix {
            rows: rows.len(),
            cols: v,
            data: logits,
        }
    }

    fn linear_fwd(&self, w: usize, b: usize, x: &[F], n: usize) -> (Vec<F>, Option<Vec<F>>) {
        let (d_out, d_in) = (self.params[w].rows, self.params[w].cols);
        let mut y = vec![F::zero(); n * d_out];
        matmul_wt(x, &self.params[w].data, &mut y, n, d_in, d_out, false);
        let bias = &self.params[b].data;
        for row in y.chunks_mut(d_out) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v = *v + *bb;
            }
        }
        let xa = self.lora.as_ref().and_then(|l| l.adapter_for(w)).map(|(ai, bi)| {
            let r = self.params[ai].cols;
            let scale = F::of(self.lora.as_ref().unwrap().config.scale);
            let mut xa = vec![F::zero(); n * r];
            matmul_plain(x, &self.params[ai].data, &mut xa, n, d_in, r, F::one(), false);
            matmul_plain(&xa, &self.params[bi].data, &mut y, n, r, d_out, scale, true);
            xa
        });
        (y, xa)
    }

    #[allow(clippy::too_many_arguments)]
    fn linear_bwd(
        &self,
        w: usize,
        b: usize,
        x: &[F],
        xa: Option<&[F]>,
        dy: &[F],
        n: usize,
        grads: &mut Gradients<F>,
        dx: Option<&mut [F]>,
    ) {
        let (d_out, d_in) = (self.params[w].rows, self.params[w].cols);
        if let Some(g) = grads.slot(w) {
            matmul_dyt_x(dy, x, g, n, d_in, d_out);
        }
        if let Some(g) = grads.slot(b) {
            for row in dy.chunks(d_out) {
                for (gv, dv) in g.iter_mut().zip(row) {
                    *gv = *gv + *dv;
                }
            }
        }
        let adapter = self.lora.as_ref().and_then(|l| l.adapter_for(w));
        let mut dxa_buf = None;
        if let (Some((ai, bi)), Some(xa)) = (adapter, xa) {
            let r = self.params[ai].cols;
            let scale = F::of(self.lora.as_ref().unwrap().config.scale);
            if let Some(gb) = grads.slot(bi) {
                // dB += s * xa^T dy
                F::gemm(r, n, d_out, scale, xa, 1, r as isize, dy, d_out as isize, 1, F::one(), gb, d_out as isize, 1);
            }
            let need_dxa = grads.grads[ai].is_some() || dx.is_some();
            if need_dxa {
                // dxa = s * dy B^T
                let mut dxa = vec![F::zero(); n * r];
                F::gemm(
                    n,
                    d_out,
                    r,
                    scale,
                    dy,
                    d_out as isize,
                    1,
                    &self.params[bi].data,
                    1,
                    d_out as isize,
                    F::zero(),
                    &mut dxa,
                    r as isize,
                    1,
                );
                if let Some(ga) = grads.slot(ai) {
                    // dA += x^T dxa
                    F::gemm(d_in, n, r, F::one(), x, 1, d_in as isize, &dxa, r as isize, 1, F::one(), ga, r as isize, 1);
                }
                dxa_buf = Some((dxa, ai, r));
            }
        }
        if let Some(dx) = dx {
            matmul_dy_w(dy, &self.params[w].data, dx, n, d_in, d_out, true);
            if let Some((dxa, ai, r)) = dxa_buf {
                // dx += dxa A^T
                F::gemm(n, r, d_in, F::one(), &dxa, r as isize, 1, &self.params[ai].data, 1, r as isize, F::one(), dx, d_in as isize, 1);
            }
        }
    }

    fn forward_core(&self, packed: &Packed, keep: bool) -> (Vec<F>, Cache<F>) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let n = packed.n;
        let tok = &self.params[EMB_TOK].data;
        let pos = &self.params[EMB_POS].data;
        let mut x = vec![F::zero(); n * d];
        for r in 0..n {
            let t = packed.tokens[r] as usize;
            let p = packed.pos[r];
            for j in 0..d {
                x[r * d + j] = tok[t * d + j] + pos[p * d + j];
            }
        }
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let (x_next, c) = self.block_fwd(l, x, packed);
            x = x_next;
            if keep {
                layers.push(c);
            }
        }
        let lnf_w = &self.params[self.head_base()].data;
        let lnf_b = &self.params[self.head_base() + 1].data;
        let (hf, lnf) = layer_norm(&x, lnf_w, lnf_b, n, d);
        (hf, Cache { layers, lnf })
    }

    fn block_fwd(&self, l: usize, x_in: Vec<F>, packed: &Packed) -> (Vec<F>, LayerCache<F>) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let f = cfg.d_ffn;
        let n = packed.n;
        let idx = |s: Slot| layer_param_index(l, s);
        let (h1, ln1) = layer_norm(&x_in, &self.params[idx(Slot::Ln1W)].data, &self.params[idx(Slot::Ln1B)].data, n, d);
        let (q, q_a) = self.linear_fwd(idx(Slot::Wq), idx(Slot::Bq), &h1, n);
        let (k, k_a) = self.linear_fwd(idx(Slot::Wk), idx(Slot::Bk), &h1, n);
        let (v, v_a) = self.linear_fwd(idx(Slot::Wv), idx(Slot::Bv), &h1, n);
        let (o, probs) = attention_fwd(&q, &k, &v, packed, cfg.n_heads, d);
        let (attn, o_a) = self.linear_fwd(idx(Slot::Wo), idx(Slot::Bo), &o, n);
        let mut x_mid = x_in.clone();
        for (a, b) in x_mid.iter_mut().zip(&attn) {
            *a = *a + *b;
        }
        let (h2, ln2) = layer_norm(&x_mid, &self.params[idx(Slot::Ln2W)].data, &self.params[idx(Slot::Ln2B)].data, n, d);
        let (u, u_a) = self.linear_fwd(idx(Slot::W1), idx(Slot::B1), &h2, n);
        let act: Vec<F> = u.iter().map(|&z| gelu(z)).collect();
        let (ff, f_a) = self.linear_fwd(idx(Slot::W2), idx(Slot::B2), &act, n);
        debug_assert_eq!(ff.len(), n * d);
        debug_assert_eq!(act.len(), n * f);
        let mut x_out = x_mid.clone();
        for (a, b) in x_out.iter_mut().zip(&ff) {
            *a = *a + *b;
        }
        (
            x_out,
            LayerCache {
                ln1,
                h1,
                q,
                k,
                v,
                probs,
                o,
                ln2,
                h2,
                u,
                act,
                lora: [q_a, k_a, v_a, o_a, u_a, f_a],
            },
        )
    }

    /// Mean next-token loss over the batch and gradients for every parameter.
    pub fn backward(&self, batch: &[Example]) -> Result<(f64, Gradients<F>)> {
        self.loss_and_grads(batch, Reduction::Mean, None)
    }

    /// Loss plus gradients for the parameters flagged in `needs` (all when `None`).
    pub fn loss_and_grads(
        &self,
        batch: &[Example],
        reduction: Reduction,
        needs: Option<&[bool]>,
    ) -> Result<(f64, Gradients<F>)> {
        self.grads_inner(batch, None, reduction, needs)
    }

    /// Like [`loss_and_grads`](Self::loss_and_grads), but scores `targets[i][t]` as the
    /// token following `batch[i].tokens[..=t]` while inputs stay teacher-forced.
    pub fn loss_and_grads_for_targets(
        &self,
        batch: &[Example],
        targets: &[Vec<u32>],
        reduction: Reduction,
        needs: Option<&[bool]>,
    ) -> Result<(f64, Gradients<F>)> {
        if targets.len() != batch.len() || batch.iter().zip(targets).any(|(e, t)| t.len() + 1 != e.tokens.len()) {
            return Err(Error::Input("target override shape differs from the batch".into()));
        }
        self.grads_inner(batch, Some(targets), reduction, needs)
    }

    fn grads_inner(
        &self,
        batch: &[Example],
        override_targets: Option<&[Vec<u32>]>,
        reduction: Reduction,
        needs: Option<&[bool]>,
    ) -> Result<(f64, Gradients<F>)> {
        if batch.is_empty() {
            return Err(Error::DegenerateBatch("empty batch".into()));
        }
        let mut inputs: Vec<&[u32]> = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for (i, ex) in batch.iter().enumerate() {
            if ex.tokens.len() < 2 {
                return Err(Error::Input("example needs at least two tokens".into()));
            }
            if ex.loss_mask.len() != ex.tokens.len() {
                return Err(Error::Input("loss mask length differs from token count".into()));
            }
            let input = &ex.tokens[..ex.tokens.len() - 1];
            let target = match override_targets {
                Some(t) => &t[i][..],
                None => &ex.tokens[1..],
            };
            self.check_tokens(input)?;
            self.check_tokens(target)?;
            inputs.push(input);
            targets.extend_from_slice(target);
            mask.extend_from_slice(&ex.loss_mask[1..]);
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateBatch("every position is masked out".into()));
        }
        let packed = Packed::new(&inputs);
        let n = packed.n;
        let d = self.config.d_model;
        let vsz = self.config.vocab_size;

        let needs: Vec<bool> = match needs {
            Some(m) => {
                if m.len() != self.params.len() {
                    return Err(Error::Consistency("gradient mask length mismatch".into()));
                }
                m.to_vec()
            }
            None => vec![true; self.params.len()],
        };
        let mut grads = Gradients {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            grads: self
                .params
                .iter()
                .zip(&needs)
                .map(|(p, &need)| need.then(|| vec![F::zero(); p.len()]))
                .collect(),
        };

        let (hf, cache) = self.forward_core(&packed, true);
        let all_rows: Vec<usize> = (0..n).collect();
        let logits = self.head_rows(&hf, &all_rows);

        // Softmax cross-entropy and its gradient w.r.t. the logits.
        let weight = match reduction {
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0,
        };
        let mut loss = 0.0f64;
        let mut dlogits = vec![F::zero(); n * vsz];
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let row = logits.row(r);
            let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut z = F::zero();
            for &v in row {
                z = z + (v - m).exp();
            }
            let lse = m + z.ln();
            let t = targets[r] as usize;
            loss += (lse - row[t]).as_f64() * weight;
            let w = F::of(weight);
            let drow = &mut dlogits[r * vsz..(r + 1) * vsz];
            for (j, dv) in drow.iter_mut().enumerate() {
                *dv = (row[j] - lse).exp() * w;
            }
            drow[t] = drow[t] - w;
        }

        // LM head.
        let hw = self.head_weight_index();
        let hb = self.head_bias_index();
        if let Some(g) = grads.slot(hw) {
            matmul_dyt_x(&dlogits, &hf, g, n, d, vsz);
        }
        if let Some(g) = grads.slot(hb) {
            for row in dlogits.chunks(vsz) {
                for (gv, dv) in g.iter_mut().zip(row) {
                    *gv = *gv + *dv;
                }
            }
        }

        // Lowest point the backward pass must reach.
        let emb_needed = needs[EMB_TOK] || needs[EMB_POS];
        let lowest_layer = (0..self.config.n_layers).find(|&l| {
            self.params
                .iter()
                .enumerate()
                .any(|(i, p)| needs[i] && p.group == Group::Layer(l))
        });
        let stop = if emb_needed {
            Some(0)
        } else {
            lowest_layer
        };
        let head_ln_needed = needs[self.head_base()] || needs[self.head_base() + 1];
        if stop.is_none() && !head_ln_needed {
            return Ok((loss, grads));
        }

        let mut dhf = vec![F::zero(); n * d];
        matmul_dy_w(&dlogits, &self.params[hw].data, &mut dhf, n, d, vsz, false);
        let lnf_w = self.head_base();
        let mut dx = layer_norm_bwd(&dhf, &cache.lnf, &self.params[lnf_w].data, n, d, &mut grads, lnf_w, lnf_w + 1);
        drop(dhf);

        if let Some(stop) = stop {
            for l in (stop..self.config.n_layers).rev() {
                let need_dx = l > stop || emb_needed;
                dx = self.block_bwd(l, &cache.layers[l], dx, &packed, &mut grads, need_dx);
            }
            if emb_needed {
                for r in 0..n {
                    let t = packed.tokens[r] as usize;
                    let p = packed.pos[r];
                    if let Some(g) = grads.slot(EMB_TOK) {
                        for j in 0..d {
                            g[t * d + j] = g[t * d + j] + dx[r * d + j];
                        }
                    }
                    if let Some(g) = grads.slot(EMB_POS) {
                        for j in 0..d {
                            g[p * d + j] = g[p * d + j] + dx[r * d + j];
                        }
                    }
                }
            }
        }
        Ok((loss, grads))
    }

    fn block_bwd(
        &self,
        l: usize,
        c: &LayerCache<F>,
        dx_out: Vec<F>,
        packed: &Packed,
        grads: &mut Gradients<F>,
        need_dx: bool,
    ) -> Vec<F> {
        let d = self.config.d_model;
        let f = self.config.d_ffn;
        let n = packed.n;
        let idx = |s: Slot| layer_param_index(l, s);

        // x_out = x_mid + W2 gelu(W1 LN2(x_mid))
        let mut dact = vec![F::zero(); n * f];
        self.linear_bwd(idx(Slot::W2), idx(Slot::B2), &c.act, c.lora[5].as_deref(), &dx_out, n, grads, Some(&mut dact));
        let du: Vec<F> = dact.iter().zip(&c.u).map(|(&g, &z)| g * gelu_grad(z)).collect();
        drop(dact);
        let mut dh2 = vec![F::zero(); n * d];
        self.linear_bwd(idx(Slot::W1), idx(Slot::B1), &c.h2, c.lora[4].as_deref(), &du, n, grads, Some(&mut dh2));
        let dln2 = layer_norm_bwd(&dh2, &c.ln2, &self.params[idx(Slot::Ln2W)].data, n, d, grads, idx(Slot::Ln2W), idx(Slot::Ln2B));
        let mut dx_mid = dx_out;
        for (a, b) in dx_mid.iter_mut().zip(&dln2) {
            *a = *a + *b;
        }

        // x_mid = x_in + Wo attn(LN1(x_in))
        let mut do_ = vec![F::zero(); n * d];
        self.linear_bwd(idx(Slot::Wo), idx(Slot::Bo), &c.o, c.lora[3].as_deref(), &dx_mid, n, grads, Some(&mut do_));
        let (dq, dk, dv) = attention_bwd(&do_, &c.q, &c.k, &c.v, &c.probs, packed, self.config.n_heads, d);
        let mut dh1 = vec![F::zero(); n * d];
        self.linear_bwd(idx(Slot::Wq), idx(Slot::Bq), &c.h1, c.lora[0].as_deref(), &dq, n, grads, Some(&mut dh1));
        self.linear_bwd(idx(Slot::Wk), idx(Slot::Bk), &c.h1, c.lora[1].as_deref(), &dk, n, grads, Some(&mut dh1));
        self.linear_bwd(idx(Slot::Wv), idx(Slot::Bv), &c.h1, c.lora[2].as_deref(), &dv, n, grads, Some(&mut dh1));
        if !need_dx {
            // gradients for LN1 parameters still need the pass below
            let _ = layer_norm_bwd(&dh1, &c.ln1, &self.params[idx(Slot::Ln1W)].data, n, d, grads, idx(Slot::Ln1W), idx(Slot::Ln1B));
            return Vec::new();
        }
        let dln1 = layer_norm_bwd(&dh1, &c.ln1, &self.params[idx(Slot::Ln1W)].data, n, d, grads, idx(Slot::Ln1W), idx(Slot::Ln1B));
        for (a, b) in dx_mid.iter_mut().zip(&dln1) {
            *a = *a + *b;
        }
        dx_mid
    }
}

/// Mean negative log-likelihood over masked-in positions.
pub fn nll_loss<F: Scalar>(logits: &Matrix<F>, targets: &[u32], loss_mask: &[bool]) -> Result<f64> {
    if targets.len() != logits.rows || loss_mask.len() != logits.rows {
        return Err(Error::Input(format!(
            "logits have {} rows but targets/mask have {}/{}",
            logits.rows,
            targets.len(),
            loss_mask.len()
        )));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for r in 0..logits.rows {
        if !loss_mask[r] {
            continue;
        }
        let t = targets[r] as usize;
        if t >= logits.cols {
            return Err(Error::Input(format!("target {t} outside vocab {}", logits.cols)));
        }
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::DegenerateBatch("every position is masked out".into()));
    }
    Ok((total / count as f64).max(0.0))
}

/// Ragged batch packed row-wise: `(start, len)` per sequence.
struct Packed {
    seqs: Vec<(usize, usize)>,
    tokens: Vec<u32>,
    pos: Vec<usize>,
    n: usize,
}

impl Packed {
    fn new(seqs: &[&[u32]]) -> Self {
        let mut out = Packed {
            seqs: Vec::with_capacity(seqs.len()),
            tokens: Vec::new(),
            pos: Vec::new(),
            n: 0,
        };
        for s in seqs {
            out.seqs.push((out.n, s.len()));
            out.tokens.extend_from_slice(s);
            out.pos.extend(0..s.len());
            out.n += s.len();
        }
        out
    }
}

struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

struct LayerCache<F> {
    ln1: LnCache<F>,
    h1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// Per sequence, per head, `len x len` attention weights.
    probs: Vec<Vec<F>>,
    o: Vec<F>,
    ln2: LnCache<F>,
    h2: Vec<F>,
    u: Vec<F>,
    act: Vec<F>,
    /// Adapter intermediates for wq, wk, wv, wo, w1, w2.
    lora: [Option<Vec<F>>; 6],
}

struct Cache<F> {
    layers: Vec<LayerCache<F>>,
    lnf: LnCache<F>,
}

fn layer_norm<F: Scalar>(x: &[F], w: &[F], b: &[F], n: usize, d: usize) -> (Vec<F>, LnCache<F>) {
    let mut y = vec![F::zero(); n * d];
    let mut xhat = vec![F::zero(); n * d];
    let mut rstd = vec![F::zero(); n];
    let inv_d = F::of(1.0 / d as f64);
    let eps = F::of(LN_EPS);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * w[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_bwd<F: Scalar>(
    dy: &[F],
    c: &LnCache<F>,
    w: &[F],
    n: usize,
    d: usize,
    grads: &mut Gradients<F>,
    wi: usize,
    bi: usize,
) -> Vec<F> {
    if let Some(g) = grads.slot(wi) {
        for r in 0..n {
            for j in 0..d {
                g[j] = g[j] + dy[r * d + j] * c.xhat[r * d + j];
            }
        }
    }
    if let Some(g) = grads.slot(bi) {
        for r in 0..n {
            for j in 0..d {
                g[j] = g[j] + dy[r * d + j];
            }
        }
    }
    let mut dx = vec![F::zero(); n * d];
    let inv_d = F::of(1.0 / d as f64);
    for r in 0..n {
        let mut mean_g = F::zero();
        let mut mean_gx = F::zero();
        for j in 0..d {
            let g = dy[r * d + j] * w[j];
            mean_g = mean_g + g;
            mean_gx = mean_gx + g * c.xhat[r * d + j];
        }
        mean_g = mean_g * inv_d;
        mean_gx = mean_gx * inv_d;
        for j in 0..d {
            let g = dy[r * d + j] * w[j];
            dx[r * d + j] = c.rstd[r] * (g - mean_g - c.xhat[r * d + j] * mean_gx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Scalar>(z: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * z * (F::one() + (c * (z + a * z * z * z)).tanh())
}

fn gelu_grad<F: Scalar>(z: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (z + a * z * z * z)).tanh();
    half * (F::one() + t) + half * z * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * z * z)
}

fn attention_fwd<F: Scalar>(q: &[F], k: &[F], v: &[F], packed: &Packed, heads: usize, d: usize) -> (Vec<F>, Vec<Vec<F>>) {
    let hd = d / heads;
    let scale = F::of(1.0 / (hd as f64).sqrt());
    let mut o = vec![F::zero(); packed.n * d];
    let mut all_probs = Vec::with_capacity(packed.seqs.len() * heads);
    for &(start, len) in &packed.seqs {
        for h in 0..heads {
            let off = start * d + h * hd;
            let mut s = vec![F::zero(); len * len];
            F::gemm(len, hd, len, scale, &q[off..], d as isize, 1, &k[off..], 1, d as isize, F::zero(), &mut s, len as isize, 1);
            for i in 0..len {
                let row = &mut s[i * len..(i + 1) * len];
                let m = row[..=i].iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                let mut z = F::zero();
                for x in row[..=i].iter_mut() {
                    *x = (*x - m).exp();
                    z = z + *x;
                }
                for x in row[..=i].iter_mut() {
                    *x = *x / z;
                }
                for x in row[i + 1..].iter_mut() {
                    *x = F::zero();
                }
            }
            F::gemm(len, len, hd, F::one(), &s, len as isize, 1, &v[off..], d as isize, 1, F::zero(), &mut o[off..], d as isize, 1);
            all_probs.push(s);
        }
    }
    (o, all_probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_bwd<F: Scalar>(
    d_o: &[F],
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[Vec<F>],
    packed: &Packed,
    heads: usize,
    d: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let hd = d / heads;
    let scale = F::of(1.0 / (hd as f64).sqrt());
    let n = packed.n;
    let mut dq = vec![F::zero(); n * d];
    let mut dk = vec![F::zero(); n * d];
    let mut dv = vec![F::zero(); n * d];
    let mut pi = 0;
    for &(start, len) in &packed.seqs {
        for h in 0..heads {
            let off = start * d + h * hd;
            let p = &probs[pi];
            pi += 1;
            // dP = dO V^T
            let mut dp = vec![F::zero(); len * len];
            F::gemm(len, hd, len, F::one(), &d_o[off..], d as isize, 1, &v[off..], 1, d as isize, F::zero(), &mut dp, len as isize, 1);
            // dV = P^T dO
            F::gemm(len, len, hd, F::one(), p, 1, len as isize, &d_o[off..], d as isize, 1, F::zero(), &mut dv[off..], d as isize, 1);
            // dS = P * (dP - rowsum(dP * P))
            for i in 0..len {
                let pr = &p[i * len..(i + 1) * len];
                let dr = &mut dp[i * len..(i + 1) * len];
                let dot: F = pr[..=i].iter().zip(dr[..=i].iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..len {
                    dr[j] = if j <= i { pr[j] * (dr[j] - dot) } else { F::zero() };
                }
            }
            // dQ = scale dS K ; dK = scale dS^T Q
            F::gemm(len, len, hd, scale, &dp, len as isize, 1, &k[off..], d as isize, 1, F::zero(), &mut dq[off..], d as isize, 1);
            F::gemm(len, len, hd, scale, &dp, 1, len as isize, &q[off..], d as isize, 1, F::zero(), &mut dk[off..], d as isize, 1);
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            vocab_size: 16,
            context_len: 12,
            tie_embeddings: false,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = ModelState::<f32>::init(&ModelConfig::toy(), 42).unwrap();
        let b = ModelState::<f32>::init(&ModelConfig::toy(), 42).unwrap();
        let c = ModelState::<f32>::init(&ModelConfig::toy(), 43).unwrap();
        assert_eq!(a, b);
        assert!(a.params.iter().zip(&c.params).any(|(x, y)| x.data != y.data));
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..ModelConfig::toy()
        };
        assert!(matches!(ModelState::<f32>::init(&cfg, 42), Err(Error::Config(_))));
        let one_layer = ModelConfig {
            n_layers: 1,
            ..ModelConfig::toy()
        };
        assert!(matches!(one_layer.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn every_param_has_one_group_and_biases_start_at_zero() {
        let m = ModelState::<f32>::init(&ModelConfig::toy(), 1).unwrap();
        let mut seen = BTreeSet::new();
        for p in &m.params {
            assert!(seen.insert(p.name.clone()), "duplicate {}", p.name);
            if p.name.ends_with("bias") || p.name.ends_with(".bq") || p.name.ends_with(".b1") {
                assert!(p.data.iter().all(|&v| v == 0.0), "{}", p.name);
            }
            match p.group {
                Group::Layer(l) => assert!(p.name.starts_with(&format!("layers.{l}."))),
                Group::Embedding => assert!(p.name.starts_with("embed.")),
                Group::LmHead => assert!(p.name.starts_with("lm_head") || p.name.starts_with("final_ln")),
            }
        }
        assert_ne!(m.param("embed.tok").unwrap().data, m.param("lm_head.weight").unwrap().data);
    }

    #[test]
    fn logits_shape_and_range_checks() {
        let m = ModelState::<f32>::init(&tiny(), 3).unwrap();
        let out = m.forward_logits(&[1, 2, 3, 4, 5]).unwrap();
        assert_eq!((out.rows, out.cols), (5, 16));
        assert!(matches!(m.forward_logits(&[1, 16]), Err(Error::Input(_))));
        assert!(matches!(m.forward_logits(&[0; 13]), Err(Error::Input(_))));
    }

    #[test]
    fn shared_prefix_gives_identical_rows() {
        let m = ModelState::<f32>::init(&tiny(), 3).unwrap();
        let a = m.forward_logits(&[1, 2, 3, 4, 5]).unwrap();
        let b = m.forward_logits(&[1, 2, 3, 9, 9, 9]).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn uniform_logits_cost_log_vocab() {
        let logits = Matrix {
            rows: 3,
            cols: 512,
            data: vec![0.0f32; 3 * 512],
        };
        let loss = nll_loss(&logits, &[1, 2, 3], &[true, true, true]).unwrap();
        assert!((loss - 512f64.ln()).abs() < 1e-9);
        assert!((loss - 6.238).abs() < 1e-3);
    }

    #[test]
    fn large_correct_logit_gap_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for gap in [1.0, 5.0, 20.0, 60.0] {
            let mut data = vec![0.0f64; 8];
            data[3] = gap;
            let m = Matrix { rows: 1, cols: 8, data };
            let l = nll_loss(&m, &[3], &[true]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn hand_computed_two_position_cross_entropy() {
        // row 0: logits (1, 2, 0), target 1; row 1: logits (0, 0, ln 2), target 2.
        let m = Matrix {
            rows: 2,
            cols: 3,
            data: vec![1.0f64, 2.0, 0.0, 0.0, 0.0, 2f64.ln()],
        };
        let l0 = -(2f64.exp() / (1f64.exp() + 2f64.exp() + 1.0)).ln();
        let l1 = -(2.0f64 / 4.0).ln();
        let loss = nll_loss(&m, &[1, 2], &[true, true]).unwrap();
        assert!((loss - (l0 + l1) / 2.0).abs() < 1e-12);
        let only_second = nll_loss(&m, &[1, 2], &[false, true]).unwrap();
        assert!((only_second - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_batch_is_degenerate() {
        let m = Matrix {
            rows: 2,
            cols: 3,
            data: vec![0.0f32; 6],
        };
        assert!(matches!(nll_loss(&m, &[0, 1], &[false, false]), Err(Error::DegenerateBatch(_))));
        let model = ModelState::<f32>::init(&tiny(), 0).unwrap();
        let ex = Example {
            tokens: vec![1, 2, 3],
            loss_mask: vec![true, false, false],
        };
        assert!(matches!(model.backward(&[ex]), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn duplicated_example_keeps_mean_gradient() {
        let m = ModelState::<f64>::init(&tiny(), 5).unwrap();
        let ex = Example::full(vec![1, 4, 2, 7, 3]);
        let (l1, g1) = m.backward(std::slice::from_ref(&ex)).unwrap();
        let (l2, g2) = m.backward(&[ex.clone(), ex]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.grads.iter().zip(&g2.grads) {
            for (x, y) in a.as_ref().unwrap().iter().zip(b.as_ref().unwrap()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lora_rejects_double_attachment_and_bad_rank() {
        let mut m = ModelState::<f32>::init(&tiny(), 0).unwrap();
        let plan = TrainPlan::new("p", [0], false, false);
        let bad = LoraConfig {
            rank: 8,
            ..LoraConfig::default()
        };
        assert!(matches!(m.attach_lora(&bad, &plan), Err(Error::Config(_))));
        let cfg = LoraConfig {
            rank: 2,
            ..LoraConfig::default()
        };
        m.attach_lora(&cfg, &plan).unwrap();
        assert!(matches!(m.attach_lora(&cfg, &plan), Err(Error::State(_))));
    }

    #[test]
    fn lora_parameter_count_is_two_d_r_per_square_matrix() {
        let cfg = ModelConfig::toy();
        let mut m = ModelState::<f32>::init(&cfg, 0).unwrap();
        let before = m.num_elements();
        let lcfg = LoraConfig {
            rank: 8,
            scale: 2.0,
            targets: vec![Projection::Wq],
        };
        m.attach_lora(&lcfg, &TrainPlan::new("p", [3], false, false)).unwrap();
        assert_eq!(m.num_elements() - before, 2 * 64 * 8);
    }

    #[test]
    fn frozen_prefix_skips_gradients_below_lowest_trainable_layer() {
        let m = ModelState::<f64>::init(&tiny(), 2).unwrap();
        let plan = TrainPlan::new("rear", [1], false, true);
        let set = m.apply_train_plan(&plan).unwrap();
        let ex = Example::full(vec![1, 2, 3, 4]);
        let (_, partial) = m.loss_and_grads(std::slice::from_ref(&ex), Reduction::Mean, Some(&set.mask)).unwrap();
        let (_, full) = m.backward(&[ex]).unwrap();
        for (i, p) in m.params.iter().enumerate() {
            match &partial.grads[i] {
                Some(g) => {
                    assert!(set.mask[i]);
                    assert_eq!(g, full.grads[i].as_ref().unwrap(), "{}", p.name);
                }
                None => assert!(!set.mask[i]),
            }
        }
    }

    #[test]
    fn tied_embeddings_share_the_token_matrix() {
        let cfg = ModelConfig {
            tie_embeddings: true,
            ..tiny()
        };
        let m = ModelState::<f64>::init(&cfg, 0).unwrap();
        assert!(m.param("lm_head.weight").is_none());
        let set = m.apply_train_plan(&TrainPlan::new("h", [], false, true)).unwrap();
        assert!(set.contains("embed.tok"));
        let (_, g) = m.loss_and_grads(&[Example::full(vec![1, 2, 3])], Reduction::Mean, Some(&set.mask)).unwrap();
        assert!(g.get("embed.tok").unwrap().iter().any(|&v| v != 0.0));
    }
}
