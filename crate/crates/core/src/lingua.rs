//! Synthetic language family over a shared concept space.
//!
//! Every language maps the same `C` abstract concepts bijectively onto its own
//! contiguous token range. Sentences are random walks over a concept grammar
//! shared by all languages, so the languages differ only in surface tokens.
//!
//! Token layout: control tokens first (BOS, separator, label marker, three
//! class labels, one tag per language), then one `C`-wide range per language.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Example, ModelState};
use crate::scalar::Scalar;

pub const NUM_CLASSES: usize = 3;
pub const WORD_TRANSLATION_SHOTS: usize = 4;
pub const CLASSIFICATION_SHOTS: usize = NUM_CLASSES;
/// Concepts per classification sentence.
pub const BAG_LEN: usize = 3;
/// Successors per concept in the shared grammar.
const GRAMMAR_BRANCHING: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Known,
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub name: String,
    pub role: Role,
    pub tag: u32,
    /// First token id of this language's range.
    pub first_token: u32,
    /// `lexicon[c]` is the token for concept `c`.
    pub lexicon: Vec<u32>,
}

impl LanguageSpec {
    pub fn token(&self, concept: usize) -> u32 {
        self.lexicon[concept]
    }

    pub fn owns(&self, token: u32) -> bool {
        token >= self.first_token && ((token - self.first_token) as usize) < self.lexicon.len()
    }

    /// Inverse lexicon lookup.
    pub fn concept(&self, token: u32) -> Option<usize> {
        self.lexicon.iter().position(|&t| t == token)
    }
}

pub fn category(concept: usize) -> usize {
    concept % NUM_CLASSES
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlTokens {
    pub bos: u32,
    pub sep: u32,
    pub label_marker: u32,
    pub labels: [u32; NUM_CLASSES],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSuite {
    pub seed: u64,
    pub concept_count: usize,
    pub control: ControlTokens,
    pub languages: Vec<LanguageSpec>,
    /// Successor concepts per concept, shared by every language.
    pub grammar: Vec<Vec<usize>>,
    /// Number of token ids used (`max id + 1`).
    pub token_count: usize,
}

impl LanguageSuite {
    pub fn language(&self, name: &str) -> Result<&LanguageSpec> {
        self.languages
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Input(format!("language `{name}` is not in the suite")))
    }

    pub fn known(&self) -> impl Iterator<Item = &LanguageSpec> {
        self.languages.iter().filter(|l| l.role == Role::Known)
    }

    pub fn unknown(&self) -> impl Iterator<Item = &LanguageSpec> {
        self.languages.iter().filter(|l| l.role == Role::Unknown)
    }

    /// Language owning a token, if any.
    pub fn owner(&self, token: u32) -> Option<&LanguageSpec> {
        self.languages.iter().find(|l| l.owns(token))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Build a suite of languages with seeded lexicon permutations.
pub fn generate_language_suite(
    seed: u64,
    concept_count: usize,
    languages: &[(&str, Role)],
    vocab_size: usize,
) -> Result<LanguageSuite> {
    if concept_count < GRAMMAR_BRANCHING + 1 {
        return Err(Error::Config(format!("concept count {concept_count} is too small")));
    }
    if languages.is_empty() {
        return Err(Error::Config("suite needs at least one language".into()));
    }
    let mut names: Vec<&str> = languages.iter().map(|(n, _)| *n).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != languages.len() {
        return Err(Error::Config("language names must be unique".into()));
    }
    let control = ControlTokens {
        bos: 0,
        sep: 1,
        label_marker: 2,
        labels: [3, 4, 5],
    };
    let first_tag = 6u32;
    let first_range = first_tag as usize + languages.len();
    let token_count = first_range + languages.len() * concept_count;
    if token_count > vocab_size {
        return Err(Error::Config(format!(
            "suite needs {token_count} token ids but vocab_size is {vocab_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = languages
        .iter()
        .enumerate()
        .map(|(i, (name, role))| {
            let first = (first_range + i * concept_count) as u32;
            let mut perm: Vec<u32> = (0..concept_count as u32).collect();
            perm.shuffle(&mut rng);
            LanguageSpec {
                name: name.to_string(),
                role: *role,
                tag: first_tag + i as u32,
                first_token: first,
                lexicon: perm.into_iter().map(|p| first + p).collect(),
            }
        })
        .collect();
    let grammar = (0..concept_count)
        .map(|c| {
            let mut succ = Vec::with_capacity(GRAMMAR_BRANCHING);
            while succ.len() < GRAMMAR_BRANCHING {
                let s = rng.random_range(0..concept_count);
                if s != c && !succ.contains(&s) {
                    succ.push(s);
                }
            }
            succ
        })
        .collect();
    Ok(LanguageSuite {
        seed,
        concept_count,
        control,
        languages: specs,
        grammar,
        token_count,
    })
}

/// Row proportions of a rendered corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateMix {
    pub monolingual: f64,
    pub parallel: f64,
    #[serde(default)]
    pub classification: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_examples: usize,
    pub mix: TemplateMix,
    /// Inclusive concept-count range of monolingual sentences.
    pub sentence_len: (usize, usize),
    /// Translation statements per parallel row.
    pub statements_per_row: usize,
    /// Restrict the loss to answer tokens of parallel and classification rows.
    #[serde(default)]
    pub answer_only_loss: bool,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn adaptation_default(seed: u64) -> Self {
        CorpusSpec {
            n_examples: 8000,
            mix: TemplateMix {
                monolingual: 0.7,
                parallel: 0.3,
                classification: 0.0,
            },
            sentence_len: (6, 12),
            statements_per_row: 5,
            answer_only_loss: false,
            seed,
        }
    }

    pub fn pretrain_default(seed: u64) -> Self {
        CorpusSpec {
            n_examples: 32000,
            mix: TemplateMix {
                monolingual: 0.2,
                parallel: 0.7,
                classification: 0.1,
            },
            sentence_len: (6, 12),
            statements_per_row: 5,
            answer_only_loss: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mix;
        let parts = [m.monolingual, m.parallel, m.classification];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config("template proportions must be in [0,1] and sum to 1".into()));
        }
        if self.n_examples == 0 {
            return Err(Error::Config("corpus needs at least one example".into()));
        }
        let (lo, hi) = self.sentence_len;
        if lo == 0 || lo > hi {
            return Err(Error::Config("invalid sentence length range".into()));
        }
        if self.statements_per_row == 0 {
            return Err(Error::Config("statements_per_row must be positive".into()));
        }
        Ok(())
    }

    fn counts(&self) -> [usize; 3] {
        let n = self.n_examples as f64;
        let par = (self.mix.parallel * n).round() as usize;
        let cls = ((self.mix.classification * n).round() as usize).min(self.n_examples - par.min(self.n_examples));
        let par = par.min(self.n_examples);
        [self.n_examples - par - cls, par, cls]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Monolingual,
    Parallel,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRow {
    pub kind: RowKind,
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl CorpusRow {
    pub fn example(&self) -> Example {
        Example {
            tokens: self.tokens.clone(),
            loss_mask: self.loss_mask.clone(),
        }
    }
}

struct Renderer<'a> {
    suite: &'a LanguageSuite,
    rng: ChaCha8Rng,
    answer_only: bool,
}

impl Renderer<'_> {
    fn sentence_concepts(&mut self, len: usize) -> Vec<usize> {
        let c = self.suite.concept_count;
        let mut cur = self.rng.random_range(0..c);
        let mut out = vec![cur];
        while out.len() < len {
            let succ = &self.suite.grammar[cur];
            cur = succ[self.rng.random_range(0..succ.len())];
            out.push(cur);
        }
        out
    }

    fn monolingual(&mut self, lang: &LanguageSpec, len_range: (usize, usize)) -> CorpusRow {
        let len = self.rng.random_range(len_range.0..=len_range.1);
        let mut tokens = vec![self.suite.control.bos, lang.tag];
        tokens.extend(self.sentence_concepts(len).into_iter().map(|c| lang.token(c)));
        let loss_mask = vec![!self.answer_only; tokens.len()];
        CorpusRow {
            kind: RowKind::Monolingual,
            tokens,
            loss_mask,
        }
    }

    fn parallel(&mut self, src: &LanguageSpec, tgt: &LanguageSpec, statements: usize) -> CorpusRow {
        let c = self.suite.concept_count;
        let concepts = rand::seq::index::sample(&mut self.rng, c, statements.min(c));
        let mut tokens = vec![self.suite.control.bos];
        let mut answer = vec![false];
        for (i, concept) in concepts.into_iter().enumerate() {
            if i > 0 {
                tokens.push(self.suite.control.sep);
                answer.push(false);
            }
            tokens.extend([src.tag, src.token(concept), tgt.tag, tgt.token(concept)]);
            answer.extend([false, false, false, true]);
        }
        let loss_mask = if self.answer_only {
            answer
        } else {
            vec![true; tokens.len()]
        };
        CorpusRow {
            kind: RowKind::Parallel,
            tokens,
            loss_mask,
        }
    }

    fn classification(&mut self, lang: &LanguageSpec) -> CorpusRow {
        let class = self.rng.random_range(0..NUM_CLASSES);
        let item = classification_item(self.suite, lang, &mut self.rng, class);
        let mut tokens = item.prompt;
        tokens.push(item.gold);
        let mut loss_mask = vec![!self.answer_only; tokens.len()];
        if self.answer_only {
            // every label token position is an answer
            for (i, t) in tokens.iter().enumerate() {
                loss_mask[i] = self.suite.control.labels.contains(t);
            }
        }
        CorpusRow {
            kind: RowKind::Classification,
            tokens,
            loss_mask,
        }
    }
}

fn shuffle_kinds(counts: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<RowKind> {
    let mut kinds = Vec::with_capacity(counts.iter().sum());
    kinds.extend(std::iter::repeat_n(RowKind::Monolingual, counts[0]));
    kinds.extend(std::iter::repeat_n(RowKind::Parallel, counts[1]));
    kinds.extend(std::iter::repeat_n(RowKind::Classification, counts[2]));
    kinds.shuffle(rng);
    kinds
}

/// Known-language corpus: monolingual sentences, known↔known translation
/// statements and labelled classification rows. Unknown languages never appear.
pub fn render_pretrain_corpus(suite: &LanguageSuite, spec: &CorpusSpec) -> Result<Vec<CorpusRow>> {
    spec.validate()?;
    let known: Vec<&LanguageSpec> = suite.known().collect();
    if known.is_empty() {
        return Err(Error::Input("suite has no known language".into()));
    }
    if known.len() < 2 && spec.mix.parallel > 0.0 {
        return Err(Error::Input("parallel statements need two known languages".into()));
    }
    let mut r = Renderer {
        suite,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        answer_only: spec.answer_only_loss,
    };
    let kinds = shuffle_kinds(spec.counts(), &mut r.rng);
    let rows = kinds
        .into_iter()
        .map(|kind| match kind {
            RowKind::Monolingual => {
                let l = known[r.rng.random_range(0..known.len())];
                r.monolingual(l, spec.sentence_len)
            }
            RowKind::Parallel => {
                let i = r.rng.random_range(0..known.len());
                let mut j = r.rng.random_range(0..known.len() - 1);
                if j >= i {
                    j += 1;
                }
                r.parallel(known[i], known[j], spec.statements_per_row)
            }
            RowKind::Classification => {
                let l = known[r.rng.random_range(0..known.len())];
                r.classification(l)
            }
        })
        .collect();
    Ok(rows)
}

/// Adaptation corpus for one unknown language: monolingual target sentences and
/// translation statements pairing the target with the anchor language only.
pub fn render_adaptation_corpus(
    suite: &LanguageSuite,
    target: &str,
    anchor: &str,
    spec: &CorpusSpec,
) -> Result<Vec<CorpusRow>> {
    spec.validate()?;
    let tgt = suite.language(target)?;
    if tgt.role != Role::Unknown {
        return Err(Error::Input(format!("`{target}` is not an unknown language")));
    }
    let anc = suite.language(anchor)?;
    if anc.role != Role::Known {
        return Err(Error::Input(format!("anchor `{anchor}` is not a known language")));
    }
    let mut r = Renderer {
        suite,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        answer_only: spec.answer_only_loss,
    };
    let kinds = shuffle_kinds(spec.counts(), &mut r.rng);
    let rows = kinds
        .into_iter()
        .map(|kind| match kind {
            RowKind::Monolingual => r.monolingual(tgt, spec.sentence_len),
            RowKind::Parallel => {
                if r.rng.random_bool(0.5) {
                    r.parallel(tgt, anc, spec.statements_per_row)
                } else {
                    r.parallel(anc, tgt, spec.statements_per_row)
                }
            }
            RowKind::Classification => r.classification(tgt),
        })
        .collect();
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    WordTranslation,
    Classification,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::WordTranslation => "word_translation",
            Task::Classification => "classification",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word_translation" => Ok(Task::WordTranslation),
            "classification" => Ok(Task::Classification),
            other => Err(Error::Input(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub prompt: Vec<u32>,
    pub gold: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSet {
    pub task: Task,
    pub source: String,
    pub target: String,
    pub shots: usize,
    pub seed: u64,
    /// Label tokens for classification; empty for translation.
    pub labels: Vec<u32>,
    pub items: Vec<EvalItem>,
}

impl EvalSet {
    pub fn direction(&self) -> String {
        format!("{}->{}", self.source, self.target)
    }
}

fn classification_item(suite: &LanguageSuite, lang: &LanguageSpec, rng: &mut ChaCha8Rng, query_class: usize) -> EvalItem {
    let c = suite.concept_count;
    let by_class: Vec<Vec<usize>> = (0..NUM_CLASSES)
        .map(|k| (0..c).filter(|&x| category(x) == k).collect())
        .collect();
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.shuffle(rng);
    let mut used = Vec::new();
    let mut tokens = vec![suite.control.bos];
    let draw = |class: usize, used: &mut Vec<usize>, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let pool: Vec<usize> = by_class[class].iter().copied().filter(|x| !used.contains(x)).collect();
        let picked: Vec<usize> = pool.choose_multiple(rng, BAG_LEN).copied().collect();
        used.extend(&picked);
        picked
    };
    for class in order {
        let bag = draw(class, &mut used, rng);
        tokens.push(lang.tag);
        tokens.extend(bag.iter().map(|&x| lang.token(x)));
        tokens.extend([suite.control.label_marker, suite.control.labels[class], suite.control.sep]);
    }
    let bag = draw(query_class, &mut used, rng);
    tokens.push(lang.tag);
    tokens.extend(bag.iter().map(|&x| lang.token(x)));
    tokens.push(suite.control.label_marker);
    EvalItem {
        prompt: tokens,
        gold: suite.control.labels[query_class],
    }
}

/// Few-shot evaluation prompts with single-token gold answers.
///
/// Word translation prompts hold four `⟨src⟩ w ⟨tgt⟩ v` lines followed by
/// `⟨src⟩ q ⟨tgt⟩`; the query concept never appears among its shots.
/// Classification prompts hold one labelled bag-of-words sentence per class in
/// the source language followed by an unlabelled query sentence.
pub fn render_eval_set(
    suite: &LanguageSuite,
    task: Task,
    source: &str,
    target: &str,
    shots: usize,
    seed: u64,
    n_items: usize,
) -> Result<EvalSet> {
    let src = suite.language(source)?;
    let tgt = suite.language(target)?;
    let c = suite.concept_count;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
    let items = match task {
        Task::WordTranslation => {
            if shots != WORD_TRANSLATION_SHOTS {
                return Err(Error::Input(format!("word translation uses {WORD_TRANSLATION_SHOTS} shots, got {shots}")));
            }
            if c < shots + 1 {
                return Err(Error::Input(format!("{c} concepts cannot fill {shots} shots plus a query")));
            }
            let mut queue: Vec<usize> = Vec::new();
            (0..n_items)
                .map(|_| {
                    if queue.is_empty() {
                        queue = (0..c).collect();
                        queue.shuffle(&mut rng);
                    }
                    let q = queue.pop().expect("refilled");
                    let mut prompt = vec![suite.control.bos];
                    let pool: Vec<usize> = (0..c).filter(|&x| x != q).collect();
                    for &s in pool.choose_multiple(&mut rng, shots) {
                        prompt.extend([src.tag, src.token(s), tgt.tag, tgt.token(s), suite.control.sep]);
                    }
                    prompt.extend([src.tag, src.token(q), tgt.tag]);
                    EvalItem {
                        prompt,
                        gold: tgt.token(q),
                    }
                })
                .collect()
        }
        Task::Classification => {
            if shots != CLASSIFICATION_SHOTS {
                return Err(Error::Input(format!("classification uses one shot per class ({CLASSIFICATION_SHOTS}), got {shots}")));
            }
            if c < NUM_CLASSES * 2 * BAG_LEN {
                return Err(Error::Input(format!("{c} concepts cannot fill disjoint classification shots")));
            }
            (0..n_items)
                .map(|i| classification_item(suite, src, &mut rng, i % NUM_CLASSES))
                .collect()
        }
    };
    Ok(EvalSet {
        task,
        source: source.to_string(),
        target: target.to_string(),
        shots,
        seed,
        labels: if task == Task::Classification {
            suite.control.labels.to_vec()
        } else {
            Vec::new()
        },
        items,
    })
}

/// Write records as one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}


/// Initialize the embedding and output rows of every unknown language from the
/// known languages: word rows get the known-word mean plus `noise` times the
/// per-dimension standard deviation of Gaussian noise, the tag row gets the
/// mean known tag, and output biases get the known-word mean.
pub fn init_unknown_rows<F: Scalar>(model: &mut ModelState<F>, suite: &LanguageSuite, noise: f64, seed: u64) -> Result<()> {
    use rand_distr::{Distribution, StandardNormal};
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::Config(format!("unknown-row noise must be finite and >= 0, got {noise}")));
    }
    if suite.token_count > model.config.vocab_size {
        return Err(Error::Config("suite does not fit the model vocabulary".into()));
    }
    let words: Vec<usize> = suite.known().flat_map(|l| l.lexicon.iter().map(|&t| t as usize)).collect();
    let tags: Vec<usize> = suite.known().map(|l| l.tag as usize).collect();
    if words.is_empty() {
        return Err(Error::Input("suite has no known language".into()));
    }
    let d = model.config.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: &[&str] = if model.config.tie_embeddings { &["embed.tok"] } else { &["embed.tok", "lm_head.weight"] };
    for &name in names {
        let p = model.param_mut(name).ok_or_else(|| Error::Input(format!("missing tensor {name}")))?;
        let stats = |ids: &[usize]| {
            let n = ids.len() as f64;
            let mut mu = vec![0.0; d];
            let mut var = vec![0.0; d];
            for &t in ids {
                for j in 0..d {
                    mu[j] += p.data[t * d + j].as_f64() / n;
                }
            }
            for &t in ids {
                for j in 0..d {
                    var[j] += (p.data[t * d + j].as_f64() - mu[j]).powi(2) / n;
                }
            }
            (mu, var.into_iter().map(f64::sqrt).collect::<Vec<_>>())
        };
        let (mu, sd) = stats(&words);
        let (tag_mu, _) = stats(&tags);
        for lang in suite.unknown() {
            for &t in &lang.lexicon {
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p.data[t as usize * d + j] = F::of(mu[j] + noise * sd[j] * z);
                }
            }
            for j in 0..d {
                p.data[lang.tag as usize * d + j] = F::of(tag_mu[j]);
            }
        }
    }
    if let Some(b) = model.param_mut("lm_head.bias") {
        let mean = words.iter().map(|&t| b.data[t].as_f64()).sum::<f64>() / words.len() as f64;
        for lang in suite.unknown() {
            for &t in &lang.lexicon {
                b.data[t as usize] = F::of(mean);
            }
        }
    }
    Ok(())
}
