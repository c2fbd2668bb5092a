//! Config-driven orchestration: pretraining, sweeps, ranking, evaluation and reports.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! config.toml                 resolved configuration
//! suite.json                  language suite manifest
//! corpora/*.jsonl             rendered corpora
//! seed-<s>/base.ckpt          pretrained base model
//! seed-<s>/pretrain.json      competence gate report
//! seed-<s>/runs/<run>/*.ckpt  run checkpoints
//! seed-<s>/scores/<m>.json    layer scores
//! registry.jsonl              one record per finished run
//! results.jsonl               one record per evaluation
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult, Metric};
use crate::lingua::{
    generate_language_suite, init_unknown_rows, read_jsonl, render_adaptation_corpus, render_eval_set, render_pretrain_corpus, write_jsonl,
    CorpusRow, CorpusSpec, EvalSet, LanguageSuite, Role, RowKind, Task, CLASSIFICATION_SHOTS, WORD_TRANSLATION_SHOTS,
};
use crate::model::{Example, LoraConfig, ModelConfig, ModelState};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::plan::TrainPlan;
use crate::rank::{self, FimConfig, HillConfig, LayerScore, LsnConfig, RankMethod};
use crate::sweep::{self, SequentialOrder, Strategy};
use crate::train::{run_steps, TrainConfig};

// ---------------------------------------------------------------- configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageEntry {
    pub name: String,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub seed: u64,
    pub concept_count: usize,
    pub languages: Vec<LanguageEntry>,
    /// Unknown language the adaptation corpus teaches.
    pub target: String,
    /// Known language paired with the target in parallel rows.
    pub anchor: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub corpus: CorpusSpec,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Minimum mean known-to-known word-translation accuracy.
    pub gate: f64,
    pub gate_items: usize,
    /// Noise scale for the unknown-language rows written after pretraining.
    pub unknown_init_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    pub corpus: CorpusSpec,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Evenly spaced checkpoints per run.
    pub checkpoints: usize,
    /// Write checkpoint files (results are recorded either way).
    pub save_checkpoints: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    Lora,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Method::Full),
            "lora" => Ok(Method::Lora),
            other => Err(Error::Config(format!("unknown training method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: Method,
    pub lora: LoraConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// `[source, target]` pairs for word translation.
    pub translation: Vec<[String; 2]>,
    /// `[source, label language]` pairs for classification.
    pub classification: Vec<[String; 2]>,
    pub n_items: usize,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub positional_k: usize,
    pub positional_stride: usize,
    pub sequential_k: usize,
    pub cogsym_fraction: f64,
    pub ranked_method: RankMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankConfig {
    pub fim: FimConfig,
    pub hill: HillConfig,
    pub lsn: LsnConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub suite: SuiteConfig,
    pub pretrain: PretrainConfig,
    pub adaptation: AdaptationConfig,
    pub method: MethodConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub rank: RankConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let langs = [("k0", Role::Known), ("k1", Role::Known), ("k2", Role::Known), ("u0", Role::Unknown)];
        let pair = |a: &str, b: &str| [a.to_string(), b.to_string()];
        ExperimentConfig {
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::toy(),
            suite: SuiteConfig {
                seed: 42,
                concept_count: 200,
                languages: langs
                    .iter()
                    .map(|(n, r)| LanguageEntry {
                        name: n.to_string(),
                        role: *r,
                    })
                    .collect(),
                target: "u0".into(),
                anchor: "k0".into(),
            },
            pretrain: PretrainConfig {
                corpus: CorpusSpec::pretrain_default(42),
                optimizer: AdamWConfig {
                    lr: 3e-3,
                    ..AdamWConfig::default()
                },
                batch_size: 16,
                epochs: 1,
                gate: 0.9,
                gate_items: 200,
                unknown_init_noise: 0.1,
            },
            adaptation: AdaptationConfig {
                corpus: CorpusSpec::adaptation_default(42),
                optimizer: AdamWConfig {
                    lr: 3e-3,
                    ..AdamWConfig::default()
                },
                batch_size: 16,
                epochs: 1,
                checkpoints: 10,
                save_checkpoints: true,
            },
            method: MethodConfig {
                kind: Method::Full,
                lora: LoraConfig::default(),
            },
            eval: EvalConfig {
                translation: vec![pair("k0", "u0"), pair("k1", "u0"), pair("u0", "k0"), pair("u0", "k1")],
                classification: vec![pair("u0", "k0"), pair("k0", "k0")],
                n_items: 200,
                seeds: vec![42, 43, 44],
            },
            sweep: SweepConfig {
                positional_k: 2,
                positional_stride: 1,
                sequential_k: 4,
                cogsym_fraction: 0.25,
                ranked_method: RankMethod::Fim,
            },
            rank: RankConfig {
                fim: FimConfig::default(),
                hill: HillConfig::default(),
                lsn: LsnConfig::default(),
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.corpus.validate()?;
        self.adaptation.corpus.validate()?;
        if self.pretrain.batch_size == 0 || self.adaptation.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.eval.seeds.is_empty() || self.eval.n_items == 0 {
            return Err(Error::Config("evaluation needs at least one seed and one item".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain.gate) {
            return Err(Error::Config(format!("gate {} outside [0, 1]", self.pretrain.gate)));
        }
        let role = |name: &str| self.suite.languages.iter().find(|l| l.name == name).map(|l| l.role);
        if role(&self.suite.target) != Some(Role::Unknown) {
            return Err(Error::Config(format!("target `{}` must be an unknown language", self.suite.target)));
        }
        if role(&self.suite.anchor) != Some(Role::Known) {
            return Err(Error::Config(format!("anchor `{}` must be a known language", self.suite.anchor)));
        }
        Ok(())
    }

    fn language_specs(&self) -> Vec<(&str, Role)> {
        self.suite.languages.iter().map(|l| (l.name.as_str(), l.role)).collect()
    }
}

// ---------------------------------------------------------------- records

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub step: usize,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub strategy: String,
    /// One plan, or two for sequential runs.
    pub phases: Vec<TrainPlan>,
    pub method: Method,
    pub lora_rank: Option<usize>,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub checkpoints: Vec<CheckpointRef>,
    pub status: RunStatus,
    pub wall_clock_s: f64,
}

impl RunRecord {
    /// Layer budget (union over phases).
    pub fn k(&self) -> usize {
        self.phases
            .iter()
            .flat_map(|p| p.trainable_layers.iter())
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn label(&self) -> String {
        if self.phases.len() == 1 {
            self.phases[0].label.clone()
        } else {
            self.run_id.rsplit('/').next().unwrap_or(&self.run_id).to_string()
        }
    }
}

/// One line of the results log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub plan_label: String,
    pub k: usize,
    pub strategy: String,
    pub step: usize,
    pub task: Task,
    pub direction: String,
    pub metric: Metric,
    pub value: f64,
    pub n_items: usize,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    /// Known-to-known accuracy per direction.
    pub known_accuracy: BTreeMap<String, f64>,
    pub mean_known_accuracy: f64,
    /// Unknown-to-known accuracy before adaptation (chance level expected).
    pub unknown_accuracy: BTreeMap<String, f64>,
    pub gate: f64,
    pub passed: bool,
    /// Serialized pretraining inputs, so a changed config is never served a stale base.
    pub fingerprint: String,
}

// ---------------------------------------------------------------- workspace

/// Resolved experiment state on disk.
pub struct Workspace {
    pub config: ExperimentConfig,
    pub suite: LanguageSuite,
}

const REGISTRY: &str = "registry.jsonl";
const RESULTS: &str = "results.jsonl";

fn append_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    f.write_all(&buf)?;
    f.sync_all()?;
    Ok(())
}

impl Workspace {
    /// Create the output directory, persist the resolved config and the suite.
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(config.out_dir.join("corpora"))?;
        let resolved = config.out_dir.join("config.toml");
        let text = config.to_toml()?;
        if resolved.exists() {
            let old = ExperimentConfig::load(&resolved)?;
            // The training method is chosen per invocation and recorded per run.
            let same = ExperimentConfig {
                method: config.method.clone(),
                ..old
            };
            if same != config {
                return Err(Error::Config(format!(
                    "{} holds a different configuration; use a fresh output directory",
                    resolved.display()
                )));
            }
        } else {
            std::fs::write(&resolved, text)?;
        }
        let suite_path = config.out_dir.join("suite.json");
        let suite = generate_language_suite(
            config.suite.seed,
            config.suite.concept_count,
            &config.language_specs(),
            config.model.vocab_size,
        )?;
        if suite_path.exists() {
            if LanguageSuite::load(&suite_path)? != suite {
                return Err(Error::Consistency("stored suite differs from the configured one".into()));
            }
        } else {
            suite.save(&suite_path)?;
        }
        Ok(Workspace { config, suite })
    }

    pub fn out(&self) -> &Path {
        &self.config.out_dir
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out().join(format!("seed-{seed}"))
    }

    pub fn base_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("base.ckpt")
    }

    pub fn score_path(&self, seed: u64, method: RankMethod) -> PathBuf {
        self.seed_dir(seed).join("scores").join(format!("{}.json", method.name()))
    }

    fn corpus(&self, name: &str, render: impl FnOnce() -> Result<Vec<CorpusRow>>) -> Result<Vec<CorpusRow>> {
        let path = self.out().join("corpora").join(format!("{name}.jsonl"));
        let rows = render()?;
        if path.exists() {
            let stored: Vec<CorpusRow> = read_jsonl(&path)?;
            if stored != rows {
                return Err(Error::Consistency(format!("{} differs from a fresh rendering", path.display())));
            }
        } else {
            write_jsonl(&path, &rows)?;
        }
        Ok(rows)
    }

    pub fn pretrain_corpus(&self) -> Result<Vec<CorpusRow>> {
        self.corpus("pretrain", || render_pretrain_corpus(&self.suite, &self.config.pretrain.corpus))
    }

    pub fn adaptation_corpus(&self) -> Result<Vec<CorpusRow>> {
        let s = &self.config.suite;
        self.corpus("adaptation", || {
            render_adaptation_corpus(&self.suite, &s.target, &s.anchor, &self.config.adaptation.corpus)
        })
    }

    /// All configured evaluation sets, in a fixed order.
    pub fn eval_sets(&self) -> Result<Vec<EvalSet>> {
        let e = &self.config.eval;
        let mut sets = Vec::new();
        for seed in &e.seeds {
            for [s, t] in &e.translation {
                sets.push(render_eval_set(&self.suite, Task::WordTranslation, s, t, WORD_TRANSLATION_SHOTS, *seed, e.n_items)?);
            }
            for [s, t] in &e.classification {
                sets.push(render_eval_set(&self.suite, Task::Classification, s, t, CLASSIFICATION_SHOTS, *seed, e.n_items)?);
            }
        }
        Ok(sets)
    }

    pub fn registry(&self) -> Result<Vec<RunRecord>> {
        let p = self.out().join(REGISTRY);
        if !p.exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&p)
    }

    pub fn results(&self) -> Result<Vec<ResultRow>> {
        let p = self.out().join(RESULTS);
        if !p.exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&p)
    }

    fn completed_runs(&self) -> Result<BTreeSet<String>> {
        let mut latest: BTreeMap<String, RunStatus> = BTreeMap::new();
        for r in self.registry()? {
            latest.insert(r.run_id, r.status);
        }
        Ok(latest
            .into_iter()
            .filter(|(_, s)| *s == RunStatus::Completed)
            .map(|(id, _)| id)
            .collect())
    }

    fn pretrain_fingerprint(&self, seed: u64) -> Result<String> {
        let c = &self.config;
        Ok(serde_json::to_string(&(&c.model, &c.suite, &c.pretrain, seed))?)
    }

    pub fn pretrain_report(&self, seed: u64) -> Result<Option<PretrainReport>> {
        let p = self.seed_dir(seed).join("pretrain.json");
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?))
    }

    /// Load the gated base model, failing if pretraining did not pass.
    pub fn base_model(&self, seed: u64) -> Result<ModelState<f32>> {
        let report = self
            .pretrain_report(seed)?
            .ok_or_else(|| Error::State(format!("no base model for seed {seed}; run `pretrain` first")))?;
        if report.fingerprint != self.pretrain_fingerprint(seed)? {
            return Err(Error::State("base model was built from a different config; re-run `pretrain`".into()));
        }
        if !report.passed {
            return Err(Error::Gate(format!(
                "base model for seed {seed} failed the competence gate ({:.3} < {:.3})",
                report.mean_known_accuracy, report.gate
            )));
        }
        Ok(checkpoint::load(&self.base_path(seed))?.model)
    }
}

fn translation_accuracy(model: &ModelState<f32>, suite: &LanguageSuite, pairs: &[(String, String)], items: usize, seed: u64, ctx: usize) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (s, t) in pairs {
        let set = render_eval_set(suite, Task::WordTranslation, s, t, WORD_TRANSLATION_SHOTS, seed, items)?;
        out.insert(set.direction(), evaluate(model, &set, Some(ctx), "base")?.value);
    }
    Ok(out)
}

// ---------------------------------------------------------------- commands

/// Full-parameter pretraining on the known languages, followed by the competence gate.
/// Unknown-language rows are then filled from known-language statistics.
///
/// Reuses a stored base when its fingerprint matches.
pub fn cmd_pretrain(ws: &Workspace, seed: u64) -> Result<PretrainReport> {
    let fingerprint = ws.pretrain_fingerprint(seed)?;
    if let Some(r) = ws.pretrain_report(seed)? {
        if r.fingerprint == fingerprint && ws.base_path(seed).exists() {
            return gate_result(r);
        }
    }
    let cfg = &ws.config;
    let rows: Vec<Example> = ws.pretrain_corpus()?.iter().map(|r| r.example()).collect();
    let mut model = ModelState::<f32>::init(&cfg.model, seed)?;
    let tc = TrainConfig {
        batch_size: cfg.pretrain.batch_size,
        epochs: cfg.pretrain.epochs,
        seed,
        optimizer: cfg.pretrain.optimizer.clone(),
        checkpoints: 1,
    };
    let plan = TrainPlan::full(cfg.model.n_layers);
    let summary = crate::train::train(&mut model, &plan, &rows, &tc, |_, _, _| Ok(()))?;

    let known: Vec<String> = ws.suite.known().map(|l| l.name.clone()).collect();
    let mut kk = Vec::new();
    for a in &known {
        for b in &known {
            if a != b {
                kk.push((a.clone(), b.clone()));
            }
        }
    }
    let uk: Vec<(String, String)> = ws
        .suite
        .unknown()
        .flat_map(|u| known.iter().map(move |k| (u.name.clone(), k.clone())))
        .collect();
    let gate_seed = cfg.eval.seeds[0];
    let ctx = cfg.model.context_len;
    let known_accuracy = translation_accuracy(&model, &ws.suite, &kk, cfg.pretrain.gate_items, gate_seed, ctx)?;
    init_unknown_rows(&mut model, &ws.suite, cfg.pretrain.unknown_init_noise, seed)?;
    let unknown_accuracy = translation_accuracy(&model, &ws.suite, &uk, cfg.pretrain.gate_items, gate_seed, ctx)?;
    let mean = known_accuracy.values().sum::<f64>() / known_accuracy.len().max(1) as f64;
    let report = PretrainReport {
        seed,
        steps: summary.steps,
        final_loss: summary.final_loss,
        known_accuracy,
        mean_known_accuracy: mean,
        unknown_accuracy,
        gate: cfg.pretrain.gate,
        passed: mean >= cfg.pretrain.gate,
        fingerprint,
    };
    let dir = ws.seed_dir(seed);
    std::fs::create_dir_all(&dir)?;
    checkpoint::save(&ws.base_path(seed), &model, None, summary.steps as u64)?;
    std::fs::write(dir.join("pretrain.json"), serde_json::to_string_pretty(&report)?)?;
    gate_result(report)
}

fn gate_result(r: PretrainReport) -> Result<PretrainReport> {
    if r.passed {
        return Ok(r);
    }
    let detail: Vec<String> = r.known_accuracy.iter().map(|(d, a)| format!("{d}={a:.3}")).collect();
    Err(Error::Gate(format!(
        "mean known-language accuracy {:.3} is below the gate {:.3} after {} steps (final loss {:.3}; {})",
        r.mean_known_accuracy,
        r.gate,
        r.steps,
        r.final_loss,
        detail.join(", ")
    )))
}

/// A unit of work in a sweep.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub run_id: String,
    pub strategy: String,
    pub phases: Vec<TrainPlan>,
}

/// `s<seed>/<method>/<strategy>/<label>`; LoRA runs carry their rank in the method part.
pub fn run_id(ws: &Workspace, seed: u64, method: Method, strategy: &str, label: &str) -> String {
    let m = match method {
        Method::Full => "full".to_string(),
        Method::Lora => format!("lora-r{}", ws.config.method.lora.rank),
    };
    format!("s{seed}/{m}/{strategy}/{label}")
}

/// Reference runs shared by every sweep: untrained base and full finetune.
pub fn reference_runs(ws: &Workspace, seed: u64, method: Method) -> Vec<RunSpec> {
    let l = ws.config.model.n_layers;
    // The full-finetune baseline always trains all weights.
    let full_method = if method == Method::Lora { Method::Full } else { method };
    vec![
        RunSpec {
            run_id: run_id(ws, seed, method, "reference", "base"),
            strategy: "reference".into(),
            phases: vec![TrainPlan::frozen()],
        },
        RunSpec {
            run_id: run_id(ws, seed, full_method, "reference", "full"),
            strategy: "reference".into(),
            phases: vec![TrainPlan::full(l)],
        },
    ]
}

/// Runs a strategy expands to, in execution order (references excluded).
pub fn sweep_runs(ws: &Workspace, seed: u64, strategy: Strategy, method: Method) -> Result<Vec<RunSpec>> {
    let cfg = &ws.config;
    let l = cfg.model.n_layers;
    let single = |plans: Vec<TrainPlan>, name: &str| -> Vec<RunSpec> {
        plans
            .into_iter()
            .map(|p| RunSpec {
                run_id: run_id(ws, seed, method, name, &p.label),
                strategy: name.to_string(),
                phases: vec![p],
            })
            .collect()
    };
    Ok(match strategy {
        Strategy::Front => single(sweep::front_sweep(l)?, "front"),
        Strategy::Rear => single(sweep::rear_sweep(l)?, "rear"),
        Strategy::Cogsym => single(sweep::cogsym_sweep(l)?, "cogsym"),
        Strategy::Positional => single(
            sweep::positional_plans(l, cfg.sweep.positional_k, cfg.sweep.positional_stride)?,
            "positional",
        ),
        Strategy::Sequential => [SequentialOrder::BegEnd, SequentialOrder::EndBeg]
            .into_iter()
            .map(|o| {
                let phases = sweep::sequential_spec(o, l, cfg.sweep.sequential_k)?;
                let tag = match o {
                    SequentialOrder::BegEnd => "beg_end",
                    SequentialOrder::EndBeg => "end_beg",
                };
                let label = format!("{tag}-{}", cfg.sweep.sequential_k);
                Ok(RunSpec {
                    run_id: run_id(ws, seed, method, "sequential", &label),
                    strategy: "sequential".into(),
                    phases,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        Strategy::Ranked => {
            let m = cfg.sweep.ranked_method;
            let path = ws.score_path(seed, m);
            if !path.exists() {
                return Err(Error::State(format!(
                    "no {} scores for seed {seed}; run `rank --method {}` first",
                    m.name(),
                    m.name()
                )));
            }
            let scores: LayerScore = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            if scores.n_layers != l {
                return Err(Error::Consistency(format!("score file has {} layers, model has {l}", scores.n_layers)));
            }
            single(sweep::ranked_sweep(m.name(), &scores.values)?, "ranked")
        }
    })
}

/// Train and evaluate one run from the base model; never touches shared state.
pub fn execute_run(
    ws: &Workspace,
    base: &ModelState<f32>,
    rows: &[Example],
    sets: &[EvalSet],
    seed: u64,
    method: Method,
    spec: &RunSpec,
) -> Result<(RunRecord, Vec<ResultRow>)> {
    let cfg = &ws.config;
    let t0 = Instant::now();
    let mut model = base.clone();
    let method = if spec.strategy == "reference" && spec.phases[0].label == "full" {
        Method::Full
    } else {
        method
    };
    if method == Method::Lora {
        let union = TrainPlan::new(
            "adapters",
            spec.phases.iter().flat_map(|p| p.trainable_layers.iter().copied()),
            false,
            false,
        );
        model.attach_lora(&cfg.method.lora, &union)?;
    }
    let k = spec
        .phases
        .iter()
        .flat_map(|p| p.trainable_layers.iter())
        .collect::<BTreeSet<_>>()
        .len();
    let label = if spec.phases.len() == 1 {
        spec.phases[0].label.clone()
    } else {
        spec.run_id.rsplit('/').next().unwrap_or_default().to_string()
    };
    let run_dir = ws.seed_dir(seed).join("runs").join(spec.run_id.replace('/', "_"));
    let mut results = Vec::new();
    let mut checkpoints = Vec::new();
    let ctx = cfg.model.context_len;

    let mut record_step = |step: usize, m: &ModelState<f32>, opt: Option<&OptimizerState<f32>>| -> Result<()> {
        for set in sets {
            let r = evaluate(m, set, Some(ctx), &format!("{}@{step}", spec.run_id))?;
            results.push(row(spec, &label, k, step, r));
        }
        let path = if cfg.adaptation.save_checkpoints {
            std::fs::create_dir_all(&run_dir)?;
            let p = run_dir.join(format!("step-{step:06}.ckpt"));
            checkpoint::save(&p, m, opt, step as u64)?;
            Some(p)
        } else {
            None
        };
        checkpoints.push(CheckpointRef { step, path });
        Ok(())
    };

    let trains_something = spec
        .phases
        .iter()
        .any(|p| p.budget_k() > 0 || p.train_embedding || p.train_lm_head);
    if !trains_something {
        record_step(0, &model, None)?;
    } else {
        let tc = TrainConfig {
            batch_size: cfg.adaptation.batch_size,
            epochs: cfg.adaptation.epochs,
            seed,
            optimizer: cfg.adaptation.optimizer.clone(),
            checkpoints: cfg.adaptation.checkpoints,
        };
        let mut offset = 0;
        for phase in &spec.phases {
            let trainable = model.apply_train_plan(phase)?;
            let mut opt = OptimizerState::new(tc.optimizer.clone(), &model, &trainable);
            let summary = run_steps(&mut model, &trainable, &mut opt, rows, &tc, &mut |step, m, o| {
                record_step(offset + step, m, Some(o))
            })?;
            offset += summary.steps;
        }
    }
    let record = RunRecord {
        run_id: spec.run_id.clone(),
        seed,
        strategy: spec.strategy.clone(),
        phases: spec.phases.clone(),
        method,
        lora_rank: (method == Method::Lora).then_some(cfg.method.lora.rank),
        optimizer: cfg.adaptation.optimizer.clone(),
        batch_size: cfg.adaptation.batch_size,
        epochs: cfg.adaptation.epochs,
        checkpoints,
        status: RunStatus::Completed,
        wall_clock_s: t0.elapsed().as_secs_f64(),
    };
    Ok((record, results))
}

fn row(spec: &RunSpec, label: &str, k: usize, step: usize, r: EvalResult) -> ResultRow {
    ResultRow {
        run_id: spec.run_id.clone(),
        plan_label: label.to_string(),
        k,
        strategy: spec.strategy.clone(),
        step,
        task: r.task,
        direction: r.direction,
        metric: r.metric,
        value: r.value,
        n_items: r.n_items,
        eval_seed: r.eval_seed,
    }
}

/// Outcome of scheduling a list of runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepOutcome {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Execute runs not yet completed in the registry, `workers` at a time.
///
/// Registry and results are committed in run order regardless of which worker
/// finishes first, so logs are identical for any worker count.
pub fn execute_runs(ws: &Workspace, seed: u64, method: Method, specs: &[RunSpec], workers: usize) -> Result<SweepOutcome> {
    let done = ws.completed_runs()?;
    let mut seen = BTreeSet::new();
    let mut outcome = SweepOutcome::default();
    let mut todo = Vec::new();
    for s in specs {
        if !seen.insert(s.run_id.clone()) {
            continue;
        }
        if done.contains(&s.run_id) {
            outcome.skipped.push(s.run_id.clone());
        } else {
            todo.push(s.clone());
        }
    }
    if todo.is_empty() {
        return Ok(outcome);
    }
    let base = ws.base_model(seed)?;
    let rows: Vec<Example> = ws.adaptation_corpus()?.iter().map(|r| r.example()).collect();
    let sets = ws.eval_sets()?;

    let next = AtomicUsize::new(0);
    type Slot = Option<std::result::Result<(RunRecord, Vec<ResultRow>), String>>;
    let commit = Mutex::new((0usize, vec![None as Slot; todo.len()], Vec::<(String, String)>::new()));
    let registry = ws.out().join(REGISTRY);
    let results = ws.out().join(RESULTS);
    let write_err: Mutex<Option<Error>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, todo.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= todo.len() {
                    break;
                }
                let spec = &todo[i];
                let out = execute_run(ws, &base, &rows, &sets, seed, method, spec).map_err(|e| e.to_string());
                let mut guard = commit.lock().expect("commit lock");
                guard.1[i] = Some(out);
                while guard.0 < todo.len() {
                    let j = guard.0;
                    let Some(done) = guard.1[j].take() else { break };
                    let res = match done {
                        Ok((rec, rows)) => append_jsonl(&results, &rows).and_then(|_| append_jsonl(&registry, &[rec])),
                        Err(msg) => {
                            guard.2.push((todo[j].run_id.clone(), msg.clone()));
                            let rec = failed_record(&todo[j], seed, method, ws, msg);
                            append_jsonl(&registry, &[rec])
                        }
                    };
                    if let Err(e) = res {
                        write_err.lock().expect("error lock").get_or_insert(e);
                    }
                    guard.0 += 1;
                }
            });
        }
    });
    if let Some(e) = write_err.into_inner().expect("error lock") {
        return Err(e);
    }
    let failed = commit.into_inner().expect("commit lock").2;
    let failed_ids: BTreeSet<&String> = failed.iter().map(|(id, _)| id).collect();
    outcome.executed = todo
        .iter()
        .filter(|s| !failed_ids.contains(&s.run_id))
        .map(|s| s.run_id.clone())
        .collect();
    outcome.failed = failed;
    Ok(outcome)
}

fn failed_record(spec: &RunSpec, seed: u64, method: Method, ws: &Workspace, msg: String) -> RunRecord {
    RunRecord {
        run_id: spec.run_id.clone(),
        seed,
        strategy: spec.strategy.clone(),
        phases: spec.phases.clone(),
        method,
        lora_rank: (method == Method::Lora).then_some(ws.config.method.lora.rank),
        optimizer: ws.config.adaptation.optimizer.clone(),
        batch_size: ws.config.adaptation.batch_size,
        epochs: ws.config.adaptation.epochs,
        checkpoints: Vec::new(),
        status: RunStatus::Failed(msg),
        wall_clock_s: 0.0,
    }
}

/// A strategy's runs plus both reference runs.
pub fn cmd_sweep(ws: &Workspace, seed: u64, strategy: Strategy, method: Method, workers: usize) -> Result<SweepOutcome> {
    let mut specs = reference_runs(ws, seed, method);
    specs.extend(sweep_runs(ws, seed, strategy, method)?);
    execute_runs(ws, seed, method, &specs, workers)
}

/// Compute and store layer scores on the base model.
pub fn cmd_rank(ws: &Workspace, seed: u64, method: RankMethod) -> Result<LayerScore> {
    let base = ws.base_model(seed)?;
    let cfg = &ws.config.rank;
    let score = match method {
        RankMethod::Fim => {
            let rows: Vec<Example> = ws.adaptation_corpus()?.iter().map(|r| r.example()).collect();
            let sample = rank::sample_rows(&rows, cfg.fim.sample_size, cfg.fim.seed);
            rank::fim_layer_scores(&base, &sample, &cfg.fim)?
        }
        RankMethod::Htsr => rank::htsr_layer_scores(&base, &cfg.hill)?,
        RankMethod::Lsn => {
            let corpora = monolingual_corpora(ws)?;
            rank::lsn_layer_counts(&base, &corpora, &ws.config.suite.target, &cfg.lsn)?
        }
    };
    let path = ws.score_path(seed, method);
    std::fs::create_dir_all(path.parent().expect("scores dir"))?;
    std::fs::write(&path, serde_json::to_string_pretty(&score)?)?;
    Ok(score)
}

/// Monolingual sentences grouped by language tag, from both corpora.
pub fn monolingual_corpora(ws: &Workspace) -> Result<Vec<(String, Vec<Vec<u32>>)>> {
    let mut by_lang: BTreeMap<String, Vec<Vec<u32>>> = BTreeMap::new();
    for l in &ws.suite.languages {
        by_lang.insert(l.name.clone(), Vec::new());
    }
    for row in ws.pretrain_corpus()?.into_iter().chain(ws.adaptation_corpus()?) {
        if row.kind != RowKind::Monolingual {
            continue;
        }
        if let Some(lang) = ws.suite.languages.iter().find(|l| l.tag == row.tokens[1]) {
            by_lang.get_mut(&lang.name).expect("inserted").push(row.tokens[2..].to_vec());
        }
    }
    Ok(by_lang.into_iter().collect())
}

/// Evaluate one checkpoint on a task and direction over the configured eval seeds.
pub fn cmd_eval(ws: &Workspace, checkpoint_path: &Path, task: Task, source: &str, target: &str) -> Result<Vec<EvalResult>> {
    let ck = checkpoint::load(checkpoint_path)?;
    if ck.model.config != ws.config.model {
        return Err(Error::Consistency("checkpoint config differs from the experiment model".into()));
    }
    let shots = match task {
        Task::WordTranslation => WORD_TRANSLATION_SHOTS,
        Task::Classification => CLASSIFICATION_SHOTS,
    };
    let id = checkpoint_path.display().to_string();
    ws.config
        .eval
        .seeds
        .iter()
        .map(|&s| {
            let set = render_eval_set(&ws.suite, task, source, target, shots, s, ws.config.eval.n_items)?;
            evaluate(&ck.model, &set, Some(ws.config.model.context_len), &id)
        })
        .collect()
}
