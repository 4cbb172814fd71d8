//! Experiment driver: synthetic data, two-stage base training, incremental
//! runs, composition, evaluation and reports, with content-hash caching.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::composition::{compose, extract_pack, load_model, load_pack, save_model, save_pack, PackSide};
use crate::corpus::{
    build_multiparallel, generate_backtranslations, generate_cipher_suite, generated_spec, make_schedule, CipherKind,
    CipherSpec, CipherSuite, CorpusPair, Direction, DirectionSchedule, ENGLISH,
};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate_en, bleu, chrf};
use crate::inference::{pivot_translate, DecodeConfig, TranslationModel, Translator};
use crate::model::{init_model, ModelConfig, ParameterStore};
use crate::tokenizer::{build_vocabulary, train_bpe, CorpusWeighting, Vocabulary};
use crate::training::{
    encode_pairs, freeze_violations, recipe_new_source, recipe_new_target, recipe_retrain_baseline,
    train, upsample_language, CodeStrategy, FreezeSpec, OptimizerConfig, RetrainMode, TrainData, TrainHook,
    Variant,
};

/// Environment variable naming the artifacts root.
pub const ARTIFACTS_ENV: &str = "INCNMT_ARTIFACTS";
pub const DEFAULT_ARTIFACTS: &str = "artifacts";

const PAPER_MINI: &str = include_str!("../configs/paper-mini.toml");

pub fn artifacts_root() -> PathBuf {
    std::env::var_os(ARTIFACTS_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_ARTIFACTS))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageDef {
    pub tag: String,
    pub kind: CipherKind,
    pub script: String,
}

/// Synthetic cipher data shared by every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPlan {
    pub lexicon_size: usize,
    pub word_len: (usize, usize),
    pub alphabet_size: usize,
    pub sentence_len: (usize, usize),
    /// Lines per direction, held-out splits included.
    pub lines: usize,
    pub valid_lines: usize,
    pub test_lines: usize,
    /// Languages of the base model; must include English.
    pub initial: Vec<LanguageDef>,
    /// Languages added later; never seen by the base model.
    pub incremental: Vec<LanguageDef>,
    pub bpe_merges: usize,
    #[serde(default = "one")]
    pub bpe_temperature: f64,
    #[serde(default)]
    pub char_min_freq: u64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasePlan {
    pub model: ModelConfig,
    /// Sampling temperature over directions.
    #[serde(default = "one")]
    pub temperature: f64,
    /// Stage 1: every X-en and en-X direction.
    pub english_centric: OptimizerConfig,
    /// Stage 2: every ordered pair of initial languages.
    pub multi_parallel: OptimizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    /// Test lines scored per direction.
    pub test_lines: usize,
    /// Validation lines decoded at each log interval.
    pub dev_lines: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    /// A full model trained from scratch on X-en only.
    Bilingual,
    NewSource,
    NewTarget,
    /// Re-training the whole base with the new language added.
    Retrain,
}

fn learned() -> CodeStrategy {
    CodeStrategy::Learned
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub kind: RunKind,
    pub lang: String,
    #[serde(default)]
    pub variant: Variant,
    /// Target runs only.
    #[serde(default = "learned")]
    pub code: CodeStrategy,
    /// Source runs only: back-translated lines per initial non-English language.
    #[serde(default)]
    pub back_translation: usize,
    /// Limit on the new language's training lines.
    #[serde(default)]
    pub train_lines: Option<usize>,
    /// Retrain runs only.
    #[serde(default)]
    pub retrain: Option<RetrainMode>,
    /// Retrain runs only: weight multiplier of directions with the new language.
    #[serde(default = "one")]
    pub upsample: f64,
    pub opt: OptimizerConfig,
    /// Empty means the experiment seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Run whose scores the report subtracts.
    #[serde(default)]
    pub baseline: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComposeConfig {
    pub name: String,
    /// A new-source run.
    pub src: String,
    /// A new-target run.
    pub tgt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataPlan,
    pub base: BasePlan,
    pub eval: EvalPlan,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub runs: Vec<RunConfig>,
    #[serde(default)]
    pub compose: Vec<ComposeConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(Error::io_at(path))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The bundled desk-scale grid.
    pub fn paper_mini() -> Self {
        Self::from_toml(PAPER_MINI).expect("bundled config is valid")
    }

    pub fn initial_langs(&self) -> Vec<String> {
        self.data.initial.iter().map(|l| l.tag.clone()).collect()
    }

    /// Initial languages other than English.
    pub fn non_english(&self) -> Vec<String> {
        self.initial_langs().into_iter().filter(|l| l != ENGLISH).collect()
    }

    pub fn run(&self, name: &str) -> Result<&RunConfig> {
        self.runs.iter().find(|r| r.name == name).ok_or_else(|| Error::Config(format!("no run named {name}")))
    }

    pub fn seeds(&self, run: &RunConfig) -> Vec<u64> {
        if run.seeds.is_empty() {
            vec![self.seed]
        } else {
            run.seeds.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let initial: BTreeSet<&str> = self.data.initial.iter().map(|l| l.tag.as_str()).collect();
        let incremental: BTreeSet<&str> = self.data.incremental.iter().map(|l| l.tag.as_str()).collect();
        if !initial.contains(ENGLISH) {
            return Err(Error::Config("initial languages must include en".into()));
        }
        if initial.len() != self.data.initial.len() || incremental.len() != self.data.incremental.len() {
            return Err(Error::Config("duplicate language tag".into()));
        }
        if let Some(l) = initial.intersection(&incremental).next() {
            return Err(Error::Config(format!("{l} is both initial and incremental")));
        }
        self.base.model.validate()?;
        self.decode.validate()?;
        let mut names = BTreeSet::new();
        for r in &self.runs {
            if !names.insert(r.name.as_str()) {
                return Err(Error::Config(format!("duplicate run name {}", r.name)));
            }
            if !incremental.contains(r.lang.as_str()) {
                return Err(Error::Config(format!("run {} uses {}, which is not an incremental language", r.name, r.lang)));
            }
            if r.kind == RunKind::Retrain && r.retrain.is_none() {
                return Err(Error::Config(format!("retrain run {} needs a retrain mode", r.name)));
            }
            if let CodeStrategy::Proxy(tag) = &r.code {
                if !initial.contains(tag.as_str()) {
                    return Err(Error::Config(format!("run {} proxies unknown language {tag:?}", r.name)));
                }
            }
            r.opt.validate()?;
        }
        for r in &self.runs {
            if let Some(b) = &r.baseline {
                if !names.contains(b.as_str()) {
                    return Err(Error::Config(format!("run {} names unknown baseline {b}", r.name)));
                }
            }
        }
        for c in &self.compose {
            let (s, t) = (self.run(&c.src)?, self.run(&c.tgt)?);
            if s.kind != RunKind::NewSource || t.kind != RunKind::NewTarget {
                return Err(Error::Config(format!("composition {} needs a new-source and a new-target run", c.name)));
            }
        }
        Ok(())
    }
}

/// The generated corpus and the spec that renders it.
pub struct Data {
    pub spec: CipherSpec,
    pub suite: CipherSuite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }
}

impl Data {
    pub fn generate(plan: &DataPlan, seed: u64) -> Result<Self> {
        let langs: Vec<(String, CipherKind, String)> = plan
            .initial
            .iter()
            .chain(&plan.incremental)
            .map(|l| (l.tag.clone(), l.kind.clone(), l.script.clone()))
            .collect();
        let spec = generated_spec(
            plan.lexicon_size,
            plan.word_len,
            plan.alphabet_size,
            &langs,
            plan.sentence_len,
            plan.valid_lines,
            plan.test_lines,
            seed,
        )?;
        let suite = generate_cipher_suite(&spec, plan.lines)?;
        Ok(Self { spec, suite })
    }

    pub fn mono(&self, lang: &str, split: Split, limit: Option<usize>) -> Result<Vec<String>> {
        let base = &self.suite.base[split.index()];
        let n = limit.unwrap_or(base.len()).min(base.len());
        base[..n].iter().map(|s| self.spec.render(lang, s)).collect()
    }

    pub fn pairs(&self, d: &Direction, split: Split, limit: Option<usize>) -> Result<CorpusPair> {
        let table = match split {
            Split::Train => &self.suite.train,
            Split::Valid => &self.suite.valid,
            Split::Test => &self.suite.test,
        };
        let c = table.get(d).ok_or_else(|| Error::UnknownLanguage(d.to_string()))?;
        Ok(match limit {
            Some(n) => c.truncated(n),
            None => c.clone(),
        })
    }

    /// Writes every split of every direction as plain parallel text files.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, table) in [("train", &self.suite.train), ("valid", &self.suite.valid), ("test", &self.suite.test)] {
            for c in table.values() {
                c.save(dir, name)?;
            }
        }
        let p = dir.join("cipher.json");
        fs::write(&p, serde_json::to_string_pretty(&self.spec)?).map_err(Error::io_at(&p))
    }
}

/// Trains BPE on `corpora` and builds a vocabulary with the given codes.
pub fn build_vocab(plan: &DataPlan, corpora: &BTreeMap<String, Vec<String>>, tags: &[String], seed: u64) -> Result<Vocabulary> {
    let w = CorpusWeighting::from_corpora(corpora, plan.bpe_temperature)?;
    let bpe = train_bpe(corpora, &w, plan.bpe_merges, seed)?;
    build_vocabulary(Arc::new(bpe), corpora, plan.char_min_freq, tags)
}

/// Metric name to per-direction score.
pub type Scores = BTreeMap<String, BTreeMap<Direction, f64>>;

/// Translates the first `lines` test lines of each direction and scores them.
pub fn evaluate(
    model: &dyn Translator,
    data: &Data,
    dirs: &[Direction],
    split: Split,
    lines: usize,
    hyp_dir: Option<&Path>,
) -> Result<Scores> {
    let mut scores = Scores::new();
    for d in dirs {
        let c = data.pairs(d, split, Some(lines))?;
        let src: Vec<String> = c.pairs.iter().map(|p| p.0.clone()).collect();
        let refs: Vec<String> = c.pairs.iter().map(|p| p.1.clone()).collect();
        let hyps = src.iter().map(|s| model.translate(s, &d.tgt)).collect::<Result<Vec<_>>>()?;
        if let Some(dir) = hyp_dir {
            fs::create_dir_all(dir).map_err(Error::io_at(dir))?;
            let p = dir.join(format!("hyp.{d}.txt"));
            fs::write(&p, hyps.join("\n") + "\n").map_err(Error::io_at(&p))?;
        }
        scores.entry("chrf".into()).or_default().insert(d.clone(), chrf(&hyps, &refs)?);
        scores.entry("bleu".into()).or_default().insert(d.clone(), bleu(&hyps, &refs)?);
    }
    Ok(scores)
}

/// Translates through English with two models.
pub struct Pivot<'a> {
    pub first: &'a dyn Translator,
    pub second: &'a dyn Translator,
}

impl Translator for Pivot<'_> {
    fn translate(&self, text: &str, tgt_lang: &str) -> Result<String> {
        pivot_translate(self.first, self.second, text, ENGLISH, tgt_lang)
    }
}

/// Scores dev directions at each log interval.
struct DevHook<'a> {
    template: &'a TranslationModel,
    data: &'a Data,
    dirs: Vec<Direction>,
    lines: usize,
}

impl TrainHook for DevHook<'_> {
    fn on_interval(&mut self, _step: usize, store: &ParameterStore) -> Result<BTreeMap<String, f64>> {
        if self.lines == 0 {
            return Ok(BTreeMap::new());
        }
        let model = TranslationModel { store: Arc::new(store.clone()), ..self.template.clone() };
        let scores = evaluate(&model, self.data, &self.dirs, Split::Valid, self.lines, None)?;
        Ok(scores["chrf"].iter().map(|(d, s)| (format!("chrf.{d}"), *s)).collect())
    }
}

/// Everything a training call needs besides the parameters.
struct TrainJob<'a> {
    template: &'a TranslationModel,
    init: &'a ParameterStore,
    freeze: &'a FreezeSpec,
    corpora: Vec<CorpusPair>,
    schedule: Option<DirectionSchedule>,
    opt: &'a OptimizerConfig,
    seed: u64,
    dev: Vec<Direction>,
}

fn run_job(job: TrainJob, data: &Data, cfg: &ExperimentConfig, dir: &Path) -> Result<ParameterStore> {
    let mut td = TrainData::new();
    let mut sizes = BTreeMap::new();
    for c in &job.corpora {
        let d = c.direction();
        let ex = encode_pairs(job.template, &d.tgt, &c.pairs)?;
        sizes.insert(d.clone(), ex.len());
        td.entry(d).or_default().extend(ex);
    }
    let schedule = match job.schedule {
        Some(s) => s,
        None => make_schedule(&sizes, cfg.base.temperature, &BTreeMap::new())?,
    };
    let p = dir.join("schedule.txt");
    fs::write(&p, schedule.to_manifest()).map_err(Error::io_at(&p))?;
    let mut hook = DevHook { template: job.template, data, dirs: job.dev, lines: cfg.eval.dev_lines };
    let log = dir.join("train.jsonl");
    if log.exists() {
        fs::remove_file(&log).map_err(Error::io_at(&log))?;
    }
    let out = train(job.init, &job.template.config, &schedule, &td, job.freeze, job.opt, job.seed, &mut hook, Some(log))?;
    Ok(out.store)
}

fn hash_of<T: Serialize>(v: &T) -> Result<String> {
    let bytes = serde_json::to_vec(v)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(Error::io_at(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path).map_err(Error::io_at(path))?)?)
}

/// Runs `f` in `root/stages/<name>-<key>` unless a completed copy exists.
fn cached_stage(root: &Path, name: &str, key: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
    let dir = root.join("stages").join(format!("{name}-{key}"));
    let done = dir.join("complete");
    if done.exists() {
        log::info!("stage {name}: cached");
        return Ok(dir);
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(Error::io_at(&dir))?;
    }
    fs::create_dir_all(&dir).map_err(Error::io_at(&dir))?;
    log::info!("stage {name}: running");
    f(&dir)?;
    fs::write(&done, key).map_err(Error::io_at(&done))?;
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseResult {
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub id: String,
    pub name: String,
    pub seed: u64,
    pub kind: RunKind,
    pub lang: String,
    /// Values the run was allowed to train.
    pub params: usize,
    pub freeze_violations: Vec<String>,
    pub scores: Scores,
    pub baseline: Option<String>,
}

impl RunResult {
    /// The direction the run was trained for.
    pub fn primary(&self) -> Direction {
        match self.kind {
            RunKind::NewTarget => Direction::new(ENGLISH, self.lang.clone()),
            _ => Direction::new(self.lang.clone(), ENGLISH),
        }
    }

    pub fn score(&self, metric: &str, d: &Direction) -> Option<f64> {
        self.scores.get(metric)?.get(d).copied()
    }

    /// Mean over evaluated directions other than the primary one.
    pub fn secondary_mean(&self, metric: &str) -> Option<f64> {
        let p = self.primary();
        let xs: Vec<f64> = self.scores.get(metric)?.iter().filter(|(d, _)| **d != p).map(|(_, s)| *s).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionResult {
    pub name: String,
    pub src: String,
    pub tgt: String,
    pub direction: Direction,
    pub composed: Scores,
    pub pivot: Scores,
}

pub struct ExperimentOutcome {
    pub root: PathBuf,
    pub base_dir: PathBuf,
    pub base: BaseResult,
    /// Keyed by `name@seed`.
    pub runs: BTreeMap<String, (PathBuf, RunResult)>,
    pub compositions: BTreeMap<String, CompositionResult>,
    pub report: String,
}

impl ExperimentOutcome {
    pub fn base_model(&self, decode: &DecodeConfig) -> Result<TranslationModel> {
        Ok(load_model(&self.base_dir.join("model"))?.with_decode(decode.clone()))
    }

    pub fn run_model(&self, id: &str, decode: &DecodeConfig) -> Result<TranslationModel> {
        let (dir, _) = self.runs.get(id).ok_or_else(|| Error::Config(format!("no run result {id}")))?;
        Ok(load_model(&dir.join("model"))?.with_decode(decode.clone()))
    }

    pub fn result(&self, id: &str) -> Result<&RunResult> {
        self.runs.get(id).map(|(_, r)| r).ok_or_else(|| Error::Config(format!("no run result {id}")))
    }
}

pub fn run_id(name: &str, seed: u64) -> String {
    format!("{name}@{seed}")
}

fn base_directions(cfg: &ExperimentConfig) -> Vec<Direction> {
    let langs = cfg.initial_langs();
    let mut out = Vec::new();
    for x in &langs {
        for y in &langs {
            if x != y {
                out.push(Direction::new(x.clone(), y.clone()));
            }
        }
    }
    out
}

/// Trains the two-stage base model into `dir/model`, scoring every
/// initial direction into `dir/scores.json`.
pub fn train_base(cfg: &ExperimentConfig, data: &Data, dir: &Path) -> Result<BaseResult> {
    let stage1 = dir.join("english-centric");
    let stage2 = dir.join("multi-parallel");
    for d in [&stage1, &stage2] {
        fs::create_dir_all(d).map_err(Error::io_at(d))?;
    }
    let langs = cfg.initial_langs();
    let mut corpora = BTreeMap::new();
    for l in &langs {
        corpora.insert(l.clone(), data.mono(l, Split::Train, None)?);
    }
    let vocab = Arc::new(build_vocab(&cfg.data, &corpora, &langs, cfg.seed)?);
    let store = init_model(&cfg.base.model, &vocab, cfg.seed)?;
    let template =
        TranslationModel::new(cfg.base.model.clone(), Arc::new(store.clone()), vocab.clone(), vocab).with_decode(cfg.decode.clone());
    let freeze = FreezeSpec::all(&store);
    let mut en_centric = Vec::new();
    for x in cfg.non_english() {
        en_centric.push(data.pairs(&Direction::new(x.clone(), ENGLISH), Split::Train, None)?);
        en_centric.push(data.pairs(&Direction::new(ENGLISH, x.clone()), Split::Train, None)?);
    }
    let dev: Vec<Direction> = cfg.non_english().into_iter().map(|x| Direction::new(x, ENGLISH)).take(2).collect();
    let job = TrainJob {
        template: &template,
        init: &store,
        freeze: &freeze,
        corpora: en_centric.clone(),
        schedule: None,
        opt: &cfg.base.english_centric,
        seed: cfg.seed,
        dev: dev.clone(),
    };
    let store = run_job(job, data, cfg, &stage1)?;
    let x_en: Vec<CorpusPair> = en_centric.iter().filter(|c| c.tgt_lang == ENGLISH).cloned().collect();
    let mut all = en_centric.clone();
    all.extend(build_multiparallel(&x_en)?.into_iter().filter(|c| c.src_lang != ENGLISH && c.tgt_lang != ENGLISH));
    let mut dev2 = dev;
    let ne = cfg.non_english();
    if ne.len() >= 2 {
        dev2.push(Direction::new(ne[0].clone(), ne[1].clone()));
    }
    let job = TrainJob {
        template: &template,
        init: &store,
        freeze: &freeze,
        corpora: all,
        schedule: None,
        opt: &cfg.base.multi_parallel,
        seed: cfg.seed.wrapping_add(1),
        dev: dev2,
    };
    let store = run_job(job, data, cfg, &stage2)?;
    let model = TranslationModel { store: Arc::new(store), ..template };
    save_model(&dir.join("model"), &model)?;
    let scores = evaluate(&model, data, &base_directions(cfg), Split::Test, cfg.eval.test_lines, Some(&dir.join("hyps")))?;
    let result = BaseResult { scores };
    write_json(&dir.join("scores.json"), &result)?;
    let mut table = String::new();
    for (metric, s) in &result.scores {
        table.push_str(&aggregate_en(metric, s, &langs).to_text());
    }
    let p = dir.join("scores.txt");
    fs::write(&p, table).map_err(Error::io_at(&p))?;
    Ok(result)
}

/// Trains one incremental run against `base` and writes its model, pack
/// (for source and target runs), log and scores into `dir`.
pub fn run_incremental(
    cfg: &ExperimentConfig,
    data: &Data,
    base: &TranslationModel,
    run: &RunConfig,
    seed: u64,
    dir: &Path,
) -> Result<RunResult> {
    let x = run.lang.as_str();
    let limit = run.train_lines;
    let initial = cfg.initial_langs();
    let non_en = cfg.non_english();
    let to_en = Direction::new(x, ENGLISH);
    let mono = |l: &str| -> Result<BTreeMap<String, Vec<String>>> {
        Ok(BTreeMap::from([(l.to_string(), data.mono(l, Split::Train, limit)?)]))
    };
    let (template, init, freeze, corpora, schedule, dev, evals) = match run.kind {
        RunKind::NewSource => {
            let vocab = build_vocab(&cfg.data, &mono(x)?, &initial, seed)?;
            let r = recipe_new_source(base, &vocab, &run.variant, seed)?;
            let template = r.model(base, r.store.clone());
            let x_en = data.pairs(&to_en, Split::Train, limit)?;
            let mut corpora = vec![x_en.clone()];
            if run.back_translation > 0 {
                let bt = generate_backtranslations(base, &x_en, &non_en, run.back_translation, seed)?;
                for c in &bt {
                    c.save(dir, "bt")?;
                }
                corpora.extend(bt);
            }
            let mut evals = vec![to_en.clone()];
            evals.extend(non_en.iter().map(|z| Direction::new(x, z.clone())));
            let dev = evals.iter().take(2).cloned().collect();
            (template, r.store, r.freeze, corpora, None, dev, evals)
        }
        RunKind::NewTarget => {
            let vocab = build_vocab(&cfg.data, &mono(x)?, &[], seed)?;
            let r = recipe_new_target(base, x, &vocab, &run.variant, &run.code, seed)?;
            let template = r.model(base, r.store.clone());
            let from_en = Direction::new(ENGLISH, x);
            let corpora = vec![data.pairs(&from_en, Split::Train, limit)?];
            let mut evals = vec![from_en];
            evals.extend(non_en.iter().map(|z| Direction::new(z.clone(), x)));
            let dev = evals.iter().take(2).cloned().collect();
            (template, r.store, r.freeze, corpora, None, dev, evals)
        }
        RunKind::Bilingual => {
            let mut corpora = mono(x)?;
            corpora.insert(ENGLISH.into(), data.mono(ENGLISH, Split::Train, limit)?);
            let vocab = Arc::new(build_vocab(&cfg.data, &corpora, &[ENGLISH.to_string()], seed)?);
            let store = init_model(&cfg.base.model, &vocab, seed)?;
            let template = TranslationModel::new(cfg.base.model.clone(), Arc::new(store.clone()), vocab.clone(), vocab)
                .with_decode(cfg.decode.clone());
            let freeze = FreezeSpec::all(&store);
            let corpora = vec![data.pairs(&to_en, Split::Train, limit)?];
            (template, store, freeze, corpora, None, vec![to_en.clone()], vec![to_en.clone()])
        }
        RunKind::Retrain => {
            let mode = run.retrain.expect("validated");
            let mut corpora = BTreeMap::new();
            for l in &initial {
                corpora.insert(l.clone(), data.mono(l, Split::Train, None)?);
            }
            corpora.extend(mono(x)?);
            let mut tags = initial.clone();
            tags.push(x.to_string());
            let joint = build_vocab(&cfg.data, &corpora, &tags, seed)?;
            let r = recipe_retrain_baseline(base, &joint, mode, seed)?;
            let template = r.model(base, r.store.clone());
            let mut pairs = Vec::new();
            for d in base_directions(cfg) {
                pairs.push(data.pairs(&d, Split::Train, None)?);
            }
            pairs.push(data.pairs(&to_en, Split::Train, limit)?);
            pairs.push(data.pairs(&to_en.reversed(), Split::Train, limit)?);
            let sizes = pairs.iter().map(|c| (c.direction(), c.len())).collect();
            let schedule = upsample_language(&make_schedule(&sizes, cfg.base.temperature, &BTreeMap::new())?, x, run.upsample)?;
            let mut evals = vec![to_en.clone(), to_en.reversed()];
            evals.extend(non_en.iter().take(2).map(|z| Direction::new(z.clone(), ENGLISH)));
            (template, r.store, r.freeze, pairs, Some(schedule), vec![to_en.clone()], evals)
        }
    };
    let job = TrainJob {
        template: &template,
        init: &init,
        freeze: &freeze,
        corpora,
        schedule,
        opt: &run.opt,
        seed,
        dev,
    };
    write_json(&dir.join("freeze.json"), &freeze)?;
    let started = std::time::Instant::now();
    let trained = run_job(job, data, cfg, dir)?;
    let p = dir.join("train_seconds.txt");
    fs::write(&p, format!("{:.1}\n", started.elapsed().as_secs_f64())).map_err(Error::io_at(&p))?;
    let model = TranslationModel { store: Arc::new(trained), ..template };
    save_model(&dir.join("model"), &model)?;
    let violations = match run.kind {
        RunKind::NewSource | RunKind::NewTarget => freeze_violations(&base.store, &model.store, &freeze),
        _ => Vec::new(),
    };
    match run.kind {
        RunKind::NewSource => save_pack(&dir.join("pack"), &extract_pack(&model, base, PackSide::Source, x)?)?,
        RunKind::NewTarget => save_pack(&dir.join("pack"), &extract_pack(&model, base, PackSide::Target, x)?)?,
        _ => {}
    }
    let scores = evaluate(&model, data, &evals, Split::Test, cfg.eval.test_lines, Some(&dir.join("hyps")))?;
    let result = RunResult {
        id: run_id(&run.name, seed),
        name: run.name.clone(),
        seed,
        kind: run.kind,
        lang: x.to_string(),
        params: freeze.trainable_values(&init)?,
        freeze_violations: violations,
        scores,
        baseline: run.baseline.clone(),
    };
    write_json(&dir.join("result.json"), &result)?;
    Ok(result)
}

/// Composes a source pack and a target pack onto `base` and scores the
/// composed model against pivoting through English with the same runs.
pub fn run_composition(
    cfg: &ExperimentConfig,
    data: &Data,
    base: &TranslationModel,
    c: &ComposeConfig,
    src_dir: &Path,
    tgt_dir: &Path,
    dir: &Path,
) -> Result<CompositionResult> {
    let (sp, tp) = (load_pack(&src_dir.join("pack"))?, load_pack(&tgt_dir.join("pack"))?);
    let composed = compose(base, Some(&sp), Some(&tp))?;
    let d = Direction::new(sp.lang(), tp.lang());
    let first = load_model(&src_dir.join("model"))?.with_decode(cfg.decode.clone());
    let second = load_model(&tgt_dir.join("model"))?.with_decode(cfg.decode.clone());
    let pivot = Pivot { first: &first, second: &second };
    let result = CompositionResult {
        name: c.name.clone(),
        src: c.src.clone(),
        tgt: c.tgt.clone(),
        direction: d.clone(),
        composed: evaluate(&composed, data, std::slice::from_ref(&d), Split::Test, cfg.eval.test_lines, Some(&dir.join("composed")))?,
        pivot: evaluate(&pivot, data, std::slice::from_ref(&d), Split::Test, cfg.eval.test_lines, Some(&dir.join("pivot")))?,
    };
    write_json(&dir.join("result.json"), &result)?;
    Ok(result)
}

#[derive(Serialize)]
struct BaseKey<'a> {
    stage: &'static str,
    seed: u64,
    data: &'a DataPlan,
    base: &'a BasePlan,
    eval: &'a EvalPlan,
    decode: &'a DecodeConfig,
}

#[derive(Serialize)]
struct RunKey<'a> {
    stage: &'static str,
    base: &'a str,
    run: &'a RunConfig,
    seed: u64,
}

#[derive(Serialize)]
struct ComposeKey<'a> {
    stage: &'static str,
    base: &'a str,
    src: &'a str,
    tgt: &'a str,
}

#[derive(Serialize, Deserialize)]
struct Expected {
    runs: Vec<String>,
    compositions: Vec<String>,
}

/// Runs every stage of `cfg` under `artifacts/<name>`, reusing completed
/// stages whose inputs hash the same, and writes `report.md`.
pub fn run_experiment(cfg: &ExperimentConfig, artifacts: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let root = artifacts.join(&cfg.name);
    fs::create_dir_all(&root).map_err(Error::io_at(&root))?;
    let p = root.join("config.toml");
    fs::write(&p, cfg.to_toml()?).map_err(Error::io_at(&p))?;
    let mut expected = Expected { runs: Vec::new(), compositions: cfg.compose.iter().map(|c| c.name.clone()).collect() };
    for r in &cfg.runs {
        expected.runs.extend(cfg.seeds(r).into_iter().map(|s| run_id(&r.name, s)));
    }
    write_json(&root.join("expected.json"), &expected)?;
    let results = root.join("results");
    fs::create_dir_all(&results).map_err(Error::io_at(&results))?;

    let data = Data::generate(&cfg.data, cfg.seed)?;
    let base_key = hash_of(&BaseKey {
        stage: "base",
        seed: cfg.seed,
        data: &cfg.data,
        base: &cfg.base,
        eval: &cfg.eval,
        decode: &cfg.decode,
    })?;
    let base_dir = cached_stage(&root, "base", &base_key, |dir| train_base(cfg, &data, dir).map(|_| ()))?;
    let base_result: BaseResult = read_json(&base_dir.join("scores.json"))?;
    write_json(&results.join("base.json"), &base_result)?;
    let base = load_model(&base_dir.join("model"))?.with_decode(cfg.decode.clone());

    let mut runs = BTreeMap::new();
    let mut run_dirs: BTreeMap<String, PathBuf> = BTreeMap::new();
    for r in &cfg.runs {
        for seed in cfg.seeds(r) {
            let key = hash_of(&RunKey { stage: "run", base: &base_key, run: r, seed })?;
            let id = run_id(&r.name, seed);
            let dir = cached_stage(&root, &id.replace('@', "-"), &key, |dir| {
                run_incremental(cfg, &data, &base, r, seed, dir).map(|_| ())
            })?;
            let result: RunResult = read_json(&dir.join("result.json"))?;
            write_json(&results.join(format!("{id}.json")), &result)?;
            run_dirs.entry(r.name.clone()).or_insert_with(|| dir.clone());
            runs.insert(id, (dir, result));
        }
    }
    let mut compositions = BTreeMap::new();
    for c in &cfg.compose {
        let (sd, td) = (&run_dirs[&c.src], &run_dirs[&c.tgt]);
        let src_key = fs::read_to_string(sd.join("complete")).map_err(Error::io_at(sd))?;
        let tgt_key = fs::read_to_string(td.join("complete")).map_err(Error::io_at(td))?;
        let key = hash_of(&ComposeKey { stage: "compose", base: &base_key, src: &src_key, tgt: &tgt_key })?;
        let dir = cached_stage(&root, &format!("compose-{}", c.name), &key, |dir| {
            run_composition(cfg, &data, &base, c, sd, td, dir).map(|_| ())
        })?;
        let result: CompositionResult = read_json(&dir.join("result.json"))?;
        write_json(&results.join(format!("compose-{}.json", c.name)), &result)?;
        compositions.insert(c.name.clone(), result);
    }
    let report = report(&root)?;
    Ok(ExperimentOutcome { root, base_dir, base: base_result, runs, compositions, report })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// Renders `report.md` from the result files under an experiment root.
/// Missing result files are listed at the end.
pub fn report(root: &Path) -> Result<String> {
    let results = root.join("results");
    let expected: Expected = read_json(&root.join("expected.json"))?;
    let mut out = format!("# {}\n\n", root.file_name().map_or("experiment".into(), |s| s.to_string_lossy()));
    let mut missing = Vec::new();

    match read_json::<BaseResult>(&results.join("base.json")) {
        Ok(base) => {
            out.push_str("## Base model\n\n| metric | to en | from en | non-en |\n|---|---|---|---|\n");
            for (metric, s) in &base.scores {
                let langs: BTreeSet<String> = s.keys().flat_map(|d| [d.src.clone(), d.tgt.clone()]).collect();
                let t = aggregate_en(metric, s, &langs.into_iter().collect::<Vec<_>>());
                let _ = writeln!(
                    out,
                    "| {metric} | {} | {} | {} |",
                    fmt_opt(t.to_pivot),
                    fmt_opt(t.from_pivot),
                    fmt_opt(t.non_pivot)
                );
            }
            out.push('\n');
        }
        Err(_) => missing.push("base.json".to_string()),
    }

    let mut runs: BTreeMap<String, RunResult> = BTreeMap::new();
    for id in &expected.runs {
        match read_json::<RunResult>(&results.join(format!("{id}.json"))) {
            Ok(r) => {
                runs.insert(id.clone(), r);
            }
            Err(_) => missing.push(format!("{id}.json")),
        }
    }
    if !runs.is_empty() {
        out.push_str("## Incremental runs\n\n");
        out.push_str("| run | kind | params | direction | chrF | BLEU | other chrF | Δ chrF vs baseline |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for (id, r) in &runs {
            let p = r.primary();
            let c = r.score("chrf", &p);
            let delta = r.baseline.as_ref().and_then(|b| {
                let same = runs.get(&run_id(b, r.seed));
                let any = || runs.values().find(|x| &x.name == b);
                let base = same.or_else(any)?;
                Some(c? - base.score("chrf", &base.primary())?)
            });
            let _ = writeln!(
                out,
                "| {id} | {:?} | {} | {p} | {} | {} | {} | {} |",
                r.kind,
                r.params,
                fmt_opt(c),
                fmt_opt(r.score("bleu", &p)),
                fmt_opt(r.secondary_mean("chrf")),
                delta.map_or_else(|| "-".to_string(), |v| format!("{v:+.2}")),
            );
        }
        out.push('\n');
    }

    let mut comps = Vec::new();
    for name in &expected.compositions {
        match read_json::<CompositionResult>(&results.join(format!("compose-{name}.json"))) {
            Ok(c) => comps.push(c),
            Err(_) => missing.push(format!("compose-{name}.json")),
        }
    }
    if !comps.is_empty() {
        out.push_str("## Composition\n\n| name | direction | composed chrF | pivot chrF | composed BLEU | pivot BLEU |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for c in &comps {
            let get = |s: &Scores, m: &str| s.get(m).and_then(|x| x.get(&c.direction)).copied();
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                c.name,
                c.direction,
                fmt_opt(get(&c.composed, "chrf")),
                fmt_opt(get(&c.pivot, "chrf")),
                fmt_opt(get(&c.composed, "bleu")),
                fmt_opt(get(&c.pivot, "bleu")),
            );
        }
        out.push('\n');
    }
    if !missing.is_empty() {
        out.push_str("## Missing results\n\n");
        for m in &missing {
            let _ = writeln!(out, "- {m}");
        }
    }
    let p = root.join("report.md");
    fs::write(&p, &out).map_err(Error::io_at(&p))?;
    Ok(out)
}
