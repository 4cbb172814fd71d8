//! Loss, learning-rate schedule, the freeze-masked training loop and the
//! recipes that add a language to a trained model.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Direction, DirectionSchedule, ENGLISH};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::inference::TranslationModel;
use crate::model::{
    insert_adapters, layer_prefix, parse_adapter_name, random_embedding, select_parameters, AdapterSpec, Forward,
    LayerSel, ModelConfig, ParameterStore, Role, Selector, Side, OUT_PROJ, SRC_EMBED, TGT_EMBED,
};
use crate::tensor::Tensor;
use crate::tokenizer::{lang_code_token, vocab_overlap, Specials, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub warmup_init_lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub max_steps: usize,
    /// Sentences per batch.
    pub batch_size: usize,
    /// Steps between hook calls and log records; 0 disables both.
    pub log_interval: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            peak_lr: 5e-4,
            warmup_steps: 4000,
            warmup_init_lr: 1e-7,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            label_smoothing: 0.1,
            max_steps: 0,
            batch_size: 32,
            log_interval: 100,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Validation(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Validation("warmup_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Linear warmup from `warmup_init_lr` to `peak_lr`, then inverse square root decay.
pub fn lr_schedule(step: usize, cfg: &OptimizerConfig) -> f64 {
    let w = cfg.warmup_steps as f64;
    let s = step as f64;
    if s < w {
        cfg.warmup_init_lr + (cfg.peak_lr - cfg.warmup_init_lr) * s / w
    } else {
        cfg.peak_lr * (w / s).sqrt()
    }
}

/// Mean over rows of the label-smoothed negative log-likelihood.
pub fn label_smoothed_xent(logits: &Tensor, targets: &[u32], eps: f64) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!("{} logit rows for {} targets", logits.rows(), targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= logits.cols()) {
        return Err(Error::IdOutOfRange { id: t, size: logits.cols() });
    }
    let mut g: Graph<f32> = Graph::new(false);
    let l = g.constant(logits.clone());
    let out = g.smoothed_xent(l, targets, eps);
    Ok(g.value(out).data()[0] as f64)
}

/// Parameters that may change; everything else is excluded from the
/// optimizer. A row mask further limits a matrix to the listed rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub trainable: BTreeSet<String>,
    #[serde(default)]
    pub row_masks: BTreeMap<String, BTreeSet<usize>>,
}

impl FreezeSpec {
    pub fn new(trainable: impl IntoIterator<Item = String>) -> Self {
        Self { trainable: trainable.into_iter().collect(), row_masks: BTreeMap::new() }
    }

    pub fn all<T: crate::tensor::Scalar>(store: &ParameterStore<T>) -> Self {
        Self::new(store.names().map(str::to_string))
    }

    pub fn with_rows(mut self, name: &str, rows: impl IntoIterator<Item = usize>) -> Self {
        self.trainable.insert(name.to_string());
        self.row_masks.insert(name.to_string(), rows.into_iter().collect());
        self
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    /// Checks names and closes the set over aliases: a shared array is
    /// trainable through every one of its names.
    pub fn resolve<T: crate::tensor::Scalar>(&self, store: &ParameterStore<T>) -> Result<ResolvedFreeze> {
        let mut slots = HashSet::new();
        let mut masks: HashMap<usize, BTreeSet<usize>> = HashMap::new();
        for n in &self.trainable {
            let e = store.entry(n)?;
            slots.insert(e.slot);
            if let Some(rows) = self.row_masks.get(n) {
                let r = store.get(n)?.rows();
                if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
                    return Err(Error::Validation(format!("row mask for {n} names row {bad} of {r}")));
                }
                masks.insert(e.slot, rows.clone());
            }
        }
        for n in self.row_masks.keys() {
            if !self.trainable.contains(n) {
                return Err(Error::Validation(format!("row mask for frozen parameter {n}")));
            }
        }
        if slots.is_empty() {
            return Err(Error::Validation("nothing is trainable".into()));
        }
        Ok(ResolvedFreeze { slots, masks })
    }

    /// Number of values the optimizer may change.
    pub fn trainable_values<T: crate::tensor::Scalar>(&self, store: &ParameterStore<T>) -> Result<usize> {
        let mut total = 0;
        let mut seen = HashSet::new();
        for n in &self.trainable {
            let e = store.entry(n)?;
            if !seen.insert(e.slot) {
                continue;
            }
            let t = store.get(n)?;
            total += match self.row_masks.get(n) {
                Some(rows) => rows.len() * t.cols(),
                None => t.len(),
            };
        }
        Ok(total)
    }
}

pub struct ResolvedFreeze {
    pub slots: HashSet<usize>,
    pub masks: HashMap<usize, BTreeSet<usize>>,
}

/// Lists base parameters that a run was not allowed to change but did.
/// Rows outside a row mask count as frozen; rows beyond the base shape are
/// new and ignored.
pub fn freeze_violations(base: &ParameterStore, trained: &ParameterStore, freeze: &FreezeSpec) -> Vec<String> {
    let mut bad = Vec::new();
    for name in base.names() {
        let Ok(after) = trained.get(name) else { continue };
        let before = base.get(name).expect("listed name");
        // A name is trainable through any alias that shares its array.
        let via = trained.aliases(name).unwrap_or_default().into_iter().find(|a| freeze.is_trainable(a));
        let frozen_rows: Box<dyn Fn(usize) -> bool> = if let Some(rows) = via.as_ref().and_then(|a| freeze.row_masks.get(a)) {
            let rows = rows.clone();
            Box::new(move |r| !rows.contains(&r))
        } else if via.is_some() {
            continue;
        } else {
            Box::new(|_| true)
        };
        if after.cols() != before.cols() || after.rows() < before.rows() {
            bad.push(name.to_string());
            continue;
        }
        let changed = (0..before.rows())
            .filter(|&r| frozen_rows(r))
            .any(|r| before.row(r).iter().zip(after.row(r)).any(|(a, b)| a.to_bits() != b.to_bits()));
        if changed {
            bad.push(name.to_string());
        }
    }
    bad
}

/// One training pair: source ids (with code and eos), decoder input
/// (bos + tokens) and decoder targets (tokens + eos).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<u32>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
}

impl Example {
    pub fn new(src: Vec<u32>, tgt: &[u32], specials: Specials) -> Self {
        let mut tgt_in = Vec::with_capacity(tgt.len() + 1);
        tgt_in.push(specials.bos);
        tgt_in.extend_from_slice(tgt);
        let mut tgt_out = tgt.to_vec();
        tgt_out.push(specials.eos);
        Self { src, tgt_in, tgt_out }
    }
}

pub type TrainData = BTreeMap<Direction, Vec<Example>>;

/// Encodes a corpus direction for a model.
pub fn encode_pairs(model: &TranslationModel, tgt_lang: &str, pairs: &[(String, String)]) -> Result<Vec<Example>> {
    let code = model.code_for(tgt_lang)?;
    Ok(pairs
        .iter()
        .map(|(s, t)| {
            Example::new(
                crate::model::source_ids(&model.src_vocab, s, code),
                &model.tgt_vocab.encode(t),
                model.tgt_vocab.specials(),
            )
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub directions: BTreeMap<String, usize>,
    pub dev: BTreeMap<String, f64>,
}

/// Called every `log_interval` steps with the current parameters.
pub trait TrainHook {
    fn on_interval(&mut self, step: usize, store: &ParameterStore) -> Result<BTreeMap<String, f64>>;
}

pub struct NoHook;

impl TrainHook for NoHook {
    fn on_interval(&mut self, _: usize, _: &ParameterStore) -> Result<BTreeMap<String, f64>> {
        Ok(BTreeMap::new())
    }
}

impl<F: FnMut(usize, &ParameterStore) -> Result<BTreeMap<String, f64>>> TrainHook for F {
    fn on_interval(&mut self, step: usize, store: &ParameterStore) -> Result<BTreeMap<String, f64>> {
        self(step, store)
    }
}

pub struct TrainOutcome {
    pub store: ParameterStore,
    pub log: Vec<LogRecord>,
}

struct Adam {
    m: HashMap<usize, Vec<f32>>,
    v: HashMap<usize, Vec<f32>>,
    t: i32,
}

/// Trains the parameters selected by `freeze` on batches drawn from
/// `schedule`. The input store is not modified; unselected parameters of
/// the returned store share storage with it.
#[allow(clippy::too_many_arguments)]
pub fn train(
    store: &ParameterStore,
    config: &ModelConfig,
    schedule: &DirectionSchedule,
    data: &TrainData,
    freeze: &FreezeSpec,
    opt: &OptimizerConfig,
    seed: u64,
    hook: &mut dyn TrainHook,
    log_path: Option<PathBuf>,
) -> Result<TrainOutcome> {
    opt.validate()?;
    let resolved = freeze.resolve(store)?;
    for (d, e) in schedule.entries() {
        if e.prob > 0.0 && data.get(d).is_none_or(|v| v.is_empty()) {
            return Err(Error::Validation(format!("direction {d} is scheduled but has no data")));
        }
    }
    let mut store = store.clone();
    let mut log = Vec::new();
    let mut log_file = match &log_path {
        Some(p) => Some(
            std::fs::OpenOptions::new().create(true).append(true).open(p).map_err(Error::io_at(p))?,
        ),
        None => None,
    };
    let mut sampler = schedule.sampler(seed);
    let mut adam = Adam { m: HashMap::new(), v: HashMap::new(), t: 0 };
    let (b1, b2) = opt.betas;
    let mut interval_loss = 0.0;
    let mut interval_steps = 0usize;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();

    for step in 1..=opt.max_steps {
        let mut srcs = Vec::with_capacity(opt.batch_size);
        let mut tin = Vec::with_capacity(opt.batch_size);
        let mut tout = Vec::new();
        for _ in 0..opt.batch_size {
            let d = sampler.draw().clone();
            let pool = &data[&d];
            let ex = &pool[sampler.rng().random_range(0..pool.len())];
            *counts.entry(d.to_string()).or_default() += 1;
            srcs.push(ex.src.as_slice());
            tin.push(ex.tgt_in.as_slice());
            tout.extend_from_slice(&ex.tgt_out);
        }
        if srcs.is_empty() {
            log::warn!("empty batch at step {step}; skipped");
            continue;
        }
        let lr = lr_schedule(step, opt);
        let grads = {
            let mut f = Forward::training(&store, config, &resolved.slots, Some(seed ^ (step as u64).wrapping_mul(0x9e37_79b9)));
            let (logits, _) = f.run(&srcs, &tin)?;
            let loss = f.graph.smoothed_xent(logits, &tout, opt.label_smoothing);
            let l = f.graph.value(loss).data()[0] as f64;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss: l });
            }
            interval_loss += l;
            interval_steps += 1;
            f.graph.backward(loss)
        };
        adam.t += 1;
        let bc1 = 1.0 - b1.powi(adam.t);
        let bc2 = 1.0 - b2.powi(adam.t);
        let mut slots: Vec<&usize> = grads.keys().collect();
        slots.sort();
        for &slot in slots {
            let g = &grads[&slot];
            let mask = resolved.masks.get(&slot);
            let cols = g.cols();
            let n = g.len();
            let m = adam.m.entry(slot).or_insert_with(|| vec![0.0; n]);
            let v = adam.v.entry(slot).or_insert_with(|| vec![0.0; n]);
            let p = store.slot_mut(slot).data_mut();
            let mut update = |i: usize| {
                let gi = g.data()[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + opt.adam_eps);
                p[i] = (p[i] as f64 - step) as f32;
            };
            match mask {
                Some(rows) => {
                    for &r in rows {
                        for i in r * cols..(r + 1) * cols {
                            update(i);
                        }
                    }
                }
                None => (0..n).for_each(&mut update),
            }
        }
        if opt.log_interval > 0 && (step % opt.log_interval == 0 || step == opt.max_steps) {
            let dev = hook.on_interval(step, &store)?;
            let rec = LogRecord {
                step,
                loss: interval_loss / interval_steps.max(1) as f64,
                lr,
                directions: std::mem::take(&mut counts),
                dev,
            };
            log::info!("step {step} loss {:.4} lr {:.2e}", rec.loss, lr);
            if let Some(f) = log_file.as_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(f, "{line}").map_err(Error::io_at(log_path.as_ref().unwrap()))?;
            }
            log.push(rec);
            interval_loss = 0.0;
            interval_steps = 0;
        }
    }
    Ok(TrainOutcome { store, log })
}

/// How a new target language is signalled on the source side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeStrategy {
    /// A new code row initialized from the English code and trained.
    Learned,
    /// No code at all.
    None,
    /// The frozen English code.
    FixedEn,
    /// The frozen code of a related initial language.
    Proxy(String),
}

/// Language-specific parameters added on top of the new embeddings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extra {
    /// Layer-norm parameters and biases of one side.
    NormBias(Side),
    Adapters(AdapterSpec),
    /// Every parameter of the selected layers of one side.
    Layers(Side, LayerSel),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Variant {
    pub extras: Vec<Extra>,
    /// Initialize every content row at random instead of copying overlaps.
    pub random_embed_init: bool,
    /// Separate target embedding and output projection.
    pub non_tied: bool,
}

impl Variant {
    pub fn embed_only() -> Self {
        Self::default()
    }

    pub fn with(mut self, extra: Extra) -> Self {
        self.extras.push(extra);
        self
    }
}

/// A store prepared for training a new language, with its freeze mask and
/// the vocabularies and codes to use with it.
#[derive(Clone, Debug)]
pub struct RecipeOutcome {
    pub store: ParameterStore,
    pub freeze: FreezeSpec,
    pub src_vocab: Arc<Vocabulary>,
    pub tgt_vocab: Arc<Vocabulary>,
    pub codes: BTreeMap<String, Option<u32>>,
}

impl RecipeOutcome {
    pub fn model(&self, base: &TranslationModel, store: ParameterStore) -> TranslationModel {
        TranslationModel {
            config: base.config.clone(),
            store: Arc::new(store),
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
            codes: self.codes.clone(),
            decode: base.decode.clone(),
        }
    }
}

/// Rows for `new_vocab`: random, with rows of shared tokens copied from
/// `old` and rows listed in `always` copied regardless.
fn substituted_embedding(
    old: &Tensor,
    old_vocab: &Vocabulary,
    new_vocab: &Vocabulary,
    copy_overlap: bool,
    always: &BTreeMap<u32, u32>,
    seed: u64,
) -> Tensor {
    let d = old.cols();
    let mut emb: Tensor = random_embedding(new_vocab.len(), d, seed);
    if copy_overlap {
        for (n, o) in vocab_overlap(old_vocab, new_vocab) {
            emb.row_mut(n as usize).copy_from_slice(old.row(o as usize));
        }
    }
    for (&n, &o) in always {
        emb.row_mut(n as usize).copy_from_slice(old.row(o as usize));
    }
    emb
}

fn apply_extras(
    store: &mut ParameterStore,
    config: &ModelConfig,
    extras: &[Extra],
    trainable: &mut BTreeSet<String>,
    seed: u64,
) -> Result<()> {
    for (i, extra) in extras.iter().enumerate() {
        match extra {
            Extra::NormBias(side) => {
                let sel = Selector::Role(Role::Norm)
                    .or(Selector::Role(Role::Bias))
                    .and(Selector::pattern(format!("{}.*", side.prefix())));
                trainable.extend(select_parameters(store, &sel));
            }
            Extra::Adapters(spec) => {
                let before: BTreeSet<String> = store.names().map(str::to_string).collect();
                *store = insert_adapters(store, config, std::slice::from_ref(spec), seed.wrapping_add(i as u64 + 1))?;
                trainable.extend(store.names().filter(|n| !before.contains(*n)).map(str::to_string));
            }
            Extra::Layers(side, sel) => {
                for l in sel.resolve(config.layers(*side))? {
                    let prefix = format!("{}.", layer_prefix(*side, l));
                    trainable.extend(
                        store
                            .names()
                            .filter(|n| n.starts_with(&prefix) && parse_adapter_name(n).is_none())
                            .map(str::to_string),
                    );
                }
            }
        }
    }
    Ok(())
}

/// Replaces the source embedding with one sized to `new_vocab`.
///
/// Rows of tokens shared with the base vocabulary copy their base values
/// (unless the variant asks for random init); language-code rows always
/// copy. The new embedding plus the variant's extras are trainable.
pub fn recipe_new_source(
    base: &TranslationModel,
    new_vocab: &Vocabulary,
    variant: &Variant,
    seed: u64,
) -> Result<RecipeOutcome> {
    let mut always = BTreeMap::new();
    let mut codes = BTreeMap::new();
    for (lang, &old_id) in base.src_vocab.lang_codes() {
        let id = new_vocab.id(&lang_code_token(lang)).ok_or_else(|| Error::MissingLangCode(lang.clone()))?;
        always.insert(id, old_id);
        codes.insert(lang.clone(), Some(id));
    }
    let old = base.store.get(SRC_EMBED)?;
    let emb = substituted_embedding(old, &base.src_vocab, new_vocab, !variant.random_embed_init, &always, seed);
    let mut store = (*base.store).clone();
    store.rebind(&[(SRC_EMBED, Role::SrcEmbed)], emb);
    let mut trainable = BTreeSet::from([SRC_EMBED.to_string()]);
    apply_extras(&mut store, &base.config, &variant.extras, &mut trainable, seed)?;
    store.compact();
    Ok(RecipeOutcome {
        store,
        freeze: FreezeSpec::new(trainable),
        src_vocab: Arc::new(new_vocab.clone()),
        tgt_vocab: base.tgt_vocab.clone(),
        codes,
    })
}

/// Replaces the target embedding and output projection with ones sized to
/// `new_vocab` and sets up the source-side code for `new_lang`.
pub fn recipe_new_target(
    base: &TranslationModel,
    new_lang: &str,
    new_vocab: &Vocabulary,
    variant: &Variant,
    strategy: &CodeStrategy,
    seed: u64,
) -> Result<RecipeOutcome> {
    let copy = !variant.random_embed_init;
    let none = BTreeMap::new();
    let mut store = (*base.store).clone();
    let tgt = substituted_embedding(base.store.get(TGT_EMBED)?, &base.tgt_vocab, new_vocab, copy, &none, seed);
    let mut trainable = BTreeSet::from([TGT_EMBED.to_string(), OUT_PROJ.to_string()]);
    if variant.non_tied {
        let out = substituted_embedding(base.store.get(OUT_PROJ)?, &base.tgt_vocab, new_vocab, copy, &none, seed ^ 0x5eed);
        store.rebind(&[(TGT_EMBED, Role::TgtEmbed)], tgt);
        store.rebind(&[(OUT_PROJ, Role::OutProj)], out);
    } else {
        store.rebind(&[(TGT_EMBED, Role::TgtEmbed), (OUT_PROJ, Role::OutProj)], tgt);
    }
    let base_code = |lang: &str| base.src_vocab.lang_code(lang).ok_or_else(|| Error::MissingLangCode(lang.to_string()));
    let mut src_vocab = base.src_vocab.clone();
    let mut freeze_rows = None;
    let code = match strategy {
        CodeStrategy::Learned => {
            let en = base_code(ENGLISH)?;
            let grown_vocab = base.src_vocab.with_lang_code(new_lang)?;
            let mut emb = base.store.get(SRC_EMBED)?.clone();
            let en_row = emb.row(en as usize).to_vec();
            emb.push_row(&en_row)?;
            let id = grown_vocab.lang_code(new_lang).expect("just added");
            if id as usize != emb.rows() - 1 {
                return Err(Error::Validation("language-code row must be appended last".into()));
            }
            store.rebind(&[(SRC_EMBED, Role::SrcEmbed)], emb);
            src_vocab = Arc::new(grown_vocab);
            freeze_rows = Some(id as usize);
            Some(id)
        }
        CodeStrategy::None => None,
        CodeStrategy::FixedEn => Some(base_code(ENGLISH)?),
        CodeStrategy::Proxy(tag) => {
            if tag.is_empty() {
                return Err(Error::Validation("proxy code strategy needs a language tag".into()));
            }
            Some(base_code(tag)?)
        }
    };
    apply_extras(&mut store, &base.config, &variant.extras, &mut trainable, seed)?;
    store.compact();
    let mut freeze = FreezeSpec::new(trainable);
    if let Some(row) = freeze_rows {
        freeze = freeze.with_rows(SRC_EMBED, [row]);
    }
    Ok(RecipeOutcome {
        store,
        freeze,
        src_vocab,
        tgt_vocab: Arc::new(new_vocab.clone()),
        codes: BTreeMap::from([(new_lang.to_string(), code)]),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    /// Full joint vocabulary; overlapping rows copied, others random.
    FullRetrain,
    /// Vocabulary truncated to the original size; every row starts from the
    /// base row at the same index unless the token itself is shared.
    Garcia,
}

/// Rebuilds the (shared) embeddings on a joint vocabulary and makes every
/// parameter trainable.
pub fn recipe_retrain_baseline(
    base: &TranslationModel,
    joint_vocab: &Vocabulary,
    mode: RetrainMode,
    seed: u64,
) -> Result<RecipeOutcome> {
    if base.src_vocab != base.tgt_vocab {
        return Err(Error::Validation("re-training baselines need a shared base vocabulary".into()));
    }
    let vocab = match mode {
        RetrainMode::FullRetrain => joint_vocab.clone(),
        RetrainMode::Garcia => joint_vocab.truncated(base.src_vocab.len().min(joint_vocab.len()))?,
    };
    let overlap = vocab_overlap(&base.src_vocab, &vocab);
    let mut store = (*base.store).clone();
    let mut rebound: HashMap<usize, Vec<(&str, Role)>> = HashMap::new();
    for (name, role) in [(SRC_EMBED, Role::SrcEmbed), (TGT_EMBED, Role::TgtEmbed), (OUT_PROJ, Role::OutProj)] {
        rebound.entry(base.store.entry(name)?.slot).or_default().push((name, role));
    }
    let mut groups: Vec<_> = rebound.into_iter().collect();
    groups.sort_by_key(|(slot, _)| *slot);
    for (i, (_, names)) in groups.into_iter().enumerate() {
        let old = base.store.get(names[0].0)?;
        let mut emb: Tensor = random_embedding(vocab.len(), old.cols(), seed.wrapping_add(i as u64));
        if mode == RetrainMode::Garcia {
            for r in 0..vocab.len().min(old.rows()) {
                emb.row_mut(r).copy_from_slice(old.row(r));
            }
        }
        for (&n, &o) in &overlap {
            emb.row_mut(n as usize).copy_from_slice(old.row(o as usize));
        }
        store.rebind(&names, emb);
    }
    store.compact();
    let vocab = Arc::new(vocab);
    let codes = vocab.lang_codes().iter().map(|(l, &id)| (l.clone(), Some(id))).collect();
    Ok(RecipeOutcome { freeze: FreezeSpec::all(&store), store, src_vocab: vocab.clone(), tgt_vocab: vocab, codes })
}

/// Multiplies the weight of every direction involving `lang` by `factor`.
pub fn upsample_language(schedule: &DirectionSchedule, lang: &str, factor: f64) -> Result<DirectionSchedule> {
    schedule.upsampled(|d| d.involves(lang), factor)
}
