//! Encoder-decoder transformer over a named parameter registry.
//!
//! Every parameter lives under a hierarchical name such as
//! `encoder.layer1.attn.q_proj.weight`. Several names may resolve to one
//! underlying array, which is how embedding tying is expressed. Adapters are
//! discovered from their names at forward time, so inserting or stacking
//! them needs no change to the configuration.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnSeg, Graph, NodeId};
use crate::tensor::{sinusoidal_positions, Scalar, Tensor};
use crate::tokenizer::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "yes")]
    pub tie_target_embed_and_output: bool,
    #[serde(default = "yes")]
    pub tie_all_embeddings: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.d_ffn == 0 {
            return bad("d_ffn must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.tie_all_embeddings && !self.tie_target_embed_and_output {
            return bad("tying all embeddings implies tying the target embedding and output".into());
        }
        Ok(())
    }

    pub fn layers(&self, side: Side) -> usize {
        match side {
            Side::Encoder => self.enc_layers,
            Side::Decoder => self.dec_layers,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SrcEmbed,
    TgtEmbed,
    OutProj,
    LangCodeRow,
    Encoder,
    Decoder,
    Adapter,
    Norm,
    Bias,
    Other,
}

impl Role {
    pub const ALL: [Role; 10] = [
        Role::SrcEmbed,
        Role::TgtEmbed,
        Role::OutProj,
        Role::LangCodeRow,
        Role::Encoder,
        Role::Decoder,
        Role::Adapter,
        Role::Norm,
        Role::Bias,
        Role::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::SrcEmbed => "src_embed",
            Role::TgtEmbed => "tgt_embed",
            Role::OutProj => "out_proj",
            Role::LangCodeRow => "lang_code_row",
            Role::Encoder => "encoder",
            Role::Decoder => "decoder",
            Role::Adapter => "adapter",
            Role::Norm => "norm",
            Role::Bias => "bias",
            Role::Other => "other",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Parse { what: "role", detail: format!("unknown role {s:?}") })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub fn prefix(self) -> &'static str {
        match self {
            Side::Encoder => "encoder",
            Side::Decoder => "decoder",
        }
    }
}

pub const SRC_EMBED: &str = "src_embed";
pub const TGT_EMBED: &str = "tgt_embed";
pub const OUT_PROJ: &str = "out_proj";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Entry {
    pub slot: usize,
    pub role: Role,
}

/// Named parameters backed by shared, copy-on-write arrays.
#[derive(Clone, Debug)]
pub struct ParameterStore<T: Scalar = f32> {
    slots: Vec<Arc<Tensor<T>>>,
    entries: BTreeMap<String, Entry>,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self { slots: Vec::new(), entries: BTreeMap::new() }
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, role: Role) -> Result<()> {
        self.insert_shared(name, Arc::new(value), role)
    }

    pub fn insert_shared(&mut self, name: &str, value: Arc<Tensor<T>>, role: Role) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Validation(format!("parameter {name} already exists")));
        }
        self.slots.push(value);
        self.entries.insert(name.to_string(), Entry { slot: self.slots.len() - 1, role });
        Ok(())
    }

    /// Makes `name` resolve to the same array as `target`.
    pub fn alias(&mut self, name: &str, target: &str, role: Role) -> Result<()> {
        let slot = self.entry(target)?.slot;
        if self.entries.contains_key(name) {
            return Err(Error::Validation(format!("parameter {name} already exists")));
        }
        self.entries.insert(name.to_string(), Entry { slot, role });
        Ok(())
    }

    /// Points every name in `names` at one fresh array, detaching them from
    /// whatever they shared before. Names that do not exist are created with
    /// the given role; existing names keep theirs.
    pub fn rebind(&mut self, names: &[(&str, Role)], value: Tensor<T>) {
        self.rebind_shared(names, Arc::new(value));
    }

    /// As [`rebind`](Self::rebind) with an array that may be shared elsewhere.
    pub fn rebind_shared(&mut self, names: &[(&str, Role)], value: Arc<Tensor<T>>) {
        self.slots.push(value);
        let slot = self.slots.len() - 1;
        for &(name, role) in names {
            let role = self.entries.get(name).map_or(role, |e| e.role);
            self.entries.insert(name.to_string(), Entry { slot, role });
        }
    }

    pub fn remove(&mut self, name: &str) -> Result<()> {
        self.entries.remove(name).map(|_| ()).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<Entry> {
        self.entries.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn role(&self, name: &str) -> Result<Role> {
        Ok(self.entry(name)?.role)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.slots[self.entry(name)?.slot])
    }

    pub fn shared(&self, name: &str) -> Result<Arc<Tensor<T>>> {
        Ok(self.slots[self.entry(name)?.slot].clone())
    }

    /// Mutable access; the write is visible through every alias of `name`.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let slot = self.entry(name)?.slot;
        Ok(Arc::make_mut(&mut self.slots[slot]))
    }

    pub fn slot_value(&self, slot: usize) -> &Arc<Tensor<T>> {
        &self.slots[slot]
    }

    pub(crate) fn slot_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.slots[slot])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, Entry)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), *e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Names sharing the array behind `name`, including `name` itself.
    pub fn aliases(&self, name: &str) -> Result<Vec<String>> {
        let slot = self.entry(name)?.slot;
        Ok(self.entries.iter().filter(|(_, e)| e.slot == slot).map(|(k, _)| k.clone()).collect())
    }

    pub fn same_array(&self, a: &str, b: &str) -> Result<bool> {
        Ok(self.entry(a)?.slot == self.entry(b)?.slot)
    }

    /// The first name (in sorted order) bound to each live array.
    pub fn canonical_names(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.entries.iter().filter(|(_, e)| seen.insert(e.slot)).map(|(k, _)| k.clone()).collect()
    }

    /// Number of scalar values in the distinct arrays behind `names`.
    pub fn count_values<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<usize> {
        let mut seen = HashSet::new();
        let mut total = 0;
        for n in names {
            let e = self.entry(n)?;
            if seen.insert(e.slot) {
                total += self.slots[e.slot].len();
            }
        }
        Ok(total)
    }

    pub fn total_values(&self) -> usize {
        self.count_values(self.names().collect::<Vec<_>>()).unwrap_or(0)
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            slots: self.slots.iter().map(|t| Arc::new(t.cast())).collect(),
            entries: self.entries.clone(),
        }
    }

    /// Drops arrays no name refers to any longer.
    pub fn compact(&mut self) {
        let mut remap = vec![usize::MAX; self.slots.len()];
        let mut slots = Vec::new();
        for e in self.entries.values_mut() {
            if remap[e.slot] == usize::MAX {
                remap[e.slot] = slots.len();
                slots.push(self.slots[e.slot].clone());
            }
            e.slot = remap[e.slot];
        }
        self.slots = slots;
    }
}

impl ParameterStore<f32> {
    /// Same names, roles, aliasing structure and bit patterns.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        if self.entries.len() != other.entries.len() {
            return false;
        }
        for ((na, ea), (nb, eb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ea.role != eb.role || !self.slots[ea.slot].bitwise_eq(&other.slots[eb.slot]) {
                return false;
            }
        }
        let pattern = |s: &Self| {
            let names: Vec<&String> = s.entries.keys().collect();
            names.iter().map(|n| s.entries[*n].slot).collect::<Vec<_>>()
        };
        let (pa, pb) = (pattern(self), pattern(other));
        (0..pa.len()).all(|i| (0..i).all(|j| (pa[i] == pa[j]) == (pb[i] == pb[j])))
    }
}

/// Which layers of one side an adapter or layer selection applies to.
/// Layer numbers are 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSel {
    All,
    First,
    Last,
    Set(BTreeSet<usize>),
}

impl LayerSel {
    pub fn resolve(&self, depth: usize) -> Result<Vec<usize>> {
        match self {
            LayerSel::All => Ok((1..=depth).collect()),
            LayerSel::First => Ok(vec![1]),
            LayerSel::Last => Ok(vec![depth]),
            LayerSel::Set(s) => {
                if s.is_empty() || s.iter().any(|&i| i == 0 || i > depth) {
                    return Err(Error::Validation(format!("layer set {s:?} outside 1..={depth}")));
                }
                Ok(s.iter().copied().collect())
            }
        }
    }
}

impl fmt::Display for LayerSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSel::All => f.write_str("all"),
            LayerSel::First => f.write_str("first"),
            LayerSel::Last => f.write_str("last"),
            LayerSel::Set(s) => {
                let v: Vec<String> = s.iter().map(usize::to_string).collect();
                f.write_str(&v.join(","))
            }
        }
    }
}

impl FromStr for LayerSel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => LayerSel::All,
            "first" => LayerSel::First,
            "last" => LayerSel::Last,
            _ => LayerSel::Set(
                s.split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Parse { what: "layer selection", detail: format!("{s:?}: {e}") })?,
            ),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub side: Side,
    pub layers: LayerSel,
    pub bottleneck: usize,
}

impl AdapterSpec {
    pub fn new(side: Side, layers: LayerSel, bottleneck: usize) -> Self {
        Self { side, layers, bottleneck }
    }
}

pub fn layer_prefix(side: Side, layer: usize) -> String {
    format!("{}.layer{layer}", side.prefix())
}

pub fn adapter_prefix(side: Side, layer: usize, k: usize) -> String {
    format!("{}.adapter{k}", layer_prefix(side, layer))
}

/// Splits an adapter parameter name into (side, layer, index, rest).
pub fn parse_adapter_name(name: &str) -> Option<(Side, usize, usize, &str)> {
    let (side, rest) = if let Some(r) = name.strip_prefix("encoder.layer") {
        (Side::Encoder, r)
    } else {
        (Side::Decoder, name.strip_prefix("decoder.layer")?)
    };
    let (layer, rest) = rest.split_once('.')?;
    let rest = rest.strip_prefix("adapter")?;
    let (k, tail) = rest.split_once('.')?;
    Some((side, layer.parse().ok()?, k.parse().ok()?, tail))
}

/// Number of adapters currently installed after one layer.
pub fn adapter_count<T: Scalar>(store: &ParameterStore<T>, side: Side, layer: usize) -> usize {
    let mut k = 0;
    while store.contains(&format!("{}.down.weight", adapter_prefix(side, layer, k + 1))) {
        k += 1;
    }
    k
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| T::from_f64_lossy(dist.sample(&mut self.rng))).collect();
        Tensor::matrix(rows, cols, data)
    }

    fn linear<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.normal(fan_in, fan_out, (2.0 / (fan_in + fan_out) as f64).sqrt())
    }
}

/// Fresh rows drawn like the embedding initializer, for vocabulary substitution.
pub fn random_embedding<T: Scalar>(rows: usize, d_model: usize, seed: u64) -> Tensor<T> {
    Init { rng: ChaCha8Rng::seed_from_u64(seed) }.normal(rows, d_model, (d_model as f64).powf(-0.5))
}

fn add_linear<T: Scalar>(
    s: &mut ParameterStore<T>,
    init: &mut Init,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    role: Role,
) -> Result<()> {
    s.insert(&format!("{prefix}.weight"), init.linear(fan_in, fan_out), role)?;
    s.insert(&format!("{prefix}.bias"), Tensor::zeros(&[fan_out]), Role::Bias)
}

fn add_norm<T: Scalar>(s: &mut ParameterStore<T>, prefix: &str, d: usize, role: Role) -> Result<()> {
    s.insert(&format!("{prefix}.gain"), Tensor::filled(&[d], T::one()), role)?;
    s.insert(&format!("{prefix}.bias"), Tensor::zeros(&[d]), Role::Norm)
}

fn add_attention<T: Scalar>(
    s: &mut ParameterStore<T>,
    init: &mut Init,
    prefix: &str,
    d: usize,
    role: Role,
) -> Result<()> {
    for p in ["q_proj", "k_proj", "v_proj", "o_proj"] {
        add_linear(s, init, &format!("{prefix}.{p}"), d, d, role)?;
    }
    Ok(())
}

/// Initializes a model for the given vocabulary (shared by both sides).
pub fn init_model(config: &ModelConfig, vocab: &Vocabulary, seed: u64) -> Result<ParameterStore> {
    init_model_sized(config, vocab.len(), vocab.len(), seed)
}

/// Initializes a model with explicit source and target vocabulary sizes.
pub fn init_model_sized<T: Scalar>(
    config: &ModelConfig,
    src_vocab: usize,
    tgt_vocab: usize,
    seed: u64,
) -> Result<ParameterStore<T>> {
    config.validate()?;
    if config.tie_all_embeddings && src_vocab != tgt_vocab {
        return Err(Error::Validation("tying all embeddings needs equal vocabulary sizes".into()));
    }
    let d = config.d_model;
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
    let mut s = ParameterStore::new();
    let emb_std = (d as f64).powf(-0.5);
    s.insert(SRC_EMBED, init.normal(src_vocab, d, emb_std), Role::SrcEmbed)?;
    if config.tie_all_embeddings {
        s.alias(TGT_EMBED, SRC_EMBED, Role::TgtEmbed)?;
    } else {
        s.insert(TGT_EMBED, init.normal(tgt_vocab, d, emb_std), Role::TgtEmbed)?;
    }
    if config.tie_target_embed_and_output {
        s.alias(OUT_PROJ, TGT_EMBED, Role::OutProj)?;
    } else {
        s.insert(OUT_PROJ, init.normal(tgt_vocab, d, emb_std), Role::OutProj)?;
    }
    for side in [Side::Encoder, Side::Decoder] {
        let role = match side {
            Side::Encoder => Role::Encoder,
            Side::Decoder => Role::Decoder,
        };
        for l in 1..=config.layers(side) {
            let p = layer_prefix(side, l);
            add_attention(&mut s, &mut init, &format!("{p}.self_attn"), d, role)?;
            add_norm(&mut s, &format!("{p}.self_attn_norm"), d, Role::Norm)?;
            if side == Side::Decoder {
                add_attention(&mut s, &mut init, &format!("{p}.cross_attn"), d, role)?;
                add_norm(&mut s, &format!("{p}.cross_attn_norm"), d, Role::Norm)?;
            }
            add_linear(&mut s, &mut init, &format!("{p}.ffn.w1"), d, config.d_ffn, role)?;
            add_linear(&mut s, &mut init, &format!("{p}.ffn.w2"), config.d_ffn, d, role)?;
            add_norm(&mut s, &format!("{p}.ffn_norm"), d, Role::Norm)?;
        }
    }
    Ok(s)
}

/// Adds one residual bottleneck adapter per selected layer. Adapters already
/// present at a layer are kept and the new one runs after them. Placing two
/// adapters at the same layer in one call is an error.
pub fn insert_adapters<T: Scalar>(
    store: &ParameterStore<T>,
    config: &ModelConfig,
    specs: &[AdapterSpec],
    seed: u64,
) -> Result<ParameterStore<T>> {
    let mut out = store.clone();
    let mut placed = BTreeSet::new();
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
    let d = config.d_model;
    for spec in specs {
        if spec.bottleneck == 0 {
            return Err(Error::Validation("adapter bottleneck must be at least 1".into()));
        }
        for layer in spec.layers.resolve(config.layers(spec.side))? {
            if !placed.insert((spec.side, layer)) {
                return Err(Error::DuplicateAdapter(layer_prefix(spec.side, layer)));
            }
            let k = adapter_count(&out, spec.side, layer) + 1;
            let p = adapter_prefix(spec.side, layer, k);
            let b = spec.bottleneck;
            out.insert(&format!("{p}.norm.gain"), Tensor::filled(&[d], T::one()), Role::Adapter)?;
            out.insert(&format!("{p}.norm.bias"), Tensor::zeros(&[d]), Role::Adapter)?;
            out.insert(&format!("{p}.down.weight"), init.linear(d, b), Role::Adapter)?;
            out.insert(&format!("{p}.down.bias"), Tensor::zeros(&[b]), Role::Adapter)?;
            out.insert(&format!("{p}.up.weight"), Tensor::zeros(&[b, d]), Role::Adapter)?;
            out.insert(&format!("{p}.up.bias"), Tensor::zeros(&[d]), Role::Adapter)?;
        }
    }
    Ok(out)
}

/// A composable predicate over (name, role).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    All,
    Role(Role),
    /// Glob over names; `*` matches any run of characters.
    Pattern(String),
    Union(Vec<Selector>),
    Intersect(Vec<Selector>),
    Not(Box<Selector>),
}

fn glob(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !text.starts_with(first) || text.len() < first.len() + last.len() || !text.ends_with(last) {
        return false;
    }
    let mut rest = &text[first.len()..text.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

impl Selector {
    pub fn pattern(p: impl Into<String>) -> Self {
        Selector::Pattern(p.into())
    }

    pub fn or(self, other: Selector) -> Self {
        Selector::Union(vec![self, other])
    }

    pub fn and(self, other: Selector) -> Self {
        Selector::Intersect(vec![self, other])
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Self {
        Selector::Not(Box::new(self))
    }

    pub fn matches(&self, name: &str, role: Role) -> bool {
        match self {
            Selector::All => true,
            Selector::Role(r) => *r == role,
            Selector::Pattern(p) => glob(p, name),
            Selector::Union(v) => v.iter().any(|s| s.matches(name, role)),
            Selector::Intersect(v) => v.iter().all(|s| s.matches(name, role)),
            Selector::Not(s) => !s.matches(name, role),
        }
    }

    /// Parses `a | b & !c` where atoms are `all`, `role:<role>` or a glob.
    /// `&` binds tighter than `|`.
    pub fn parse(text: &str) -> Result<Self> {
        let union: Vec<Selector> = text
            .split('|')
            .map(|conj| {
                let terms: Vec<Selector> = conj.split('&').map(Self::parse_atom).collect::<Result<_>>()?;
                Ok(if terms.len() == 1 { terms.into_iter().next().unwrap() } else { Selector::Intersect(terms) })
            })
            .collect::<Result<_>>()?;
        Ok(if union.len() == 1 { union.into_iter().next().unwrap() } else { Selector::Union(union) })
    }

    fn parse_atom(atom: &str) -> Result<Self> {
        let atom = atom.trim();
        if let Some(rest) = atom.strip_prefix('!') {
            return Ok(Self::parse_atom(rest)?.not());
        }
        if atom.is_empty() {
            return Err(Error::Parse { what: "selector", detail: "empty term".into() });
        }
        Ok(match atom {
            "all" => Selector::All,
            _ => match atom.strip_prefix("role:") {
                Some(r) => Selector::Role(r.parse()?),
                None => Selector::Pattern(atom.to_string()),
            },
        })
    }
}

pub fn select_parameters<T: Scalar>(store: &ParameterStore<T>, selector: &Selector) -> BTreeSet<String> {
    store.entries().filter(|(n, e)| selector.matches(n, e.role)).map(|(n, _)| n.to_string()).collect()
}

/// Source ids as the model expects them: optional code, tokens, eos.
pub fn source_ids(vocab: &Vocabulary, text: &str, code: Option<u32>) -> Vec<u32> {
    let mut ids: Vec<u32> = code.into_iter().collect();
    ids.extend(vocab.encode(text));
    ids.push(vocab.specials().eos);
    ids
}

/// Builds the computation for one batch into a graph.
pub struct Forward<'a, T: Scalar> {
    pub graph: Graph<T>,
    store: &'a ParameterStore<T>,
    config: &'a ModelConfig,
    trainable: Option<&'a HashSet<usize>>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

/// Row ranges of the packed sequences in a batch.
#[derive(Clone, Debug)]
pub struct Packing {
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Packing {
    fn of<S: AsRef<[u32]>>(seqs: &[S]) -> Self {
        let mut starts = Vec::with_capacity(seqs.len());
        let mut lens = Vec::with_capacity(seqs.len());
        let mut at = 0;
        for s in seqs {
            starts.push(at);
            lens.push(s.as_ref().len());
            at += s.as_ref().len();
        }
        Self { starts, lens }
    }

    pub fn rows(&self) -> usize {
        self.starts.last().map_or(0, |s| s + self.lens.last().unwrap())
    }

    /// Index of the last row of each sequence.
    pub fn last_rows(&self) -> Vec<u32> {
        self.starts.iter().zip(&self.lens).map(|(s, l)| (s + l - 1) as u32).collect()
    }
}

impl<'a, T: Scalar> Forward<'a, T> {
    /// Inference-mode graph: no gradients, no dropout.
    pub fn inference(store: &'a ParameterStore<T>, config: &'a ModelConfig) -> Self {
        Self { graph: Graph::new(false), store, config, trainable: None, dropout: None }
    }

    /// Training-mode graph. Only slots in `trainable` receive gradients.
    pub fn training(
        store: &'a ParameterStore<T>,
        config: &'a ModelConfig,
        trainable: &'a HashSet<usize>,
        dropout_seed: Option<u64>,
    ) -> Self {
        let dropout = dropout_seed
            .filter(|_| config.dropout > 0.0)
            .map(|s| (config.dropout, ChaCha8Rng::seed_from_u64(s)));
        Self { graph: Graph::new(true), store, config, trainable: Some(trainable), dropout }
    }

    fn p(&mut self, name: &str) -> Result<NodeId> {
        let e = self.store.entry(name)?;
        let trainable = self.trainable.is_some_and(|t| t.contains(&e.slot));
        Ok(self.graph.param(e.slot, self.store.slot_value(e.slot).clone(), trainable))
    }

    fn drop(&mut self, x: NodeId) -> NodeId {
        match &mut self.dropout {
            Some((p, rng)) => self.graph.dropout(x, *p, rng),
            None => x,
        }
    }

    fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let y = self.graph.matmul(x, w);
        Ok(self.graph.add_bias(y, b))
    }

    fn norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.p(&format!("{prefix}.gain"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        Ok(self.graph.layer_norm(x, g, b))
    }

    fn attention(&mut self, xq: NodeId, xkv: NodeId, prefix: &str, segs: &Arc<Vec<AttnSeg>>) -> Result<NodeId> {
        let q = self.linear(xq, &format!("{prefix}.q_proj"))?;
        let k = self.linear(xkv, &format!("{prefix}.k_proj"))?;
        let v = self.linear(xkv, &format!("{prefix}.v_proj"))?;
        let a = self.graph.attention(q, k, v, segs.clone(), self.config.n_heads);
        self.linear(a, &format!("{prefix}.o_proj"))
    }

    /// `x = norm(x + dropout(f(x)))`.
    fn residual(&mut self, x: NodeId, y: NodeId, norm: &str) -> Result<NodeId> {
        let y = self.drop(y);
        let s = self.graph.add(x, y);
        self.norm(s, norm)
    }

    fn ffn(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let h = self.linear(x, &format!("{prefix}.w1"))?;
        let h = self.graph.relu(h);
        let h = self.drop(h);
        self.linear(h, &format!("{prefix}.w2"))
    }

    fn adapters(&mut self, mut x: NodeId, side: Side, layer: usize) -> Result<NodeId> {
        for k in 1..=adapter_count(self.store, side, layer) {
            let p = adapter_prefix(side, layer, k);
            let h = self.norm(x, &format!("{p}.norm"))?;
            let h = self.linear(h, &format!("{p}.down"))?;
            let h = self.graph.relu(h);
            let h = self.linear(h, &format!("{p}.up"))?;
            x = self.graph.add(x, h);
        }
        Ok(x)
    }

    fn embed<S: AsRef<[u32]>>(&mut self, table: &str, seqs: &[S]) -> Result<(NodeId, Packing)> {
        let rows = self.store.get(table)?.rows();
        let packing = Packing::of(seqs);
        let mut ids = Vec::with_capacity(packing.rows());
        for s in seqs {
            for &id in s.as_ref() {
                if id as usize >= rows {
                    return Err(Error::IdOutOfRange { id, size: rows });
                }
                ids.push(id);
            }
        }
        let d = self.config.d_model;
        let max_len = packing.lens.iter().copied().max().unwrap_or(0);
        let pos: Tensor<T> = sinusoidal_positions(max_len, d);
        let mut pe = Vec::with_capacity(ids.len() * d);
        for &len in &packing.lens {
            pe.extend_from_slice(&pos.data()[..len * d]);
        }
        let t = self.p(table)?;
        let x = self.graph.gather(t, &ids, T::from_f64_lossy((d as f64).sqrt()));
        let x = self.graph.add_const(x, &pe);
        Ok((self.drop(x), packing))
    }

    /// Encodes packed source sequences; returns memory rows and packing.
    pub fn encode<S: AsRef<[u32]>>(&mut self, srcs: &[S]) -> Result<(NodeId, Packing)> {
        if srcs.iter().any(|s| s.as_ref().is_empty()) {
            return Err(Error::Validation("empty source sequence".into()));
        }
        let (mut x, pk) = self.embed(SRC_EMBED, srcs)?;
        let segs: Arc<Vec<AttnSeg>> = Arc::new(
            pk.starts
                .iter()
                .zip(&pk.lens)
                .map(|(&s, &l)| AttnSeg { q_start: s, q_len: l, k_start: s, k_len: l, causal: false })
                .collect(),
        );
        for l in 1..=self.config.enc_layers {
            let p = layer_prefix(Side::Encoder, l);
            let a = self.attention(x, x, &format!("{p}.self_attn"), &segs)?;
            x = self.residual(x, a, &format!("{p}.self_attn_norm"))?;
            let f = self.ffn(x, &format!("{p}.ffn"))?;
            x = self.residual(x, f, &format!("{p}.ffn_norm"))?;
            x = self.adapters(x, Side::Encoder, l)?;
        }
        Ok((x, pk))
    }

    /// Runs the decoder over packed target inputs. `memory_of[i]` names the
    /// (start, len) of the memory rows that target sequence `i` attends to.
    pub fn decode<S: AsRef<[u32]>>(
        &mut self,
        memory: NodeId,
        memory_of: &[(usize, usize)],
        tgt_in: &[S],
    ) -> Result<(NodeId, Packing)> {
        if tgt_in.iter().any(|s| s.as_ref().is_empty()) {
            return Err(Error::Validation("empty decoder input".into()));
        }
        let (mut x, pk) = self.embed(TGT_EMBED, tgt_in)?;
        let self_segs: Arc<Vec<AttnSeg>> = Arc::new(
            pk.starts
                .iter()
                .zip(&pk.lens)
                .map(|(&s, &l)| AttnSeg { q_start: s, q_len: l, k_start: s, k_len: l, causal: true })
                .collect(),
        );
        let cross_segs: Arc<Vec<AttnSeg>> = Arc::new(
            pk.starts
                .iter()
                .zip(&pk.lens)
                .zip(memory_of)
                .map(|((&s, &l), &(ms, ml))| AttnSeg { q_start: s, q_len: l, k_start: ms, k_len: ml, causal: false })
                .collect(),
        );
        for l in 1..=self.config.dec_layers {
            let p = layer_prefix(Side::Decoder, l);
            let a = self.attention(x, x, &format!("{p}.self_attn"), &self_segs)?;
            x = self.residual(x, a, &format!("{p}.self_attn_norm"))?;
            let c = self.attention(x, memory, &format!("{p}.cross_attn"), &cross_segs)?;
            x = self.residual(x, c, &format!("{p}.cross_attn_norm"))?;
            let f = self.ffn(x, &format!("{p}.ffn"))?;
            x = self.residual(x, f, &format!("{p}.ffn_norm"))?;
            x = self.adapters(x, Side::Decoder, l)?;
        }
        Ok((x, pk))
    }

    pub fn logits(&mut self, hidden: NodeId) -> Result<NodeId> {
        let w = self.p(OUT_PROJ)?;
        Ok(self.graph.matmul_t(hidden, w))
    }

    /// Full teacher-forced pass over `(src, tgt_in)` pairs.
    pub fn run<S: AsRef<[u32]>>(&mut self, srcs: &[S], tgt_in: &[S]) -> Result<(NodeId, Packing)> {
        if srcs.len() != tgt_in.len() {
            return Err(Error::Validation("source and target batch sizes differ".into()));
        }
        let (mem, spk) = self.encode(srcs)?;
        let memory_of: Vec<(usize, usize)> = spk.starts.iter().copied().zip(spk.lens.iter().copied()).collect();
        let (h, tpk) = self.decode(mem, &memory_of, tgt_in)?;
        Ok((self.logits(h)?, tpk))
    }
}

/// Logits for one sentence: `tgt_in` starts with bos, one row per position.
pub fn forward<T: Scalar>(
    store: &ParameterStore<T>,
    config: &ModelConfig,
    src_ids: &[u32],
    tgt_in: &[u32],
) -> Result<Tensor<T>> {
    let mut f = Forward::inference(store, config);
    let (logits, _) = f.run(&[src_ids], &[tgt_in])?;
    Ok(f.graph.value(logits).clone())
}

/// Per-sentence logits for a batch; sentences do not interact.
pub fn forward_batch<T: Scalar>(
    store: &ParameterStore<T>,
    config: &ModelConfig,
    srcs: &[Vec<u32>],
    tgt_in: &[Vec<u32>],
) -> Result<Vec<Tensor<T>>> {
    let mut f = Forward::inference(store, config);
    let (logits, pk) = f.run(srcs, tgt_in)?;
    let all = f.graph.value(logits);
    let v = all.cols();
    Ok(pk
        .starts
        .iter()
        .zip(&pk.lens)
        .map(|(&s, &l)| Tensor::matrix(l, v, all.data()[s * v..(s + l) * v].to_vec()))
        .collect())
}

/// Encoder output for one source sentence, reusable across decoding steps.
#[derive(Clone, Debug)]
pub struct EncodedSource<T: Scalar = f32> {
    pub memory: Arc<Tensor<T>>,
}

pub fn encode_source<T: Scalar>(
    store: &ParameterStore<T>,
    config: &ModelConfig,
    src_ids: &[u32],
) -> Result<EncodedSource<T>> {
    let mut f = Forward::inference(store, config);
    let (mem, _) = f.encode(&[src_ids])?;
    Ok(EncodedSource { memory: f.graph.shared_value(mem) })
}

/// Log-probabilities of the next token after each prefix (each starting with bos).
pub fn next_log_probs<T: Scalar>(
    store: &ParameterStore<T>,
    config: &ModelConfig,
    src: &EncodedSource<T>,
    prefixes: &[Vec<u32>],
) -> Result<Vec<Vec<f64>>> {
    let mut f = Forward::inference(store, config);
    let mem = f.graph.constant_shared(src.memory.clone());
    let memory_of = vec![(0, src.memory.rows()); prefixes.len()];
    let (h, pk) = f.decode(mem, &memory_of, prefixes)?;
    let last = f.graph.gather(h, &pk.last_rows(), T::one());
    let logits = f.logits(last)?;
    let lv = f.graph.value(logits);
    Ok((0..lv.rows()).map(|r| log_softmax(lv.row(r))).collect())
}

pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let xs: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn micro(tie_all: bool) -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            dropout: 0.0,
            tie_target_embed_and_output: tie_all,
            tie_all_embeddings: tie_all,
        }
    }

    fn base_config() -> ModelConfig {
        ModelConfig {
            enc_layers: 6,
            dec_layers: 6,
            d_model: 512,
            n_heads: 8,
            d_ffn: 2048,
            dropout: 0.1,
            tie_target_embed_and_output: true,
            tie_all_embeddings: true,
        }
    }

    #[test]
    fn base_embedding_size() {
        let s: ParameterStore<f32> = init_model_sized(&base_config(), 4160, 4160, 0).unwrap();
        assert_eq!(s.get(SRC_EMBED).unwrap().shape(), &[4160, 512]);
        assert_eq!(s.count_values([SRC_EMBED]).unwrap(), 2_129_920);
        assert!(s.same_array(SRC_EMBED, TGT_EMBED).unwrap());
        assert!(s.same_array(SRC_EMBED, OUT_PROJ).unwrap());
    }

    #[test]
    fn adapter_sizes_on_base() {
        let cfg = base_config();
        let s: ParameterStore<f32> = init_model_sized(&cfg, 8, 8, 0).unwrap();
        let count = |specs: &[AdapterSpec]| {
            let a = insert_adapters(&s, &cfg, specs, 1).unwrap();
            let names = select_parameters(&a, &Selector::Role(Role::Adapter));
            a.count_values(names.iter().map(String::as_str)).unwrap()
        };
        let all64 = count(&[AdapterSpec::new(Side::Encoder, LayerSel::All, 64)]);
        assert_eq!(all64, 6 * (2 * 512 * 64 + 3 * 512 + 64));
        assert!((all64 as f64 / 1e6 - 0.40).abs() < 0.01);
        let last1024 = count(&[AdapterSpec::new(Side::Encoder, LayerSel::Last, 1024)]);
        assert!((last1024 as f64 / 1e6 - 1.05).abs() < 0.01);
    }

    #[test]
    fn encoder_norm_and_bias_selection_on_base() {
        let s: ParameterStore<f32> = init_model_sized(&base_config(), 8, 8, 0).unwrap();
        let sel = Selector::Role(Role::Norm).or(Selector::Role(Role::Bias)).and(Selector::pattern("encoder.*"));
        let names = select_parameters(&s, &sel);
        let n = s.count_values(names.iter().map(String::as_str)).unwrap();
        assert_eq!(n, 39_936);
        assert!((n as f64 / 1e6 - 0.04).abs() < 0.005);
    }

    #[test]
    fn selectors_compose() {
        let s: ParameterStore<f32> = init_model_sized(&micro(true), 16, 16, 0).unwrap();
        let all: BTreeSet<String> = s.names().map(str::to_string).collect();
        let no_src = select_parameters(&s, &Selector::All.and(Selector::pattern(SRC_EMBED).not()));
        let mut expect = all.clone();
        expect.remove(SRC_EMBED);
        assert_eq!(no_src, expect);
        let first = select_parameters(&s, &Selector::parse("encoder.layer1.*").unwrap());
        assert!(!first.is_empty() && first.iter().all(|n| n.starts_with("encoder.layer1.")));
        assert_eq!(
            select_parameters(&s, &Selector::parse("role:norm | role:bias & encoder.*").unwrap()),
            select_parameters(
                &s,
                &Selector::Role(Role::Norm).or(Selector::Role(Role::Bias).and(Selector::pattern("encoder.*")))
            )
        );
        assert!(select_parameters(&s, &Selector::parse("nothing.*").unwrap()).is_empty());
    }

    #[test]
    fn tied_writes_are_visible_through_every_alias() {
        let mut s: ParameterStore<f32> = init_model_sized(&micro(true), 16, 16, 0).unwrap();
        s.get_mut(TGT_EMBED).unwrap().data_mut()[3] = 42.0;
        assert_eq!(s.get(OUT_PROJ).unwrap().data()[3], 42.0);
        assert_eq!(s.get(SRC_EMBED).unwrap().data()[3], 42.0);
        s.get_mut(OUT_PROJ).unwrap().data_mut()[5] = -1.0;
        assert_eq!(s.get(TGT_EMBED).unwrap().data()[5], -1.0);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a: ParameterStore<f32> = init_model_sized(&micro(true), 16, 16, 9).unwrap();
        let b: ParameterStore<f32> = init_model_sized(&micro(true), 16, 16, 9).unwrap();
        let c: ParameterStore<f32> = init_model_sized(&micro(true), 16, 16, 10).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn forward_shapes_and_batch_independence() {
        let cfg = micro(true);
        let s: ParameterStore<f32> = init_model_sized(&cfg, 16, 16, 1).unwrap();
        assert_eq!(forward(&s, &cfg, &[4, 5, 2], &[1]).unwrap().shape(), &[1, 16]);
        let srcs = vec![vec![4, 5, 6, 2], vec![7, 2], vec![8, 9, 10, 11, 2]];
        let tgts = vec![vec![1, 5, 6], vec![1], vec![1, 12, 13, 14]];
        let fwd = forward_batch(&s, &cfg, &srcs, &tgts).unwrap();
        let order = [2, 0, 1];
        let srcs_p: Vec<_> = order.iter().map(|&i| srcs[i].clone()).collect();
        let tgts_p: Vec<_> = order.iter().map(|&i| tgts[i].clone()).collect();
        let perm = forward_batch(&s, &cfg, &srcs_p, &tgts_p).unwrap();
        for (j, &i) in order.iter().enumerate() {
            assert!(fwd[i].max_abs_diff(&perm[j]) < 1e-6);
            assert!(fwd[i].max_abs_diff(&forward(&s, &cfg, &srcs[i], &tgts[i]).unwrap()) < 1e-6);
        }
        assert!(matches!(forward(&s, &cfg, &[99], &[1]), Err(Error::IdOutOfRange { id: 99, .. })));
    }

    #[test]
    fn incremental_log_probs_match_full_forward() {
        let cfg = micro(true);
        let s: ParameterStore<f32> = init_model_sized(&cfg, 16, 16, 1).unwrap();
        let src = [4, 5, 6, 2];
        let enc = encode_source(&s, &cfg, &src).unwrap();
        let prefixes = vec![vec![1], vec![1, 7, 8]];
        let lp = next_log_probs(&s, &cfg, &enc, &prefixes).unwrap();
        for (p, got) in prefixes.iter().zip(&lp) {
            let full = forward(&s, &cfg, &src, p).unwrap();
            let expect = log_softmax(full.row(full.rows() - 1));
            assert!(got.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-5));
        }
    }

    // Scalar re-implementation with plain loops, for a 1+1 layer model.
    mod oracle {
        use super::super::*;

        type M = Vec<Vec<f64>>;

        fn w(s: &ParameterStore<f64>, n: &str) -> M {
            let t = s.get(n).unwrap();
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
        }

        fn v(s: &ParameterStore<f64>, n: &str) -> Vec<f64> {
            s.get(n).unwrap().data().to_vec()
        }

        fn lin(s: &ParameterStore<f64>, x: &M, p: &str) -> M {
            let (wt, b) = (w(s, &format!("{p}.weight")), v(s, &format!("{p}.bias")));
            x.iter()
                .map(|row| {
                    (0..b.len()).map(|j| b[j] + (0..row.len()).map(|i| row[i] * wt[i][j]).sum::<f64>()).collect()
                })
                .collect()
        }

        fn ln(s: &ParameterStore<f64>, x: &M, p: &str) -> M {
            let (g, b) = (v(s, &format!("{p}.gain")), v(s, &format!("{p}.bias")));
            x.iter()
                .map(|r| {
                    let n = r.len() as f64;
                    let mu = r.iter().sum::<f64>() / n;
                    let var = r.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / n;
                    r.iter().enumerate().map(|(j, a)| (a - mu) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
                })
                .collect()
        }

        fn attn(s: &ParameterStore<f64>, xq: &M, xk: &M, p: &str, heads: usize, causal: bool) -> M {
            let q = lin(s, xq, &format!("{p}.q_proj"));
            let k = lin(s, xk, &format!("{p}.k_proj"));
            let vv = lin(s, xk, &format!("{p}.v_proj"));
            let d = q[0].len();
            let dh = d / heads;
            let mut out = vec![vec![0.0; d]; q.len()];
            for h in 0..heads {
                for i in 0..q.len() {
                    let n = if causal { i + 1 } else { k.len() };
                    let sc: Vec<f64> = (0..n)
                        .map(|j| (0..dh).map(|t| q[i][h * dh + t] * k[j][h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = sc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = sc.iter().map(|x| (x - m).exp()).sum();
                    for j in 0..n {
                        let a = (sc[j] - m).exp() / z;
                        for t in 0..dh {
                            out[i][h * dh + t] += a * vv[j][h * dh + t];
                        }
                    }
                }
            }
            lin(s, &out, &format!("{p}.o_proj"))
        }

        fn add(a: &M, b: &M) -> M {
            a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
        }

        fn ffn(s: &ParameterStore<f64>, x: &M, p: &str) -> M {
            let h = lin(s, x, &format!("{p}.w1"));
            let h: M = h.iter().map(|r| r.iter().map(|a| a.max(0.0)).collect()).collect();
            lin(s, &h, &format!("{p}.w2"))
        }

        fn embed(s: &ParameterStore<f64>, table: &str, ids: &[u32]) -> M {
            let e = w(s, table);
            let d = e[0].len();
            ids.iter()
                .enumerate()
                .map(|(pos, &id)| {
                    (0..d)
                        .map(|j| {
                            let i = j / 2;
                            let ang = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
                            let pe = if j % 2 == 0 { ang.sin() } else { ang.cos() };
                            e[id as usize][j] * (d as f64).sqrt() + pe
                        })
                        .collect()
                })
                .collect()
        }

        pub fn logits(s: &ParameterStore<f64>, heads: usize, src: &[u32], tgt: &[u32]) -> M {
            let mut x = embed(s, SRC_EMBED, src);
            x = ln(s, &add(&x, &attn(s, &x, &x, "encoder.layer1.self_attn", heads, false)), "encoder.layer1.self_attn_norm");
            x = ln(s, &add(&x, &ffn(s, &x, "encoder.layer1.ffn")), "encoder.layer1.ffn_norm");
            let mut y = embed(s, TGT_EMBED, tgt);
            y = ln(s, &add(&y, &attn(s, &y, &y, "decoder.layer1.self_attn", heads, true)), "decoder.layer1.self_attn_norm");
            y = ln(s, &add(&y, &attn(s, &y, &x, "decoder.layer1.cross_attn", heads, false)), "decoder.layer1.cross_attn_norm");
            y = ln(s, &add(&y, &ffn(s, &y, "decoder.layer1.ffn")), "decoder.layer1.ffn_norm");
            let o = w(s, OUT_PROJ);
            y.iter().map(|r| o.iter().map(|row| row.iter().zip(r).map(|(a, b)| a * b).sum()).collect()).collect()
        }
    }

    fn randomize(s: &mut ParameterStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = s.names().map(str::to_string).collect();
        for n in names {
            for v in s.get_mut(&n).unwrap().data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let cfg = ModelConfig { d_model: 4, n_heads: 2, d_ffn: 6, ..micro(true) };
        let mut s: ParameterStore<f64> = init_model_sized(&cfg, 2, 2, 3).unwrap();
        randomize(&mut s, 4);
        let (src, tgt) = ([0u32, 1, 1, 0], [1u32, 0, 1]);
        let got = forward(&s, &cfg, &src, &tgt).unwrap();
        let expect = oracle::logits(&s, cfg.n_heads, &src, &tgt);
        for (r, row) in expect.iter().enumerate() {
            for (c, &e) in row.iter().enumerate() {
                assert!((got.row(r)[c] - e).abs() < 1e-5, "row {r} col {c}");
            }
        }
    }

    fn loss(s: &ParameterStore<f64>, cfg: &ModelConfig, trainable: &HashSet<usize>) -> (f64, crate::graph::SlotGrads<f64>) {
        let srcs = vec![vec![3u32, 5, 6, 7, 2], vec![4, 8, 2]];
        let tin = vec![vec![1u32, 9, 10], vec![1, 11, 12, 13]];
        let tout = [9u32, 10, 2, 11, 12, 13, 2];
        let mut f = Forward::training(s, cfg, trainable, None);
        let (logits, _) = f.run(&srcs, &tin).unwrap();
        let l = f.graph.smoothed_xent(logits, &tout, 0.1);
        (f.graph.value(l).data()[0], f.graph.backward(l))
    }

    #[test]
    fn gradients_match_finite_differences_for_every_role() {
        let cfg = micro(false);
        let base: ParameterStore<f64> = init_model_sized(&cfg, 16, 16, 5).unwrap();
        let mut s = insert_adapters(&base, &cfg, &[AdapterSpec::new(Side::Encoder, LayerSel::All, 3), AdapterSpec::new(Side::Decoder, LayerSel::All, 3)], 6).unwrap();
        randomize(&mut s, 7);
        let trainable: HashSet<usize> = s.entries().map(|(_, e)| e.slot).collect();
        let (_, grads) = loss(&s, &cfg, &trainable);
        let mut roles_seen = BTreeSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-5;
        let names: Vec<(String, Entry)> = s.entries().map(|(n, e)| (n.to_string(), e)).collect();
        for (name, e) in names {
            let g = &grads[&e.slot];
            let n = g.len();
            // The largest-gradient entry plus two random ones.
            let argmax = (0..n).max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs())).unwrap();
            let mut probes = vec![argmax, rng.random_range(0..n), rng.random_range(0..n)];
            if e.role == Role::SrcEmbed {
                // Row 3 is the language-code position of the first sentence.
                probes.push(3 * cfg.d_model + 1);
            }
            for i in probes {
                let mut plus = s.clone();
                plus.get_mut(&name).unwrap().data_mut()[i] += h;
                let mut minus = s.clone();
                minus.get_mut(&name).unwrap().data_mut()[i] -= h;
                let numeric = (loss(&plus, &cfg, &trainable).0 - loss(&minus, &cfg, &trainable).0) / (2.0 * h);
                let analytic = g.data()[i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-3, "{name}[{i}]: analytic {analytic} numeric {numeric}");
            }
            roles_seen.insert(e.role);
        }
        for r in [Role::SrcEmbed, Role::TgtEmbed, Role::OutProj, Role::Encoder, Role::Decoder, Role::Adapter, Role::Norm, Role::Bias] {
            assert!(roles_seen.contains(&r), "role {r} not covered");
        }
    }

    #[test]
    fn fresh_adapters_are_identity() {
        let cfg = micro(true);
        let s: ParameterStore<f32> = init_model_sized(&cfg, 16, 16, 1).unwrap();
        let specs = [
            AdapterSpec::new(Side::Encoder, LayerSel::All, 4),
            AdapterSpec::new(Side::Decoder, LayerSel::Last, 32),
        ];
        let a = insert_adapters(&s, &cfg, &specs, 2).unwrap();
        let before = forward(&s, &cfg, &[4, 5, 6, 2], &[1, 7, 8]).unwrap();
        let after = forward(&a, &cfg, &[4, 5, 6, 2], &[1, 7, 8]).unwrap();
        assert!(before.max_abs_diff(&after) <= 1e-6);
        let dup = [AdapterSpec::new(Side::Encoder, LayerSel::First, 4), AdapterSpec::new(Side::Encoder, LayerSel::All, 4)];
        assert!(matches!(insert_adapters(&s, &cfg, &dup, 2), Err(Error::DuplicateAdapter(_))));
        let stacked = insert_adapters(&a, &cfg, &specs[..1], 3).unwrap();
        assert_eq!(adapter_count(&stacked, Side::Encoder, 1), 2);
    }

    #[test]
    fn adapter_names_parse() {
        assert_eq!(
            parse_adapter_name("encoder.layer12.adapter3.down.weight"),
            Some((Side::Encoder, 12, 3, "down.weight"))
        );
        assert_eq!(parse_adapter_name("encoder.layer1.ffn.w1.weight"), None);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { n_heads: 3, ..micro(true) }.validate().is_err());
        assert!(ModelConfig { enc_layers: 0, ..micro(true) }.validate().is_err());
        assert!(init_model_sized::<f32>(&micro(true), 16, 17, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn adapters_leave_logits_unchanged(
                seed in 0u64..1000,
                bottleneck in 1usize..20,
                src in prop::collection::vec(3u32..16, 1..6),
                tgt in prop::collection::vec(3u32..16, 0..5),
            ) {
                let cfg = micro(true);
                let s: ParameterStore<f32> = init_model_sized(&cfg, 16, 16, seed).unwrap();
                let a = insert_adapters(&s, &cfg, &[AdapterSpec::new(Side::Encoder, LayerSel::All, bottleneck), AdapterSpec::new(Side::Decoder, LayerSel::All, bottleneck)], seed + 1).unwrap();
                let mut tin = vec![1u32];
                tin.extend(tgt);
                let before = forward(&s, &cfg, &src, &tin).unwrap();
                let after = forward(&a, &cfg, &src, &tin).unwrap();
                prop_assert!(before.max_abs_diff(&after) <= 1e-6);
            }
        }
    }
}
