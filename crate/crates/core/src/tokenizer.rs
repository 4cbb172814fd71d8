//! Byte-pair-encoding training, vocabulary construction and text encoding.
//!
//! Words are whitespace-delimited. Each word is split into characters and the
//! final character carries the end-of-word marker [`EOW`], so `"hello"` starts
//! out as `["h", "e", "l", "l", "o⟨/w⟩"]`. Merge rules are applied greedily
//! in rule order. Language codes are source-side tokens of the form `⟨2xx⟩`
//! naming the desired target language.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const EOW: &str = "⟨/w⟩";
pub const PAD: &str = "⟨pad⟩";
pub const BOS: &str = "⟨bos⟩";
pub const EOS: &str = "⟨eos⟩";
pub const UNK: &str = "⟨unk⟩";

/// Surface form of the "translate into `lang`" code token.
pub fn lang_code_token(lang: &str) -> String {
    format!("⟨2{lang}⟩")
}

/// Temperature-scaled sampling probabilities `p_k ∝ D_k^(1/T)`.
pub fn temperature_probs(sizes: &[f64], temperature: f64) -> Vec<f64> {
    let w: Vec<f64> = sizes.iter().map(|&d| d.powf(1.0 / temperature)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Per-language line counts and the sampling temperature used to assemble a
/// BPE training corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusWeighting {
    sizes: BTreeMap<String, usize>,
    temperature: f64,
}

impl CorpusWeighting {
    pub fn new(sizes: BTreeMap<String, usize>, temperature: f64) -> Result<Self> {
        if !(temperature >= 1.0) || !temperature.is_finite() {
            return Err(Error::Validation(format!("temperature must be >= 1, got {temperature}")));
        }
        if let Some((lang, _)) = sizes.iter().find(|(_, &d)| d == 0) {
            return Err(Error::Validation(format!("language {lang} has no lines")));
        }
        Ok(Self { sizes, temperature })
    }

    /// Weighting whose sizes are the line counts of `corpora`.
    pub fn from_corpora(corpora: &BTreeMap<String, Vec<String>>, temperature: f64) -> Result<Self> {
        let sizes = corpora.iter().map(|(k, v)| (k.clone(), v.len())).collect();
        Self::new(sizes, temperature)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn sizes(&self) -> &BTreeMap<String, usize> {
        &self.sizes
    }

    /// Sampling probability per language, in language order.
    pub fn probabilities(&self) -> BTreeMap<String, f64> {
        let sizes: Vec<f64> = self.sizes.values().map(|&d| d as f64).collect();
        self.sizes.keys().cloned().zip(temperature_probs(&sizes, self.temperature)).collect()
    }

    /// Draws `n` lines: a language by temperature probability, then a line
    /// uniformly from that language.
    pub fn sample_lines<'a>(
        &self,
        corpora: &'a BTreeMap<String, Vec<String>>,
        n: usize,
        seed: u64,
    ) -> Result<Vec<&'a str>> {
        let probs = self.probabilities();
        let langs: Vec<&String> = probs.keys().collect();
        for lang in &langs {
            if corpora.get(*lang).is_none_or(|c| c.is_empty()) {
                return Err(Error::Validation(format!("no corpus lines for language {lang}")));
            }
        }
        let dist = WeightedIndex::new(probs.values().copied())
            .map_err(|e| Error::Validation(format!("bad sampling weights: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                let lines = &corpora[langs[dist.sample(&mut rng)]];
                lines[rng.random_range(0..lines.len())].as_str()
            })
            .collect())
    }
}

/// Splits a word into its seed symbols.
fn seed_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len().saturating_sub(1);
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| if i == last { format!("{c}{EOW}") } else { c.to_string() })
        .collect()
}

/// An ordered list of merge rules plus the seed symbols observed in training.
#[derive(Clone, Debug, Default)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    alphabet: BTreeSet<String>,
    ranks: HashMap<(String, String), usize>,
    parts: HashMap<String, (String, String)>,
}

impl PartialEq for BpeModel {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.alphabet == other.alphabet
    }
}

impl BpeModel {
    pub fn new(merges: Vec<(String, String)>, alphabet: BTreeSet<String>) -> Result<Self> {
        let mut known: HashSet<String> = alphabet.iter().cloned().collect();
        let mut ranks = HashMap::new();
        let mut parts = HashMap::new();
        for (i, (l, r)) in merges.iter().enumerate() {
            if !known.contains(l) || !known.contains(r) {
                return Err(Error::Validation(format!(
                    "merge {i} ({l} {r}) uses a symbol that is neither seed nor earlier merge"
                )));
            }
            let merged = format!("{l}{r}");
            ranks.entry((l.clone(), r.clone())).or_insert(i);
            parts.entry(merged.clone()).or_insert((l.clone(), r.clone()));
            known.insert(merged);
        }
        Ok(Self { merges, alphabet, ranks, parts })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &BTreeSet<String> {
        &self.alphabet
    }

    /// The two symbols a merged symbol was built from.
    pub fn parts_of(&self, symbol: &str) -> Option<(&str, &str)> {
        self.parts.get(symbol).map(|(l, r)| (l.as_str(), r.as_str()))
    }

    /// Applies the merge rules to one word.
    pub fn segment(&self, word: &str) -> Vec<String> {
        let mut symbols = seed_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == l && &symbols[i + 1] == r {
                    next.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    next.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = next;
        }
        symbols
    }

    pub fn to_merges_string(&self) -> String {
        let mut out = String::from("#bpe v1\n#alphabet");
        for s in &self.alphabet {
            out.push(' ');
            out.push_str(s);
        }
        out.push('\n');
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    pub fn from_merges_str(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Parse { what: "merges file", detail };
        let mut lines = text.lines();
        if lines.next() != Some("#bpe v1") {
            return Err(bad("missing '#bpe v1' header".into()));
        }
        let alpha = lines.next().ok_or_else(|| bad("missing alphabet line".into()))?;
        let alpha = alpha
            .strip_prefix("#alphabet")
            .ok_or_else(|| bad("second line must start with '#alphabet'".into()))?;
        let alphabet = alpha.split_whitespace().map(str::to_string).collect();
        let mut merges = Vec::new();
        for (n, line) in lines.enumerate() {
            let mut it = line.split(' ');
            match (it.next(), it.next(), it.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => return Err(bad(format!("rule line {} is not 'left right': {line:?}", n + 3))),
            }
        }
        Self::new(merges, alphabet)
    }
}

/// Learns `merges` BPE rules from a temperature-sampled mix of `corpora`.
///
/// The sampled training corpus has as many lines as all corpora together.
/// Training stops early when no symbol pair occurs at least twice. Equal pair
/// counts are resolved by the lexicographically smallest `(left, right)`.
pub fn train_bpe(
    corpora: &BTreeMap<String, Vec<String>>,
    weighting: &CorpusWeighting,
    merges: usize,
    seed: u64,
) -> Result<BpeModel> {
    if corpora.values().all(|lines| lines.iter().all(|l| l.trim().is_empty())) {
        return Err(Error::NoTrainableText);
    }
    for lang in weighting.sizes.keys() {
        if !corpora.contains_key(lang) {
            return Err(Error::Validation(format!("weighting names unknown language {lang}")));
        }
    }
    let total: usize = weighting.sizes.values().sum();
    let sample = weighting.sample_lines(corpora, total, seed)?;

    let mut word_freq: BTreeMap<&str, u64> = BTreeMap::new();
    for line in &sample {
        for w in line.split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::NoTrainableText);
    }

    let mut alphabet = BTreeSet::new();
    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .iter()
        .map(|(w, &f)| {
            let s = seed_symbols(w);
            alphabet.extend(s.iter().cloned());
            (s, f)
        })
        .collect();

    type Pair = (String, String);
    let mut counts: HashMap<Pair, u64> = HashMap::new();
    let mut occurs: HashMap<Pair, BTreeSet<usize>> = HashMap::new();
    for (idx, (syms, f)) in words.iter().enumerate() {
        for w in syms.windows(2) {
            let p = (w[0].clone(), w[1].clone());
            *counts.entry(p.clone()).or_default() += f;
            occurs.entry(p).or_default().insert(idx);
        }
    }
    let mut heap: BinaryHeap<(u64, Reverse<Pair>)> =
        counts.iter().map(|(p, &c)| (c, Reverse(p.clone()))).collect();

    let mut rules = Vec::with_capacity(merges);
    while rules.len() < merges {
        let Some((c, Reverse(pair))) = heap.pop() else { break };
        if counts.get(&pair).copied().unwrap_or(0) != c {
            continue;
        }
        if c < 2 {
            break;
        }
        let merged = format!("{}{}", pair.0, pair.1);
        let affected: Vec<usize> = occurs.get(&pair).map(|s| s.iter().copied().collect()).unwrap_or_default();
        let mut touched: HashSet<Pair> = HashSet::new();
        for idx in affected {
            let (syms, f) = &mut words[idx];
            for w in syms.windows(2) {
                let p = (w[0].clone(), w[1].clone());
                if let Some(c) = counts.get_mut(&p) {
                    *c -= *f;
                }
                touched.insert(p);
            }
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
                    next.push(merged.clone());
                    i += 2;
                } else {
                    next.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = next;
            for w in syms.windows(2) {
                let p = (w[0].clone(), w[1].clone());
                *counts.entry(p.clone()).or_default() += *f;
                occurs.entry(p.clone()).or_default().insert(idx);
                touched.insert(p);
            }
        }
        counts.remove(&pair);
        occurs.remove(&pair);
        for p in touched {
            if let Some(&c) = counts.get(&p) {
                if c > 0 {
                    heap.push((c, Reverse(p)));
                }
            }
        }
        rules.push(pair);
    }
    BpeModel::new(rules, alphabet)
}

/// Ids of the four special symbols.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
}

/// An ordered token table tied to the BPE model that produced it.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    specials: Specials,
    lang_codes: BTreeMap<String, u32>,
    bpe: Arc<BpeModel>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
            && self.specials == other.specials
            && self.lang_codes == other.lang_codes
            && self.bpe == other.bpe
    }
}

/// Builds a vocabulary from a BPE model and the raw corpora.
///
/// Token order is specials, language codes (in `lang_tags` order), then
/// content tokens by descending frequency in the segmented corpora with a
/// lexicographic tie-break. Content tokens are every symbol produced by a
/// merge rule plus every seed symbol whose raw frequency exceeds
/// `char_min_freq`.
pub fn build_vocabulary(
    bpe: Arc<BpeModel>,
    corpora: &BTreeMap<String, Vec<String>>,
    char_min_freq: u64,
    lang_tags: &[String],
) -> Result<Vocabulary> {
    let mut seed_freq: HashMap<String, u64> = HashMap::new();
    let mut token_freq: HashMap<String, u64> = HashMap::new();
    let mut word_freq: HashMap<&str, u64> = HashMap::new();
    for line in corpora.values().flatten() {
        for w in line.split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    for (w, &f) in &word_freq {
        for s in seed_symbols(w) {
            *seed_freq.entry(s).or_default() += f;
        }
        for s in bpe.segment(w) {
            *token_freq.entry(s).or_default() += f;
        }
    }

    let mut content: BTreeSet<String> = bpe.merges().iter().map(|(l, r)| format!("{l}{r}")).collect();
    content.extend(seed_freq.into_iter().filter(|(_, f)| *f > char_min_freq).map(|(s, _)| s));

    let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
    let mut lang_codes = BTreeMap::new();
    for tag in lang_tags {
        if lang_codes.contains_key(tag) {
            continue;
        }
        lang_codes.insert(tag.clone(), tokens.len() as u32);
        tokens.push(lang_code_token(tag));
    }
    let reserved: HashSet<String> = tokens.iter().cloned().collect();
    let mut ranked: Vec<(u64, String)> = content
        .into_iter()
        .filter(|t| !reserved.contains(t))
        .map(|t| (token_freq.get(&t).copied().unwrap_or(0), t))
        .collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    tokens.extend(ranked.into_iter().map(|(_, t)| t));
    Vocabulary::from_parts(tokens, lang_codes, bpe)
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, lang_codes: BTreeMap<String, u32>, bpe: Arc<BpeModel>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Validation(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Validation(format!("duplicate token {t:?}")));
            }
        }
        let find = |s: &str| {
            index.get(s).copied().ok_or_else(|| Error::Validation(format!("vocabulary lacks special {s}")))
        };
        let specials = Specials { pad: find(PAD)?, bos: find(BOS)?, eos: find(EOS)?, unk: find(UNK)? };
        for (tag, &id) in &lang_codes {
            if tokens.get(id as usize) != Some(&lang_code_token(tag)) {
                return Err(Error::Validation(format!("language code for {tag} is not at id {id}")));
            }
        }
        Ok(Self { tokens, index, specials, lang_codes, bpe })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn lang_codes(&self) -> &BTreeMap<String, u32> {
        &self.lang_codes
    }

    pub fn lang_code(&self, lang: &str) -> Option<u32> {
        self.lang_codes.get(lang).copied()
    }

    pub fn bpe(&self) -> &Arc<BpeModel> {
        &self.bpe
    }

    fn is_special_or_code(&self, id: u32) -> bool {
        let s = self.specials;
        id == s.pad || id == s.bos || id == s.eos || id == s.unk || self.lang_codes.values().any(|&c| c == id)
    }

    /// Returns a copy with a new language-code token appended at the end.
    pub fn with_lang_code(&self, lang: &str) -> Result<Self> {
        if self.lang_codes.contains_key(lang) {
            return Err(Error::Validation(format!("language code for {lang} already present")));
        }
        let mut tokens = self.tokens.clone();
        let mut codes = self.lang_codes.clone();
        codes.insert(lang.to_string(), tokens.len() as u32);
        tokens.push(lang_code_token(lang));
        Self::from_parts(tokens, codes, self.bpe.clone())
    }

    /// Keeps the first `n` tokens. Specials and language codes must survive.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let mut tokens = self.tokens.clone();
        tokens.truncate(n);
        Self::from_parts(tokens, self.lang_codes.clone(), self.bpe.clone())
    }

    fn push_symbol(&self, sym: &str, out: &mut Vec<u32>) {
        if let Some(id) = self.id(sym) {
            out.push(id);
        } else if let Some((l, r)) = self.bpe.parts_of(sym) {
            self.push_symbol(l, out);
            self.push_symbol(r, out);
        } else {
            out.push(self.specials.unk);
        }
    }

    /// Encodes one line. Symbols missing from the vocabulary are split back
    /// into their merge components; unknown seed symbols become `unk`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            for sym in self.bpe.segment(word) {
                self.push_symbol(&sym, &mut out);
            }
        }
        out
    }

    /// Decodes ids to text, dropping specials and language codes.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::IdOutOfRange { id, size: self.len() })?;
            if self.is_special_or_code(id) {
                continue;
            }
            match tok.strip_suffix(EOW) {
                Some(stem) => {
                    out.push_str(stem);
                    out.push(' ');
                }
                None => out.push_str(tok),
            }
        }
        if out.ends_with(' ') {
            out.pop();
        }
        Ok(out)
    }

    pub fn to_vocab_string(&self) -> String {
        let mut out = String::from("#vocab v1\n");
        let s = self.specials;
        for (name, id) in [("pad", s.pad), ("bos", s.bos), ("eos", s.eos), ("unk", s.unk)] {
            let _ = writeln!(out, "#special {name} {}", self.tokens[id as usize]);
        }
        for (tag, &id) in &self.lang_codes {
            let _ = writeln!(out, "#lang {tag} {id}");
        }
        let _ = writeln!(out, "#tokens {}", self.tokens.len());
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_strings(vocab: &str, merges: &str) -> Result<Self> {
        let bpe = Arc::new(BpeModel::from_merges_str(merges)?);
        let bad = |detail: String| Error::Parse { what: "vocabulary file", detail };
        let mut lines = vocab.lines();
        if lines.next() != Some("#vocab v1") {
            return Err(bad("missing '#vocab v1' header".into()));
        }
        let mut codes = BTreeMap::new();
        let count = loop {
            let line = lines.next().ok_or_else(|| bad("missing '#tokens' line".into()))?;
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["#special", _, _] => {}
                ["#lang", tag, id] => {
                    let id = id.parse().map_err(|_| bad(format!("bad code id in {line:?}")))?;
                    codes.insert(tag.to_string(), id);
                }
                ["#tokens", n] => break n.parse::<usize>().map_err(|_| bad(format!("bad count {line:?}")))?,
                _ => return Err(bad(format!("unexpected header line {line:?}"))),
            }
        };
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        if tokens.len() != count {
            return Err(bad(format!("expected {count} tokens, found {}", tokens.len())));
        }
        Self::from_parts(tokens, codes, bpe)
    }

    /// Writes `<stem>.vocab` and `<stem>.merges` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io_at(dir))?;
        let v = dir.join(format!("{stem}.vocab"));
        let m = dir.join(format!("{stem}.merges"));
        std::fs::write(&v, self.to_vocab_string()).map_err(Error::io_at(&v))?;
        std::fs::write(&m, self.bpe.to_merges_string()).map_err(Error::io_at(&m))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let v = dir.join(format!("{stem}.vocab"));
        let m = dir.join(format!("{stem}.merges"));
        let vs = std::fs::read_to_string(&v).map_err(Error::io_at(&v))?;
        let ms = std::fs::read_to_string(&m).map_err(Error::io_at(&m))?;
        Self::from_strings(&vs, &ms)
    }
}

/// Maps every new id to the old id carrying the identical token string.
pub fn vocab_overlap(old: &Vocabulary, new: &Vocabulary) -> BTreeMap<u32, u32> {
    new.tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| old.id(t).map(|o| (i as u32, o)))
        .collect()
}
