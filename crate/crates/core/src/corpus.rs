//! Parallel data: multi-parallel joins through English, per-direction
//! temperature schedules, character-set language filtering, back-translation
//! and a deterministic generator of synthetic cipher languages.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Translator;
use crate::tokenizer::temperature_probs;

pub const ENGLISH: &str = "en";

/// An ordered language pair.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Direction {
    pub src: String,
    pub tgt: String,
}

impl Direction {
    pub fn new(src: impl Into<String>, tgt: impl Into<String>) -> Self {
        Self { src: src.into(), tgt: tgt.into() }
    }

    pub fn involves(&self, lang: &str) -> bool {
        self.src == lang || self.tgt == lang
    }

    pub fn reversed(&self) -> Self {
        Self::new(self.tgt.clone(), self.src.clone())
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('-') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() && !b.contains('-') => Ok(Self::new(a, b)),
            _ => Err(Error::Parse { what: "direction", detail: format!("expected 'src-tgt', got {s:?}") }),
        }
    }
}

impl From<Direction> for String {
    fn from(d: Direction) -> Self {
        d.to_string()
    }
}

impl TryFrom<String> for Direction {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Aligned sentence pairs for one direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusPair {
    pub src_lang: String,
    pub tgt_lang: String,
    pub pairs: Vec<(String, String)>,
}

impl CorpusPair {
    pub fn new(src_lang: impl Into<String>, tgt_lang: impl Into<String>, pairs: Vec<(String, String)>) -> Self {
        Self { src_lang: src_lang.into(), tgt_lang: tgt_lang.into(), pairs }
    }

    pub fn direction(&self) -> Direction {
        Direction::new(self.src_lang.clone(), self.tgt_lang.clone())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn reversed(&self) -> Self {
        Self::new(
            self.tgt_lang.clone(),
            self.src_lang.clone(),
            self.pairs.iter().map(|(a, b)| (b.clone(), a.clone())).collect(),
        )
    }

    /// Collapses internal whitespace and drops pairs with an empty side.
    pub fn cleaned(&self) -> Self {
        let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
        let pairs = self
            .pairs
            .iter()
            .map(|(a, b)| (norm(a), norm(b)))
            .filter(|(a, b)| !a.is_empty() && !b.is_empty())
            .collect();
        Self::new(self.src_lang.clone(), self.tgt_lang.clone(), pairs)
    }

    pub fn truncated(&self, n: usize) -> Self {
        Self::new(self.src_lang.clone(), self.tgt_lang.clone(), self.pairs.iter().take(n).cloned().collect())
    }

    fn file_stem(name: &str, src: &str, tgt: &str) -> String {
        format!("{name}.{src}-{tgt}")
    }

    /// Writes `name.src-tgt.src` and `name.src-tgt.tgt` into `dir`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io_at(dir))?;
        let stem = Self::file_stem(name, &self.src_lang, &self.tgt_lang);
        for (lang, side) in [(&self.src_lang, 0), (&self.tgt_lang, 1)] {
            let mut text = String::new();
            for (a, b) in &self.pairs {
                text.push_str(if side == 0 { a } else { b });
                text.push('\n');
            }
            let path = dir.join(format!("{stem}.{lang}"));
            std::fs::write(&path, text).map_err(Error::io_at(&path))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, name: &str, src: &str, tgt: &str) -> Result<Self> {
        let stem = Self::file_stem(name, src, tgt);
        let read = |lang: &str| -> Result<Vec<String>> {
            let path = dir.join(format!("{stem}.{lang}"));
            let text = std::fs::read_to_string(&path).map_err(Error::io_at(&path))?;
            Ok(text.lines().map(str::to_string).collect())
        };
        let (a, b) = (read(src)?, read(tgt)?);
        if a.len() != b.len() {
            return Err(Error::Corpus(format!("{stem}: {} source lines but {} target lines", a.len(), b.len())));
        }
        Ok(Self::new(src, tgt, a.into_iter().zip(b).collect()))
    }
}

/// Splits an English-centric corpus into (non-English language, en line, other line).
fn english_side(c: &CorpusPair) -> Result<(&str, bool)> {
    if c.tgt_lang == ENGLISH && c.src_lang != ENGLISH {
        Ok((&c.src_lang, false))
    } else if c.src_lang == ENGLISH && c.tgt_lang != ENGLISH {
        Ok((&c.tgt_lang, true))
    } else {
        Err(Error::MissingEnglish { src: c.src_lang.clone(), tgt: c.tgt_lang.clone() })
    }
}

/// Joins English-centric corpora on identical English lines.
///
/// The output starts with the input corpora unchanged, followed by one corpus
/// per ordered pair of distinct non-English languages in sorted order. Within
/// each language, only the first occurrence of an English line is kept.
pub fn build_multiparallel(en_centric: &[CorpusPair]) -> Result<Vec<CorpusPair>> {
    // language -> (english lines in first-seen order, english -> line)
    let mut by_lang: BTreeMap<String, (Vec<String>, HashMap<String, String>)> = BTreeMap::new();
    for c in en_centric {
        let (lang, en_is_src) = english_side(c)?;
        let (order, map) = by_lang.entry(lang.to_string()).or_default();
        for (a, b) in &c.pairs {
            let (en, x) = if en_is_src { (a, b) } else { (b, a) };
            if !map.contains_key(en) {
                map.insert(en.clone(), x.clone());
                order.push(en.clone());
            }
        }
    }
    let mut out = en_centric.to_vec();
    for (x, (order, xmap)) in &by_lang {
        for (y, (_, ymap)) in &by_lang {
            if x == y {
                continue;
            }
            let pairs = order
                .iter()
                .filter_map(|en| ymap.get(en).map(|yl| (xmap[en].clone(), yl.clone())))
                .collect();
            out.push(CorpusPair::new(x.clone(), y.clone(), pairs));
        }
    }
    Ok(out)
}

/// Per-direction sampling probabilities: fixed overrides plus a temperature
/// distribution of the remaining mass.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSchedule {
    entries: BTreeMap<Direction, ScheduleEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleEntry {
    pub prob: f64,
    pub fixed: bool,
}

pub fn make_schedule(
    sizes: &BTreeMap<Direction, usize>,
    temperature: f64,
    overrides: &BTreeMap<Direction, f64>,
) -> Result<DirectionSchedule> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Validation(format!("temperature must be positive, got {temperature}")));
    }
    if let Some((d, p)) = overrides.iter().find(|(_, &p)| !(0.0..1.0).contains(&p)) {
        return Err(Error::Validation(format!("override for {d} must lie in [0, 1), got {p}")));
    }
    let fixed: f64 = overrides.values().sum();
    if fixed >= 1.0 {
        return Err(Error::Validation(format!("fixed probabilities sum to {fixed} >= 1")));
    }
    let free: Vec<(&Direction, usize)> =
        sizes.iter().filter(|(d, _)| !overrides.contains_key(*d)).map(|(d, &n)| (d, n)).collect();
    if let Some((d, _)) = free.iter().find(|(_, n)| *n == 0) {
        return Err(Error::Validation(format!("direction {d} has no data")));
    }
    if free.is_empty() {
        return Err(Error::Validation("no direction left to receive the remaining probability mass".into()));
    }
    let probs = temperature_probs(&free.iter().map(|(_, n)| *n as f64).collect::<Vec<_>>(), temperature);
    let mut entries: BTreeMap<Direction, ScheduleEntry> =
        overrides.iter().map(|(d, &p)| (d.clone(), ScheduleEntry { prob: p, fixed: true })).collect();
    for ((d, _), p) in free.into_iter().zip(probs) {
        entries.insert(d.clone(), ScheduleEntry { prob: p * (1.0 - fixed), fixed: false });
    }
    Ok(DirectionSchedule { entries })
}

impl DirectionSchedule {
    /// A schedule with explicit probabilities, which must sum to one.
    pub fn from_probs(probs: BTreeMap<Direction, f64>) -> Result<Self> {
        let entries: BTreeMap<_, _> =
            probs.into_iter().map(|(d, p)| (d, ScheduleEntry { prob: p, fixed: false })).collect();
        let s = Self { entries };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let total: f64 = self.entries.values().map(|e| e.prob).sum();
        if self.entries.is_empty() || (total - 1.0).abs() > 1e-9 || self.entries.values().any(|e| e.prob < 0.0) {
            return Err(Error::Validation(format!("schedule probabilities sum to {total}")));
        }
        Ok(())
    }

    pub fn entries(&self) -> &BTreeMap<Direction, ScheduleEntry> {
        &self.entries
    }

    pub fn prob(&self, d: &Direction) -> Option<f64> {
        self.entries.get(d).map(|e| e.prob)
    }

    pub fn directions(&self) -> impl Iterator<Item = &Direction> {
        self.entries.keys()
    }

    /// Multiplies the weight of every direction matching `pred` by `factor`
    /// and renormalizes.
    pub fn upsampled(&self, pred: impl Fn(&Direction) -> bool, factor: f64) -> Result<Self> {
        let mut entries = self.entries.clone();
        for (d, e) in entries.iter_mut() {
            if pred(d) {
                e.prob *= factor;
            }
        }
        let z: f64 = entries.values().map(|e| e.prob).sum();
        for e in entries.values_mut() {
            e.prob /= z;
        }
        let s = Self { entries };
        s.validate()?;
        Ok(s)
    }

    pub fn sampler(&self, seed: u64) -> DirectionSampler {
        let dirs: Vec<Direction> = self.entries.keys().cloned().collect();
        let dist = WeightedIndex::new(self.entries.values().map(|e| e.prob)).expect("validated schedule");
        DirectionSampler { dirs, dist, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Key-value text manifest, one `direction = probability` line per entry.
    pub fn to_manifest(&self) -> String {
        let mut out = String::from("# direction schedule v1\n");
        for (d, e) in &self.entries {
            let kind = if e.fixed { "fixed" } else { "weighted" };
            out.push_str(&format!("{kind}.{d} = {:?}\n", e.prob));
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Parse { what: "schedule manifest", detail };
        let mut entries = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("no '=' in {line:?}")))?;
            let (kind, dir) = key.trim().split_once('.').ok_or_else(|| bad(format!("bad key in {line:?}")))?;
            let fixed = match kind {
                "fixed" => true,
                "weighted" => false,
                _ => return Err(bad(format!("unknown entry kind {kind:?}"))),
            };
            let prob = value.trim().parse::<f64>().map_err(|e| bad(format!("{line:?}: {e}")))?;
            entries.insert(dir.parse()?, ScheduleEntry { prob, fixed });
        }
        let s = Self { entries };
        s.validate()?;
        Ok(s)
    }
}

/// Seeded draws of directions from a schedule.
pub struct DirectionSampler {
    dirs: Vec<Direction>,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl DirectionSampler {
    pub fn draw(&mut self) -> &Direction {
        &self.dirs[self.dist.sample(&mut self.rng)]
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Accepts a line when every non-whitespace character is in the charset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LangDetector {
    charset: BTreeSet<char>,
}

impl LangDetector {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Self {
        Self { charset: chars.into_iter().collect() }
    }

    pub fn accepts(&self, line: &str) -> bool {
        line.chars().filter(|c| !c.is_whitespace()).all(|c| self.charset.contains(&c))
    }
}

/// Keeps the pairs whose both sides pass their language's detector.
pub fn langid_filter(pairs: &CorpusPair, detectors: &BTreeMap<String, LangDetector>) -> Result<CorpusPair> {
    let det = |l: &str| detectors.get(l).ok_or_else(|| Error::MissingDetector(l.to_string()));
    let (ds, dt) = (det(&pairs.src_lang)?, det(&pairs.tgt_lang)?);
    let kept = pairs.pairs.iter().filter(|(a, b)| ds.accepts(a) && dt.accepts(b)).cloned().collect();
    Ok(CorpusPair::new(pairs.src_lang.clone(), pairs.tgt_lang.clone(), kept))
}

fn lang_seed(seed: u64, lang: &str) -> u64 {
    // FNV-1a over the tag, mixed with the seed.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in lang.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.wrapping_mul(0x9e3779b97f4a7c15)
}

/// Pairs new-language lines with machine translations of their English side.
///
/// `src_corpus` must be `X-en`. For every target `Y`, `lines_per_lang` lines
/// are sampled without replacement (seeded per `(seed, Y)`) and the output
/// corpus `X-Y` holds `(x, translate(en, Y))`.
pub fn generate_backtranslations(
    model: &dyn Translator,
    src_corpus: &CorpusPair,
    target_langs: &[String],
    lines_per_lang: usize,
    seed: u64,
) -> Result<Vec<CorpusPair>> {
    if src_corpus.tgt_lang != ENGLISH {
        return Err(Error::Corpus(format!(
            "back-translation needs an X-en corpus, got {}",
            src_corpus.direction()
        )));
    }
    let mut out = Vec::with_capacity(target_langs.len());
    for y in target_langs {
        let n = if lines_per_lang > src_corpus.len() {
            log::warn!(
                "requested {lines_per_lang} back-translated lines for {y} but corpus has {}; using all",
                src_corpus.len()
            );
            src_corpus.len()
        } else {
            lines_per_lang
        };
        let mut rng = ChaCha8Rng::seed_from_u64(lang_seed(seed, y));
        let picks = sample(&mut rng, src_corpus.len(), n);
        let mut pairs = Vec::with_capacity(n);
        for i in picks.iter() {
            let (x, en) = &src_corpus.pairs[i];
            pairs.push((x.clone(), model.translate(en, y)?));
        }
        out.push(CorpusPair::new(src_corpus.src_lang.clone(), y.clone(), pairs));
    }
    Ok(out)
}

/// A word-level transform from the base lexicon into one cipher language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WordTransform {
    Identity,
    /// Explicit word-substitution table.
    Table { map: BTreeMap<String, String> },
    /// Maps the `i`-th character of `from` to character `(i + shift) mod n` of `to`.
    Rotate { from: String, to: String, shift: usize },
    Affix { prefix: String, suffix: String },
    Chain { steps: Vec<WordTransform> },
}

impl WordTransform {
    pub fn apply(&self, word: &str) -> Result<String> {
        match self {
            WordTransform::Identity => Ok(word.to_string()),
            WordTransform::Table { map } => {
                map.get(word).cloned().ok_or_else(|| Error::Corpus(format!("word {word:?} missing from table")))
            }
            WordTransform::Rotate { from, to, shift } => {
                let from: Vec<char> = from.chars().collect();
                let to: Vec<char> = to.chars().collect();
                if from.len() != to.len() || from.is_empty() {
                    return Err(Error::Validation("rotation alphabets must have equal non-zero length".into()));
                }
                word.chars()
                    .map(|c| {
                        from.iter()
                            .position(|&f| f == c)
                            .map(|i| to[(i + shift) % to.len()])
                            .ok_or_else(|| Error::Corpus(format!("character {c:?} outside rotation alphabet")))
                    })
                    .collect()
            }
            WordTransform::Affix { prefix, suffix } => Ok(format!("{prefix}{word}{suffix}")),
            WordTransform::Chain { steps } => {
                steps.iter().try_fold(word.to_string(), |w, t| t.apply(&w))
            }
        }
    }

    /// The transform undoing `self`, where one exists in closed form.
    pub fn inverse(&self) -> Option<WordTransform> {
        Some(match self {
            WordTransform::Identity => WordTransform::Identity,
            WordTransform::Table { map } => {
                WordTransform::Table { map: map.iter().map(|(a, b)| (b.clone(), a.clone())).collect() }
            }
            WordTransform::Rotate { from, to, shift } => {
                let n = to.chars().count();
                WordTransform::Rotate { from: to.clone(), to: from.clone(), shift: (n - shift % n) % n }
            }
            WordTransform::Affix { .. } => return None,
            WordTransform::Chain { steps } => WordTransform::Chain {
                steps: steps.iter().rev().map(WordTransform::inverse).collect::<Option<Vec<_>>>()?,
            },
        })
    }
}

/// Recipe for a synthetic multi-parallel corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CipherSpec {
    pub base_lexicon: Vec<String>,
    pub languages: BTreeMap<String, WordTransform>,
    /// Inclusive range of sentence lengths in words.
    pub sentence_len: (usize, usize),
    pub seed: u64,
    pub valid_lines: usize,
    pub test_lines: usize,
}

/// The generated corpus: every ordered language pair, split three ways.
#[derive(Clone, Debug)]
pub struct CipherSuite {
    pub languages: Vec<String>,
    pub train: BTreeMap<Direction, CorpusPair>,
    pub valid: BTreeMap<Direction, CorpusPair>,
    pub test: BTreeMap<Direction, CorpusPair>,
    /// Base-lexicon sentences per split, aligned with every corpus line.
    pub base: [Vec<String>; 3],
}

impl CipherSpec {
    /// Checks the lexicon and that each transform is injective on it.
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sentence_len;
        if lo == 0 || lo > hi {
            return Err(Error::Validation(format!("bad sentence length range {lo}..={hi}")));
        }
        let unique: HashSet<&String> = self.base_lexicon.iter().collect();
        if self.base_lexicon.is_empty() || unique.len() != self.base_lexicon.len() {
            return Err(Error::Validation("base lexicon must be non-empty and duplicate-free".into()));
        }
        for (lang, t) in &self.languages {
            let mut seen = HashSet::new();
            for w in &self.base_lexicon {
                let out = t.apply(w)?;
                if out.is_empty() || out.contains(char::is_whitespace) {
                    return Err(Error::Validation(format!("{lang}: {w:?} maps to invalid word {out:?}")));
                }
                if !seen.insert(out.clone()) {
                    return Err(Error::Validation(format!("{lang}: transform is not bijective ({out:?} repeats)")));
                }
            }
        }
        Ok(())
    }

    pub fn render(&self, lang: &str, base_sentence: &str) -> Result<String> {
        let t = self.languages.get(lang).ok_or_else(|| Error::UnknownLanguage(lang.to_string()))?;
        let words = base_sentence.split(' ').map(|w| t.apply(w)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// Characters used by a language's rendering of the lexicon.
    pub fn charset(&self, lang: &str) -> Result<BTreeSet<char>> {
        let t = self.languages.get(lang).ok_or_else(|| Error::UnknownLanguage(lang.to_string()))?;
        let mut set = BTreeSet::new();
        for w in &self.base_lexicon {
            set.extend(t.apply(w)?.chars());
        }
        Ok(set)
    }

    pub fn detectors(&self) -> Result<BTreeMap<String, LangDetector>> {
        self.languages.keys().map(|l| Ok((l.clone(), LangDetector::new(self.charset(l)?)))).collect()
    }
}

/// Generates `n_lines` distinct base sentences and renders each in every
/// language. The last `valid_lines + test_lines` sentences form the held-out
/// splits; the rest is training data for every ordered language pair.
pub fn generate_cipher_suite(spec: &CipherSpec, n_lines: usize) -> Result<CipherSuite> {
    if n_lines == 0 {
        return Err(Error::Validation("n_lines must be positive".into()));
    }
    if spec.valid_lines + spec.test_lines >= n_lines {
        return Err(Error::Validation(format!(
            "{} held-out lines leave no training data out of {n_lines}",
            spec.valid_lines + spec.test_lines
        )));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.sentence_len;
    let mut seen = HashSet::new();
    let mut sentences = Vec::with_capacity(n_lines);
    let mut attempts = 0usize;
    while sentences.len() < n_lines {
        attempts += 1;
        if attempts > n_lines * 100 {
            return Err(Error::Validation(format!("cannot draw {n_lines} distinct sentences from this lexicon")));
        }
        let len = rng.random_range(lo..=hi);
        let s: Vec<&str> =
            (0..len).map(|_| spec.base_lexicon[rng.random_range(0..spec.base_lexicon.len())].as_str()).collect();
        let s = s.join(" ");
        if seen.insert(s.clone()) {
            sentences.push(s);
        }
    }
    let n_train = n_lines - spec.valid_lines - spec.test_lines;
    let test = sentences.split_off(n_train + spec.valid_lines);
    let valid = sentences.split_off(n_train);
    let base = [sentences, valid, test];

    let languages: Vec<String> = spec.languages.keys().cloned().collect();
    let mut rendered: BTreeMap<&str, [Vec<String>; 3]> = BTreeMap::new();
    for lang in &languages {
        let mut split = [Vec::new(), Vec::new(), Vec::new()];
        for (i, part) in base.iter().enumerate() {
            split[i] = part.iter().map(|s| spec.render(lang, s)).collect::<Result<_>>()?;
        }
        rendered.insert(lang, split);
    }
    let mut splits: [BTreeMap<Direction, CorpusPair>; 3] = Default::default();
    for x in &languages {
        for y in &languages {
            if x == y {
                continue;
            }
            for (i, out) in splits.iter_mut().enumerate() {
                let pairs = rendered[x.as_str()][i].iter().cloned().zip(rendered[y.as_str()][i].iter().cloned()).collect();
                out.insert(Direction::new(x.clone(), y.clone()), CorpusPair::new(x.clone(), y.clone(), pairs));
            }
        }
    }
    let [train, valid, test] = splits;
    Ok(CipherSuite { languages, train, valid, test, base })
}

/// Alphabets with pairwise-disjoint character sets for synthetic languages.
pub const SCRIPTS: &[(&str, &str)] = &[
    ("latin", "abcdefghijklmnopqrstuvwxyz"),
    ("latin_upper", "ABCDEFGHIJKLMNOPQRSTUVWXYZ"),
    ("cyrillic", "абвгдежзийклмнопрстуфхцчшщъыьэюя"),
    ("cyrillic_upper", "АБВГДЕЖЗИЙКЛМНОПРСТУФХЦЧШЩЪЫЬЭЮЯ"),
    ("greek", "αβγδεζηθικλμνξοπρστυφχψω"),
    ("armenian", "աբգդեզէըթժիլխծկհձղճմյնշոչպջռսվտրցւփքօֆ"),
    ("georgian", "აბგდევზთიკლმნოპჟრსტუფქღყშჩცძწჭხჯჰ"),
    ("hebrew", "אבגדהוזחטיכלמנסעפצקרשת"),
];

pub fn script(name: &str) -> Result<&'static str> {
    SCRIPTS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s).ok_or_else(|| Error::Config(format!("unknown script {name}")))
}

/// How one generated language derives from the base lexicon.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CipherKind {
    /// The base lexicon itself (the pivot language).
    Base,
    /// Character rotation into another script.
    Rotate,
    /// Character rotation plus a fixed suffix.
    Suffix,
    /// A fresh random word per lexicon entry.
    Substitute,
}

/// Builds a random lexicon over the first `alphabet_size` letters of the
/// latin script and one transform per `(tag, kind, script)` entry.
pub fn generated_spec(
    lexicon_size: usize,
    word_len: (usize, usize),
    alphabet_size: usize,
    languages: &[(String, CipherKind, String)],
    sentence_len: (usize, usize),
    valid_lines: usize,
    test_lines: usize,
    seed: u64,
) -> Result<CipherSpec> {
    let latin: Vec<char> = script("latin")?.chars().take(alphabet_size).collect();
    if latin.len() < 2 || word_len.0 == 0 || word_len.0 > word_len.1 {
        return Err(Error::Validation("lexicon alphabet or word length range is degenerate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random_word = |rng: &mut ChaCha8Rng, alphabet: &[char]| -> String {
        let n = rng.random_range(word_len.0..=word_len.1);
        (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
    };
    let mut lexicon = Vec::with_capacity(lexicon_size);
    let mut seen = HashSet::new();
    let mut attempts = 0;
    while lexicon.len() < lexicon_size {
        attempts += 1;
        if attempts > lexicon_size * 1000 {
            return Err(Error::Validation("lexicon too large for the word space".into()));
        }
        let w = random_word(&mut rng, &latin);
        if seen.insert(w.clone()) {
            lexicon.push(w);
        }
    }
    let from: String = latin.iter().collect();
    let mut transforms = BTreeMap::new();
    for (i, (tag, kind, script_name)) in languages.iter().enumerate() {
        let chars: Vec<char> = script(script_name)?.chars().collect();
        if chars.len() < latin.len() {
            return Err(Error::Validation(format!("script {script_name} has fewer than {} letters", latin.len())));
        }
        let to: String = chars[..latin.len()].iter().collect();
        let shift = 1 + i % (latin.len() - 1);
        let t = match kind {
            CipherKind::Base => WordTransform::Identity,
            CipherKind::Rotate => WordTransform::Rotate { from: from.clone(), to, shift },
            CipherKind::Suffix => WordTransform::Chain {
                steps: vec![
                    WordTransform::Rotate { from: from.clone(), to, shift },
                    WordTransform::Affix { prefix: String::new(), suffix: chars[latin.len() % chars.len()].to_string() },
                ],
            },
            CipherKind::Substitute => {
                let mut map = BTreeMap::new();
                let mut used = HashSet::new();
                for w in &lexicon {
                    let mut attempts = 0;
                    let word = loop {
                        attempts += 1;
                        let cand = random_word(&mut rng, &chars);
                        if used.insert(cand.clone()) {
                            break cand;
                        }
                        if attempts > 1000 {
                            return Err(Error::Validation("cannot draw a distinct substitution word".into()));
                        }
                    };
                    map.insert(w.clone(), word);
                }
                WordTransform::Table { map }
            }
        };
        transforms.insert(tag.clone(), t);
    }
    let spec = CipherSpec {
        base_lexicon: lexicon,
        languages: transforms,
        sentence_len,
        seed: seed.wrapping_add(1),
        valid_lines,
        test_lines,
    };
    spec.validate()?;
    Ok(spec)
}
