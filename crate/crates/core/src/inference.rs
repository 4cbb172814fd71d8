//! Beam search, direct translation with vocabulary switching, and pivoting.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode_source, next_log_probs, source_ids, EncodedSource, ModelConfig, ParameterStore};
use crate::tokenizer::Vocabulary;

/// Output length limit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxLen {
    Fixed(usize),
    /// `factor * source_len + offset`.
    Relative { factor: usize, offset: usize },
}

impl MaxLen {
    pub fn resolve(self, src_len: usize) -> usize {
        match self {
            MaxLen::Fixed(n) => n,
            MaxLen::Relative { factor, offset } => factor * src_len + offset,
        }
        .max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: MaxLen,
    /// Exponent on the hypothesis length used for score normalization.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_size: 5, max_len: MaxLen::Relative { factor: 2, offset: 10 }, length_penalty: 1.0 }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self { beam_size: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Validation("beam size must be at least 1".into()));
        }
        if matches!(self.max_len, MaxLen::Fixed(0)) {
            return Err(Error::Validation("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Supplies next-token log-probabilities for a set of generated prefixes.
pub trait StepScorer {
    fn eos(&self) -> u32;
    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, without the final eos.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// Length-normalized log-probability.
    pub score: f64,
    pub finished: bool,
}

fn normalized(log_prob: f64, len: usize, penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(penalty)
}

/// Standard beam search. At every step the candidates of all live beams are
/// ranked by cumulative log-probability (ties: earlier beam, then lower
/// token id). An eos among the top `beam` candidates finishes that
/// hypothesis; the best non-eos candidates refill the beam. Search stops once
/// `beam` hypotheses have finished or after `max_len` tokens. The returned
/// hypothesis maximizes the length-normalized score among finished ones, or
/// among the live beams (flagged unfinished) if none finished.
pub fn beam_search(scorer: &mut dyn StepScorer, beam: usize, max_len: usize, length_penalty: f64) -> Result<Hypothesis> {
    if beam == 0 || max_len == 0 {
        return Err(Error::Validation("beam and max_len must be at least 1".into()));
    }
    let eos = scorer.eos();
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<u32>> = live.iter().map(|(t, _)| t.clone()).collect();
        let lps = scorer.log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (b, lp) in lps.iter().enumerate() {
            for (tok, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    cands.push((live[b].1 + l, b, tok as u32));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for (rank, &(score, b, tok)) in cands.iter().enumerate() {
            if rank >= beam && next.len() >= beam {
                break;
            }
            if tok == eos {
                if rank < beam {
                    let tokens = live[b].0.clone();
                    let len = tokens.len() + 1;
                    finished.push(Hypothesis { tokens, log_prob: score, score: normalized(score, len, length_penalty), finished: true });
                }
            } else if next.len() < beam {
                let mut t = live[b].0.clone();
                t.push(tok);
                next.push((t, score));
            }
        }
        live = next;
        if finished.len() >= beam || live.is_empty() {
            break;
        }
    }
    let best = |hs: Vec<Hypothesis>| {
        hs.into_iter().reduce(|best, h| if h.score > best.score { h } else { best })
    };
    if let Some(h) = best(finished) {
        return Ok(h);
    }
    let unfinished = live
        .into_iter()
        .map(|(tokens, lp)| {
            let len = tokens.len();
            Hypothesis { tokens, log_prob: lp, score: normalized(lp, len, length_penalty), finished: false }
        })
        .collect();
    best(unfinished).ok_or_else(|| Error::Validation("beam search produced no hypothesis".into()))
}

/// Scores prefixes with a transformer; prepends bos internally.
pub struct ModelScorer<'a> {
    store: &'a ParameterStore,
    config: &'a ModelConfig,
    source: EncodedSource,
    bos: u32,
    eos: u32,
}

impl<'a> ModelScorer<'a> {
    pub fn new(store: &'a ParameterStore, config: &'a ModelConfig, src_ids: &[u32], bos: u32, eos: u32) -> Result<Self> {
        Ok(Self { store, config, source: encode_source(store, config, src_ids)?, bos, eos })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn eos(&self) -> u32 {
        self.eos
    }

    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let full: Vec<Vec<u32>> = prefixes
            .iter()
            .map(|p| std::iter::once(self.bos).chain(p.iter().copied()).collect())
            .collect();
        next_log_probs(self.store, self.config, &self.source, &full)
    }
}

/// Anything that can translate a line into a target language.
pub trait Translator {
    fn translate(&self, text: &str, tgt_lang: &str) -> Result<String>;
}

/// A store plus the vocabularies and language codes needed to translate.
#[derive(Clone, Debug)]
pub struct TranslationModel {
    pub config: ModelConfig,
    pub store: Arc<ParameterStore>,
    pub src_vocab: Arc<Vocabulary>,
    pub tgt_vocab: Arc<Vocabulary>,
    /// Target language to source-side code id; `None` means no code is used.
    pub codes: BTreeMap<String, Option<u32>>,
    pub decode: DecodeConfig,
}

impl TranslationModel {
    /// Uses every language code of the source vocabulary.
    pub fn new(config: ModelConfig, store: Arc<ParameterStore>, src_vocab: Arc<Vocabulary>, tgt_vocab: Arc<Vocabulary>) -> Self {
        let codes = src_vocab.lang_codes().iter().map(|(l, &id)| (l.clone(), Some(id))).collect();
        Self { config, store, src_vocab, tgt_vocab, codes, decode: DecodeConfig::default() }
    }

    pub fn with_decode(mut self, decode: DecodeConfig) -> Self {
        self.decode = decode;
        self
    }

    pub fn code_for(&self, tgt_lang: &str) -> Result<Option<u32>> {
        self.codes.get(tgt_lang).copied().ok_or_else(|| Error::UnknownLanguage(tgt_lang.to_string()))
    }

    pub fn source_ids(&self, text: &str, tgt_lang: &str) -> Result<Vec<u32>> {
        Ok(source_ids(&self.src_vocab, text, self.code_for(tgt_lang)?))
    }

    /// Decodes one source id sequence to target ids.
    pub fn translate_ids(&self, src_ids: &[u32]) -> Result<Hypothesis> {
        self.decode.validate()?;
        let sp = self.tgt_vocab.specials();
        let mut scorer = ModelScorer::new(&self.store, &self.config, src_ids, sp.bos, sp.eos)?;
        let max_len = self.decode.max_len.resolve(src_ids.len());
        beam_search(&mut scorer, self.decode.beam_size, max_len, self.decode.length_penalty)
    }

    pub fn translate_all(&self, lines: &[String], tgt_lang: &str) -> Result<Vec<String>> {
        lines.iter().map(|l| self.translate(l, tgt_lang)).collect()
    }
}

impl Translator for TranslationModel {
    fn translate(&self, text: &str, tgt_lang: &str) -> Result<String> {
        let ids = self.source_ids(text, tgt_lang)?;
        if text.split_whitespace().next().is_none() {
            return Ok(String::new());
        }
        let hyp = self.translate_ids(&ids)?;
        if !hyp.finished {
            log::debug!("no hypothesis reached eos for {text:?}");
        }
        self.tgt_vocab.decode(&hyp.tokens)
    }
}

/// Translates into `pivot` with `src_model`, then into `tgt_lang` with `tgt_model`.
pub fn pivot_translate(
    src_model: &dyn Translator,
    tgt_model: &dyn Translator,
    text: &str,
    pivot: &str,
    tgt_lang: &str,
) -> Result<String> {
    let mid = src_model
        .translate(text, pivot)
        .map_err(|e| Error::PivotLeg { leg: "first", source: Box::new(e) })?;
    tgt_model
        .translate(&mid, tgt_lang)
        .map_err(|e| Error::PivotLeg { leg: "second", source: Box::new(e) })
}
