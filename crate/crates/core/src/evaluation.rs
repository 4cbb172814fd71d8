//! Corpus-level BLEU and chrF, and averaged score tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Direction, ENGLISH};
use crate::error::{Error, Result};

fn check_corpora(hyps: &[String], refs: &[String]) -> Result<()> {
    if refs.is_empty() {
        return Err(Error::Validation("empty reference corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Validation(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    Ok(())
}

fn ngram_counts<'a, T: Eq + std::hash::Hash>(items: &'a [T], n: usize) -> HashMap<&'a [T], usize> {
    let mut m = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Sufficient statistics for corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub correct: Vec<usize>,
    pub hyp_totals: Vec<usize>,
    pub ref_totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

pub fn bleu_stats(hyps: &[String], refs: &[String], max_n: usize) -> Result<BleuStats> {
    check_corpora(hyps, refs)?;
    let mut s = BleuStats {
        correct: vec![0; max_n],
        hyp_totals: vec![0; max_n],
        ref_totals: vec![0; max_n],
        ..Default::default()
    };
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        s.hyp_len += h.len();
        s.ref_len += r.len();
        for n in 1..=max_n {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            s.hyp_totals[n - 1] += h.len().saturating_sub(n - 1);
            s.ref_totals[n - 1] += r.len().saturating_sub(n - 1);
            s.correct[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    Ok(s)
}

impl BleuStats {
    /// BLEU on a 0-100 scale with exponential smoothing.
    ///
    /// An order with no matches gets precision `1 / (2^k * total)` for the
    /// k-th such order. An order where the hypotheses have no n-grams but the
    /// references do is smoothed the same way with a total of 1. Orders
    /// absent from both sides are left out of the geometric mean.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut smooth = 1.0;
        let mut log_sum = 0.0;
        let mut orders = 0;
        for n in 0..self.correct.len() {
            let (c, t) = (self.correct[n], self.hyp_totals[n]);
            if t == 0 && self.ref_totals[n] == 0 {
                continue;
            }
            let p = if c == 0 {
                smooth *= 2.0;
                1.0 / (smooth * t.max(1) as f64)
            } else {
                c as f64 / t as f64
            };
            log_sum += p.ln();
            orders += 1;
        }
        if orders == 0 {
            return 0.0;
        }
        let bp = (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0).exp();
        100.0 * bp * (log_sum / orders as f64).exp()
    }
}

/// Corpus BLEU over whitespace tokens, orders 1..=4.
pub fn bleu(hyps: &[String], refs: &[String]) -> Result<f64> {
    Ok(bleu_stats(hyps, refs, 4)?.score())
}

/// Corpus chrF (beta 2, character orders 1..=6, whitespace removed), 0-100.
pub fn chrf(hyps: &[String], refs: &[String]) -> Result<f64> {
    chrf_with(hyps, refs, 6, 2.0)
}

pub fn chrf_with(hyps: &[String], refs: &[String], max_n: usize, beta: f64) -> Result<f64> {
    check_corpora(hyps, refs)?;
    // (hyp n-grams, ref n-grams, matches) per order
    let mut stats = vec![(0usize, 0usize, 0usize); max_n];
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<char> = h.chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = r.chars().filter(|c| !c.is_whitespace()).collect();
        for n in 1..=max_n {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            let st = &mut stats[n - 1];
            st.0 += hc.values().sum::<usize>();
            st.1 += rc.values().sum::<usize>();
            st.2 += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let (mut p, mut r, mut orders) = (0.0, 0.0, 0);
    for &(hn, rn, m) in &stats {
        if hn > 0 && rn > 0 {
            p += m as f64 / hn as f64;
            r += m as f64 / rn as f64;
            orders += 1;
        }
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let (p, r) = (p / orders as f64, r / orders as f64);
    if p == 0.0 && r == 0.0 {
        return Ok(0.0);
    }
    let b2 = beta * beta;
    Ok(100.0 * (1.0 + b2) * p * r / (b2 * p + r))
}

/// Per-direction scores with pivot-centric averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub metric: String,
    pub scores: BTreeMap<Direction, f64>,
    pub to_pivot: Option<f64>,
    pub from_pivot: Option<f64>,
    pub non_pivot: Option<f64>,
    pub missing: Vec<Direction>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Averages into-pivot, out-of-pivot and non-pivot directions among the
/// ordered pairs of `langs` (the pivot is added if absent). Expected
/// directions without a score are listed and excluded from the means.
pub fn aggregate(metric: &str, scores: &BTreeMap<Direction, f64>, langs: &[String], pivot: &str) -> ScoreTable {
    let mut all: Vec<&str> = langs.iter().map(String::as_str).collect();
    if !all.contains(&pivot) {
        all.push(pivot);
    }
    all.sort();
    all.dedup();
    let (mut to, mut from, mut non, mut missing) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &x in &all {
        for &y in &all {
            if x == y {
                continue;
            }
            let d = Direction::new(x, y);
            let Some(&s) = scores.get(&d) else {
                log::warn!("no {metric} score for {d}; excluded from averages");
                missing.push(d);
                continue;
            };
            if y == pivot {
                to.push(s);
            } else if x == pivot {
                from.push(s);
            } else {
                non.push(s);
            }
        }
    }
    ScoreTable {
        metric: metric.to_string(),
        scores: scores.clone(),
        to_pivot: mean(&to),
        from_pivot: mean(&from),
        non_pivot: mean(&non),
        missing,
    }
}

pub fn aggregate_en(metric: &str, scores: &BTreeMap<Direction, f64>, langs: &[String]) -> ScoreTable {
    aggregate(metric, scores, langs, ENGLISH)
}

impl ScoreTable {
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<12} {:>8}\n", "direction", self.metric);
        for (d, s) in &self.scores {
            let _ = writeln!(out, "{:<12} {:>8.2}", d.to_string(), s);
        }
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(out, "{:<12} {:>8}", "avg to-en", fmt(self.to_pivot));
        let _ = writeln!(out, "{:<12} {:>8}", "avg from-en", fmt(self.from_pivot));
        let _ = writeln!(out, "{:<12} {:>8}", "avg non-en", fmt(self.non_pivot));
        for d in &self.missing {
            let _ = writeln!(out, "{:<12} {:>8}", d.to_string(), "absent");
        }
        out
    }

    /// `key = value` lines for machine consumption.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (d, s) in &self.scores {
            let _ = writeln!(out, "{}.{d} = {s:?}", self.metric);
        }
        for (k, v) in [("to_en", self.to_pivot), ("from_en", self.from_pivot), ("non_en", self.non_pivot)] {
            if let Some(v) = v {
                let _ = writeln!(out, "{}.avg.{k} = {v:?}", self.metric);
            }
        }
        out
    }
}
