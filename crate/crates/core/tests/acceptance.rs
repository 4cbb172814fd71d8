//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.
//!
//! The experiment grid is cached under `$INCNMT_ARTIFACTS` when set, else
//! under cargo's per-target temporary directory, so re-runs are fast.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use incnmt::composition::{compose, load_model, load_pack, load_store, save_model, save_store};
use incnmt::corpus::{build_multiparallel, make_schedule, CorpusPair, Direction, DirectionSchedule, ENGLISH};
use incnmt::evaluation::{bleu, chrf};
use incnmt::harness::{run_experiment, run_id, Data, ExperimentConfig, ExperimentOutcome, RunKind, Split, ARTIFACTS_ENV};
use incnmt::inference::{beam_search, StepScorer, TranslationModel};
use incnmt::model::{
    init_model_sized, insert_adapters, AdapterSpec, Forward, LayerSel, ModelConfig, ParameterStore, Role, Side,
    SRC_EMBED,
};
use incnmt::tensor::Tensor;
use incnmt::training::{
    freeze_violations, recipe_new_source, train, upsample_language, FreezeSpec, NoHook, OptimizerConfig, Variant,
};
use incnmt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn artifacts() -> PathBuf {
    std::env::var_os(ARTIFACTS_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-artifacts"))
}

struct Grid {
    cfg: ExperimentConfig,
    out: ExperimentOutcome,
    data: Data,
}

impl Grid {
    fn result(&self, name: &str, seed: u64) -> Result<&incnmt::harness::RunResult> {
        self.out.result(&run_id(name, seed))
    }

    /// chrF of a run's primary direction.
    fn primary(&self, name: &str, seed: u64) -> Result<f64> {
        let r = self.result(name, seed)?;
        Ok(r.score("chrf", &r.primary()).unwrap_or(f64::NAN))
    }

    /// Mean chrF over a source run's zero-shot directions into initial languages.
    fn zero_shot(&self, name: &str, seed: u64) -> Result<f64> {
        Ok(self.result(name, seed)?.secondary_mean("chrf").unwrap_or(f64::NAN))
    }

    fn zero_shot_detail(&self, name: &str, seed: u64) -> Result<String> {
        let r = self.result(name, seed)?;
        let p = r.primary();
        Ok(r.scores["chrf"]
            .iter()
            .filter(|(d, _)| **d != p)
            .map(|(d, s)| format!("{d}={s:.1}"))
            .collect::<Vec<_>>()
            .join(" "))
    }
}

// ---------------------------------------------------------------- criterion 1

fn initial_lines(g: &Grid) -> Result<Vec<(Direction, String)>> {
    let langs = g.cfg.initial_langs();
    let dirs = [
        Direction::new(langs[1].clone(), ENGLISH),
        Direction::new(ENGLISH, langs[2].clone()),
        Direction::new(langs[3].clone(), langs[4].clone()),
        Direction::new(langs[4].clone(), langs[1].clone()),
    ];
    let mut out = Vec::new();
    for d in dirs {
        for (s, _) in g.data.pairs(&d, Split::Test, Some(50))?.pairs {
            out.push((d.clone(), s));
        }
    }
    Ok(out)
}

fn base_tokens(m: &TranslationModel, lines: &[(Direction, String)]) -> Result<Vec<Vec<u32>>> {
    lines.iter().map(|(d, s)| Ok(m.translate_ids(&m.source_ids(s, &d.tgt)?)?.tokens)).collect()
}

fn criterion_1(g: &Grid) -> Result<Verdict> {
    let t = Instant::now();
    let base = g.out.base_model(&g.cfg.decode)?;
    let lines = initial_lines(g)?;
    let pre = base_tokens(&base, &lines)?;
    let mut problems = Vec::new();
    let mut checked = 0;
    let mut src_packs = Vec::new();
    let mut tgt_packs = Vec::new();
    for (id, (dir, r)) in &g.out.runs {
        if !matches!(r.kind, RunKind::NewSource | RunKind::NewTarget) {
            continue;
        }
        let trained = load_model(&dir.join("model"))?;
        let freeze: FreezeSpec = serde_json::from_str(&std::fs::read_to_string(dir.join("freeze.json"))?)?;
        let v = freeze_violations(&base.store, &trained.store, &freeze);
        if !v.is_empty() {
            problems.push(format!("{id}: frozen tensors changed: {v:?}"));
        }
        let pack = load_pack(&dir.join("pack"))?;
        if r.kind == RunKind::NewSource {
            src_packs.push(pack);
        } else {
            tgt_packs.push(pack);
        }
        checked += 1;
    }
    // Compose every pack pair over the same base object.
    for s in &src_packs {
        for t in &tgt_packs {
            compose(&base, Some(s), Some(t))?;
        }
    }
    // An in-process recipe trained from the shared base arrays.
    let x = &g.cfg.runs.iter().find(|r| r.kind == RunKind::NewSource).expect("grid has a source run").lang;
    let mut corpora = BTreeMap::new();
    corpora.insert(x.clone(), g.data.mono(x, Split::Train, None)?);
    let vocab = incnmt::harness::build_vocab(&g.cfg.data, &corpora, &g.cfg.initial_langs(), 7)?;
    let variant = Variant::embed_only().with(incnmt::training::Extra::Layers(Side::Encoder, LayerSel::All));
    let r = recipe_new_source(&base, &vocab, &variant, 7)?;
    let template = r.model(&base, r.store.clone());
    let pairs = g.data.pairs(&Direction::new(x.clone(), ENGLISH), Split::Train, Some(200))?;
    let mut td = incnmt::training::TrainData::new();
    td.insert(pairs.direction(), incnmt::training::encode_pairs(&template, ENGLISH, &pairs.pairs)?);
    let sched = DirectionSchedule::from_probs(BTreeMap::from([(pairs.direction(), 1.0)]))?;
    let opt = OptimizerConfig { max_steps: 30, warmup_steps: 10, peak_lr: 5e-3, log_interval: 0, ..Default::default() };
    let out = train(&r.store, &base.config, &sched, &td, &r.freeze, &opt, 7, &mut NoHook, None)?;
    let v = freeze_violations(&base.store, &out.store, &r.freeze);
    if !v.is_empty() {
        problems.push(format!("in-process all-encoder recipe: frozen tensors changed: {v:?}"));
    }

    let post = base_tokens(&base, &lines)?;
    let reloaded = g.out.base_model(&g.cfg.decode)?;
    let post_reloaded = base_tokens(&reloaded, &lines)?;
    let same = pre.iter().zip(&post).filter(|(a, b)| a == b).count();
    let same_reloaded = pre.iter().zip(&post_reloaded).filter(|(a, b)| a == b).count();
    if same != pre.len() || same_reloaded != pre.len() {
        problems.push(format!("token-identical lines: {same}/{} in memory, {same_reloaded}/{} reloaded", pre.len(), pre.len()));
    }
    // Translations written by the base stage before any incremental run.
    let mut file_mismatch = 0;
    let mut by_dir: BTreeMap<&Direction, usize> = BTreeMap::new();
    for ((d, _), toks) in lines.iter().zip(&pre) {
        let k = by_dir.entry(d).or_default();
        let saved = std::fs::read_to_string(g.out.base_dir.join("hyps").join(format!("hyp.{d}.txt")))?;
        if saved.lines().nth(*k) != Some(base.tgt_vocab.decode(toks)?.as_str()) {
            file_mismatch += 1;
        }
        *k += 1;
    }
    if file_mismatch > 0 {
        problems.push(format!("{file_mismatch} lines differ from the base stage's own output"));
    }
    let secs = t.elapsed().as_secs_f64();
    if secs >= 300.0 {
        problems.push(format!("took {secs:.0}s"));
    }
    Ok(verdict(
        problems.is_empty() && checked > 0,
        format!("{checked} recipes checked, {} lines token-identical, {secs:.1}s {}", pre.len(), problems.join("; ")),
    ))
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2(g: &Grid) -> Result<Verdict> {
    let base = g.out.base_model(&g.cfg.decode)?;
    let cfg = &base.config;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = base.src_vocab.len() as u32;
    let srcs: Vec<Vec<u32>> = (0..4).map(|_| (0..7).map(|_| rng.random_range(4..v)).chain([2]).collect()).collect();
    let tgts: Vec<Vec<u32>> = (0..4).map(|_| std::iter::once(1).chain((0..6).map(|_| rng.random_range(4..v))).collect()).collect();
    let logits = |s: &ParameterStore| -> Result<Tensor> {
        let mut f = Forward::inference(s, cfg);
        let (n, _) = f.run(&srcs, &tgts)?;
        Ok(f.graph.value(n).clone())
    };
    let reference = logits(&base.store)?;
    let specs = [
        vec![AdapterSpec::new(Side::Encoder, LayerSel::All, 16)],
        vec![AdapterSpec::new(Side::Decoder, LayerSel::Last, 4)],
        vec![AdapterSpec::new(Side::Encoder, LayerSel::First, 64), AdapterSpec::new(Side::Decoder, LayerSel::All, 8)],
    ];
    let mut worst: f64 = 0.0;
    let mut stacked = (*base.store).clone();
    for (i, spec) in specs.iter().enumerate() {
        let s = insert_adapters(&base.store, cfg, spec, i as u64)?;
        worst = worst.max(logits(&s)?.max_abs_diff(&reference));
        stacked = insert_adapters(&stacked, cfg, spec, 10 + i as u64)?;
    }
    worst = worst.max(logits(&stacked)?.max_abs_diff(&reference));
    Ok(verdict(worst <= 1e-6, format!("max |Δlogit| = {worst:.2e} over {} specs plus a stack", specs.len())))
}

// ---------------------------------------------------------------- criterion 3

fn criterion_3() -> Result<Verdict> {
    let cfg = ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 12,
        dropout: 0.0,
        tie_target_embed_and_output: false,
        tie_all_embeddings: false,
    };
    let (sv, tv) = (11, 9);
    let store: ParameterStore<f64> = init_model_sized(&cfg, sv, tv, 3)?;
    let mut store = insert_adapters(&store, &cfg, &[AdapterSpec::new(Side::Encoder, LayerSel::All, 3), AdapterSpec::new(Side::Decoder, LayerSel::Last, 3)], 4)?;
    // Adapters start as the identity; move them off zero so every path has gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let adapter_names: Vec<String> = store.entries().filter(|(_, e)| e.role == Role::Adapter).map(|(n, _)| n.to_string()).collect();
    for n in &adapter_names {
        for x in store.get_mut(n)?.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let code = 4u32;
    let srcs = vec![vec![code, 6, 7, 9, 2], vec![code, 10, 5, 2]];
    let tin = vec![vec![1, 5, 6, 8], vec![1, 7]];
    let tout: Vec<u32> = vec![5, 6, 8, 2, 7, 2];
    let loss = |s: &ParameterStore<f64>| -> Result<f64> {
        let mut f = Forward::inference(s, &cfg);
        let (lg, _) = f.run(&srcs, &tin)?;
        let l = f.graph.smoothed_xent(lg, &tout, 0.1);
        Ok(f.graph.value(l).data()[0])
    };
    let all: HashSet<usize> = store.entries().map(|(_, e)| e.slot).collect();
    let grads = {
        let mut f = Forward::training(&store, &cfg, &all, None);
        let (lg, _) = f.run(&srcs, &tin)?;
        let l = f.graph.smoothed_xent(lg, &tout, 0.1);
        f.graph.backward(l)
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut covered = BTreeSet::new();
    let names: Vec<(String, Role, usize)> = store.entries().map(|(n, e)| (n.to_string(), e.role, e.slot)).collect();
    for (name, role, slot) in names {
        let t = store.get(&name)?.clone();
        let cols = t.cols();
        let mut picks: Vec<usize> = match role {
            Role::SrcEmbed => vec![6 * cols, 9 * cols + 1, 10 * cols + cols - 1],
            Role::TgtEmbed => vec![5 * cols, 8 * cols + 2],
            _ => (0..3).map(|_| rng.random_range(0..t.len())).collect(),
        };
        let mut tags = vec![role];
        if name == SRC_EMBED {
            picks.push(code as usize * cols + 3);
            tags.push(Role::LangCodeRow);
        }
        for (k, &i) in picks.iter().enumerate() {
            let orig = t.data()[i];
            store.get_mut(&name)?.data_mut()[i] = orig + h;
            let up = loss(&store)?;
            store.get_mut(&name)?.data_mut()[i] = orig - h;
            let down = loss(&store)?;
            store.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(&slot).map_or(0.0, |g| g.data()[i]);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
            covered.insert(if k == picks.len() - 1 && tags.len() > 1 { tags[1] } else { tags[0] });
        }
    }
    let expected: BTreeSet<Role> = Role::ALL.iter().copied().filter(|r| *r != Role::Other).collect();
    let missing: Vec<_> = expected.difference(&covered).collect();
    Ok(verdict(
        worst < 1e-3 && missing.is_empty(),
        format!("max relative error {worst:.2e} across roles {:?}; missing {missing:?}", covered),
    ))
}

// ---------------------------------------------------------------- criterion 4

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Occurrences of `g` in `seq` by direct scanning.
fn occurrences<T: PartialEq>(seq: &[T], g: &[T]) -> usize {
    if g.len() > seq.len() {
        return 0;
    }
    (0..=seq.len() - g.len()).filter(|&i| seq[i..i + g.len()] == *g).count()
}

fn distinct_ngrams<T: PartialEq + Clone>(seq: &[T], n: usize) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = Vec::new();
    if seq.len() >= n {
        for i in 0..=seq.len() - n {
            let g = seq[i..i + n].to_vec();
            if !out.contains(&g) {
                out.push(g);
            }
        }
    }
    out
}

fn oracle_bleu(hyps: &[String], refs: &[String]) -> f64 {
    let (mut hl, mut rl) = (0usize, 0usize);
    let mut orders = vec![(0usize, 0usize, 0usize); 4];
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (words(h), words(r));
        hl += h.len();
        rl += r.len();
        for n in 1..=4 {
            let o = &mut orders[n - 1];
            for g in distinct_ngrams(&h, n) {
                o.0 += occurrences(&h, &g).min(occurrences(&r, &g));
            }
            o.1 += distinct_ngrams(&h, n).iter().map(|g| occurrences(&h, g)).sum::<usize>();
            o.2 += distinct_ngrams(&r, n).iter().map(|g| occurrences(&r, g)).sum::<usize>();
        }
    }
    if hl == 0 {
        return 0.0;
    }
    let mut k = 0;
    let mut logs = Vec::new();
    for &(m, ht, rt) in &orders {
        if ht == 0 && rt == 0 {
            continue;
        }
        if m == 0 {
            k += 1;
            logs.push((1.0 / (2f64.powi(k) * ht.max(1) as f64)).ln());
        } else {
            logs.push((m as f64 / ht as f64).ln());
        }
    }
    if logs.is_empty() {
        return 0.0;
    }
    let bp = if hl < rl { (1.0 - rl as f64 / hl as f64).exp() } else { 1.0 };
    100.0 * bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

fn oracle_chrf(hyps: &[String], refs: &[String]) -> f64 {
    let mut stats = vec![(0usize, 0usize, 0usize); 6];
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<char> = h.chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = r.chars().filter(|c| !c.is_whitespace()).collect();
        for n in 1..=6 {
            let s = &mut stats[n - 1];
            s.0 += h.len().saturating_sub(n - 1).min(if h.len() >= n { usize::MAX } else { 0 });
            s.1 += r.len().saturating_sub(n - 1).min(if r.len() >= n { usize::MAX } else { 0 });
            for g in distinct_ngrams(&h, n) {
                s.2 += occurrences(&h, &g).min(occurrences(&r, &g));
            }
        }
    }
    let used: Vec<_> = stats.iter().filter(|s| s.0 > 0 && s.1 > 0).collect();
    if used.is_empty() {
        return 0.0;
    }
    let p = used.iter().map(|s| s.2 as f64 / s.0 as f64).sum::<f64>() / used.len() as f64;
    let r = used.iter().map(|s| s.2 as f64 / s.1 as f64).sum::<f64>() / used.len() as f64;
    if p + r == 0.0 {
        return 0.0;
    }
    100.0 * 5.0 * p * r / (4.0 * p + r)
}

struct Table {
    eos: u32,
    /// Log-probabilities keyed by prefix.
    rows: BTreeMap<Vec<u32>, Vec<f64>>,
    seed: u64,
    vocab: usize,
}

impl Table {
    fn row(&mut self, prefix: &[u32]) -> Vec<f64> {
        let (seed, v) = (self.seed, self.vocab);
        self.rows
            .entry(prefix.to_vec())
            .or_insert_with(|| {
                let mut h = seed;
                for &t in prefix {
                    h = h.wrapping_mul(31).wrapping_add(t as u64 + 1);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(h);
                let w: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0f64)).collect();
                let z: f64 = w.iter().sum();
                w.iter().map(|x| (x / z).ln()).collect()
            })
            .clone()
    }
}

impl StepScorer for Table {
    fn eos(&self) -> u32 {
        self.eos
    }

    fn log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.row(p)).collect())
    }
}

/// Best finished sequence by exhaustive enumeration.
fn exhaustive(t: &mut Table, max_len: usize) -> (Vec<u32>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut stack = vec![(Vec::<u32>::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let row = t.row(&prefix);
        for (tok, &l) in row.iter().enumerate() {
            if tok as u32 == t.eos {
                let score = (lp + l) / (prefix.len() + 1) as f64;
                if score > best.1 {
                    best = (prefix.clone(), score);
                }
            } else if prefix.len() + 1 < max_len {
                let mut p = prefix.clone();
                p.push(tok as u32);
                stack.push((p, lp + l));
            }
        }
    }
    best
}

fn criterion_4() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut failures = Vec::new();
    let alphabet = ["a", "b", "c", "ab", "ba", "cab"];
    let sentence = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect::<Vec<_>>().join(" ");

    // Metrics.
    let (h, r) = (vec!["the cat sat".to_string()], vec!["the cat sat on".to_string()]);
    let hand = 100.0 * (-1.0f64 / 3.0).exp() * 0.5f64.powf(0.25);
    if (bleu(&h, &r)? - hand).abs() > 1e-9 {
        failures.push("bleu hand example".to_string());
    }
    let mut metric_err: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..4);
        let hyps: Vec<String> = (0..n).map(|_| { let k = rng.random_range(0..7); sentence(&mut rng, k) }).collect();
        let refs: Vec<String> = (0..n).map(|_| { let k = rng.random_range(1..7); sentence(&mut rng, k) }).collect();
        metric_err = metric_err.max((bleu(&hyps, &refs)? - oracle_bleu(&hyps, &refs)).abs());
        metric_err = metric_err.max((chrf(&hyps, &refs)? - oracle_chrf(&hyps, &refs)).abs());
    }
    if metric_err > 1e-9 {
        failures.push(format!("metric deviation {metric_err:.2e}"));
    }

    // Beam search.
    let mut beam_cases = 0;
    for seed in 0..40 {
        let mut t = Table { eos: 0, rows: BTreeMap::new(), seed, vocab: 3 };
        let max_len = 4;
        let (tokens, score) = exhaustive(&mut t, max_len);
        let wide = beam_search(&mut t, 3usize.pow(max_len as u32), max_len, 1.0)?;
        if wide.tokens != tokens || (wide.score - score).abs() > 1e-12 {
            failures.push(format!("wide beam differs from exhaustive search (seed {seed})"));
        }
        let mut greedy = Vec::new();
        let mut lp = 0.0;
        loop {
            let row = t.row(&greedy);
            let (tok, &l) = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).unwrap();
            lp += l;
            if tok == 0 || greedy.len() + 1 == max_len {
                if tok != 0 {
                    greedy.push(tok as u32);
                }
                break;
            }
            greedy.push(tok as u32);
        }
        let one = beam_search(&mut t, 1, max_len, 1.0)?;
        if one.tokens != greedy || (one.log_prob - lp).abs() > 1e-12 {
            failures.push(format!("beam 1 differs from greedy (seed {seed})"));
        }
        beam_cases += 1;
    }

    // Multi-parallel join.
    let mut join_cases = 0;
    for _ in 0..50 {
        let langs = ["xa", "xb", "xc"];
        let corpora: Vec<CorpusPair> = langs
            .iter()
            .map(|l| {
                let n = rng.random_range(0..12);
                let pairs = (0..n).map(|i| (format!("{l}{i}"), format!("e{}", rng.random_range(0..8)))).collect();
                CorpusPair::new(*l, ENGLISH, pairs)
            })
            .collect();
        let out = build_multiparallel(&corpora)?;
        for x in &corpora {
            for y in &corpora {
                if x.src_lang == y.src_lang {
                    continue;
                }
                let mut expect = Vec::new();
                let mut seen = Vec::new();
                for (xl, xe) in &x.pairs {
                    if seen.contains(xe) {
                        continue;
                    }
                    seen.push(xe.clone());
                    if let Some((yl, _)) = y.pairs.iter().find(|(_, ye)| ye == xe) {
                        expect.push((xl.clone(), yl.clone()));
                    }
                }
                let got = out.iter().find(|c| c.src_lang == x.src_lang && c.tgt_lang == y.src_lang).map(|c| c.pairs.clone());
                if got != Some(expect) {
                    failures.push(format!("join {}-{} differs", x.src_lang, y.src_lang));
                }
            }
        }
        join_cases += 1;
    }

    // Temperature schedule: p_i proportional to (n_i / N)^(1/T).
    let mut sched_cases = 0;
    for _ in 0..50 {
        let t = [1.0, 2.0, 5.0][rng.random_range(0..3)];
        let sizes: BTreeMap<Direction, usize> = (0..rng.random_range(1..6))
            .map(|i| (Direction::new(format!("l{i}"), ENGLISH), rng.random_range(1..1000)))
            .collect();
        let s = make_schedule(&sizes, t, &BTreeMap::new())?;
        let total: f64 = sizes.values().map(|&n| n as f64).sum();
        let w: Vec<f64> = sizes.values().map(|&n| (n as f64 / total).powf(1.0 / t)).collect();
        let z: f64 = w.iter().sum();
        for ((d, _), wi) in sizes.iter().zip(&w) {
            if (s.prob(d).unwrap() - wi / z).abs() > 1e-12 {
                failures.push(format!("schedule probability for {d}"));
            }
        }
        sched_cases += 1;
    }
    Ok(verdict(
        failures.is_empty(),
        format!(
            "metrics max dev {metric_err:.1e}; {beam_cases} beam, {join_cases} join, {sched_cases} schedule cases {}",
            failures.join("; ")
        ),
    ))
}

// ---------------------------------------------------------------- criteria 5-8

fn criterion_5(g: &Grid) -> Result<Verdict> {
    let mut parts = Vec::new();
    let mut ok = true;
    for seed in [1, 2, 3] {
        let ours = g.primary("src-embed", seed)?;
        let scratch = g.primary("bilingual", seed)?;
        let (dir, _) = &g.out.runs[&run_id("src-embed", seed)];
        let secs: f64 = std::fs::read_to_string(dir.join("train_seconds.txt")).ok().and_then(|s| s.trim().parse().ok()).unwrap_or(f64::NAN);
        let pass = ours >= 0.95 * scratch && secs < 900.0;
        ok &= pass;
        parts.push(format!("seed {seed}: {ours:.1} vs {scratch:.1} ({:.0}%, {secs:.0}s)", 100.0 * ours / scratch));
    }
    Ok(verdict(ok, parts.join(", ")))
}

fn criterion_6(g: &Grid) -> Result<Verdict> {
    let all_enc = g.zero_shot("src-all-enc", 1)?;
    let embed = g.zero_shot("src-embed", 1)?;
    let embed_en = g.primary("src-embed", 1)?;
    let pass = all_enc < 0.5 * embed && embed >= 0.8 * embed_en;
    Ok(verdict(
        pass,
        format!(
            "zero-shot chrF all-enc {all_enc:.1} vs embed-only {embed:.1}; embed-only keeps {:.0}% of its to-en {embed_en:.1} [{}]",
            100.0 * embed / embed_en,
            g.zero_shot_detail("src-all-enc", 1)?
        ),
    ))
}

fn criterion_7(g: &Grid) -> Result<Verdict> {
    let (plain, bt) = (g.zero_shot("src-adapters", 1)?, g.zero_shot("src-adapters-bt", 1)?);
    let (plain_en, bt_en) = (g.primary("src-adapters", 1)?, g.primary("src-adapters-bt", 1)?);
    let pass = bt > plain && bt_en >= plain_en - 2.0;
    Ok(verdict(pass, format!("zero-shot chrF {plain:.1} -> {bt:.1} with back-translation; to-en {plain_en:.1} -> {bt_en:.1}")))
}

fn criterion_8(g: &Grid) -> Result<Verdict> {
    let c = g.out.compositions.values().next().ok_or_else(|| incnmt::Error::Config("grid has no composition".into()))?;
    let composed = c.composed["chrf"][&c.direction];
    let pivot = c.pivot["chrf"][&c.direction];
    let forgetting = g.zero_shot("src-all-enc", 1)?;
    let pass = (composed - pivot).abs() <= 0.1 * pivot && composed > forgetting;
    Ok(verdict(
        pass,
        format!("{}: composed {composed:.1}, pivot {pivot:.1}, forgetting variant {forgetting:.1}", c.direction),
    ))
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9(g: &Grid) -> Result<Verdict> {
    let fixture = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/golden_store"));
    let golden = load_store(fixture)?;
    let bits: Vec<u32> = golden.get("out_proj")?.data().iter().map(|x| x.to_bits()).collect();
    let mut ok = bits == [0x3f00_0000, 0x8000_0000, 0x3300_d959, 0x477f_e000];
    let dir = tempfile::tempdir()?;
    save_store(&dir.path().join("golden"), &golden)?;
    ok &= std::fs::read(fixture.join("payload.bin"))? == std::fs::read(dir.path().join("golden/payload.bin"))?;
    let base = g.out.base_model(&g.cfg.decode)?;
    save_model(&dir.path().join("base"), &base)?;
    let back = load_model(&dir.path().join("base"))?;
    ok &= back.store.bitwise_eq(&base.store) && back.src_vocab == base.src_vocab;
    Ok(verdict(ok, format!("golden fixture decoded and re-encoded byte-identically; base store ({} values) round-trips", base.store.total_values())))
}

// ---------------------------------------------------------------- criterion 10

fn criterion_10(g: &Grid) -> Result<Verdict> {
    let run = g.cfg.runs.iter().find(|r| r.retrain == Some(incnmt::training::RetrainMode::Garcia));
    let factor = run.map_or(5.0, |r| r.upsample);
    let new = run.map_or("na".to_string(), |r| r.lang.clone());
    let mut sizes = BTreeMap::new();
    for x in g.cfg.initial_langs() {
        for y in g.cfg.initial_langs() {
            if x != y {
                sizes.insert(Direction::new(x.clone(), y.clone()), 2000);
            }
        }
    }
    sizes.insert(Direction::new(new.clone(), ENGLISH), 700);
    sizes.insert(Direction::new(ENGLISH, new.clone()), 700);
    let base = make_schedule(&sizes, 1.0, &BTreeMap::new())?;
    let up = upsample_language(&base, &new, factor)?;
    let w: f64 = sizes.iter().filter(|(d, _)| d.involves(&new)).map(|(_, n)| *n as f64).sum::<f64>() / sizes.values().sum::<usize>() as f64;
    let expect = factor * w / (factor * w + 1.0 - w);
    let n = 10_000;
    let mut sampler = up.sampler(10);
    let hits = (0..n).filter(|_| sampler.draw().involves(&new)).count() as f64;
    let sigma = (n as f64 * expect * (1.0 - expect)).sqrt();
    let z = (hits - n as f64 * expect) / sigma;
    Ok(verdict(z.abs() <= 3.0, format!("w = {w:.4}, expected {:.1} of {n}, observed {hits}, z = {z:+.2}", n as f64 * expect)))
}

fn main() {
    let started = Instant::now();
    let mut failed = 0;
    let mut report = |n: usize, title: &str, v: Result<Verdict>| {
        let v = v.unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        if !v.pass {
            failed += 1;
        }
        println!("criterion {n:>2} [{}] {title}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    };
    report(3, "gradient check", criterion_3());
    report(4, "oracle equivalences", criterion_4());

    let cfg = ExperimentConfig::paper_mini();
    let grid = Data::generate(&cfg.data, cfg.seed).and_then(|data| {
        let out = run_experiment(&cfg, &artifacts())?;
        Ok(Grid { cfg, out, data })
    });
    match &grid {
        Ok(g) => {
            report(1, "freeze / no regression", criterion_1(g));
            report(2, "adapter identity", criterion_2(g));
            report(5, "embed-only new source vs bilingual", criterion_5(g));
            report(6, "catastrophic forgetting ordering", criterion_6(g));
            report(7, "back-translation augmentation", criterion_7(g));
            report(8, "composition vs pivot", criterion_8(g));
            report(9, "checkpoint round trip", criterion_9(g));
            report(10, "upsampling counter", criterion_10(g));
        }
        Err(e) => {
            for (n, title) in [(1, "freeze / no regression"), (2, "adapter identity"), (5, "embed-only new source vs bilingual"), (6, "catastrophic forgetting ordering"), (7, "back-translation augmentation"), (8, "composition vs pivot"), (9, "checkpoint round trip"), (10, "upsampling counter")] {
                report(n, title, Err(incnmt::Error::Config(format!("experiment failed: {e}"))));
            }
        }
    }
    println!("acceptance: {} failed, {:.0}s", failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
