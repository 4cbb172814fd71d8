use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use incnmt::composition::{compose, load_model, load_pack, save_model};
use incnmt::evaluation::{bleu, chrf};
use incnmt::harness::{
    artifacts_root, build_vocab, report, run_experiment, run_incremental, train_base, Data, ExperimentConfig,
    Pivot, RunKind, Split,
};
use incnmt::inference::{DecodeConfig, Translator};

#[derive(Parser)]
#[command(name = "incnmt", version, about = "Incremental multilingual NMT at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML), or `paper-mini` for the bundled grid.
    #[arg(long, default_value = "paper-mini")]
    config: String,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        if self.config == "paper-mini" {
            return Ok(ExperimentConfig::paper_mini());
        }
        ExperimentConfig::load(Path::new(&self.config)).with_context(|| format!("loading {}", self.config))
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Base model directory written by `train-base`.
    #[arg(long)]
    base: PathBuf,
    /// Name of the run entry in the config.
    #[arg(long)]
    run: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the run's step budget.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cipher corpus as plain parallel text.
    MakeData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train BPE and build a vocabulary over some languages of the corpus.
    BuildVocab {
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated languages whose training text feeds BPE.
        #[arg(long, value_delimiter = ',')]
        langs: Vec<String>,
        /// Comma-separated language codes to reserve.
        #[arg(long, value_delimiter = ',')]
        tags: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage base training on the initial languages.
    TrainBase {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add a source language (a `new_source` run of the config).
    AddSource(RunArgs),
    /// Add a target language (a `new_target` run of the config).
    AddTarget(RunArgs),
    /// Train a `retrain` or `bilingual` baseline run of the config.
    RetrainBaseline(RunArgs),
    /// Combine a base model with a source and/or a target pack.
    Compose {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        src_pack: Option<PathBuf>,
        #[arg(long)]
        tgt_pack: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Translate standard input line by line.
    Translate {
        #[arg(long)]
        model: PathBuf,
        /// Target language.
        #[arg(long)]
        to: String,
        /// Pivot through English: `--model` goes X->en, this model en->Y.
        #[arg(long)]
        then: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score a hypothesis file against a reference file.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Run a full experiment config with caching under the artifacts root.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        /// Defaults to $INCNMT_ARTIFACTS or ./artifacts.
        #[arg(long)]
        artifacts: Option<PathBuf>,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Render the comparison tables of an experiment directory.
    Report {
        dir: PathBuf,
    },
}

fn lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?.lines().map(str::to_string).collect())
}

fn incremental(args: RunArgs, allowed: &[RunKind]) -> Result<()> {
    let cfg = args.config.load()?;
    let mut run = cfg.run(&args.run)?.clone();
    if !allowed.contains(&run.kind) {
        bail!("run {} is a {:?} run", run.name, run.kind);
    }
    if let Some(s) = args.steps {
        run.opt.max_steps = s;
    }
    let seed = args.seed.unwrap_or_else(|| cfg.seeds(&run)[0]);
    let data = Data::generate(&cfg.data, cfg.seed)?;
    let base = load_model(&args.base.join("model")).or_else(|_| load_model(&args.base))?.with_decode(cfg.decode.clone());
    fs::create_dir_all(&args.out)?;
    let result = run_incremental(&cfg, &data, &base, &run, seed, &args.out)?;
    println!("{}", format_scores(&result.scores)?);
    Ok(())
}

fn format_scores(scores: &incnmt::harness::Scores) -> Result<String> {
    let mut out = String::new();
    for (metric, s) in scores {
        for (d, v) in s {
            out.push_str(&format!("{metric}.{d} = {v:.2}\n"));
        }
    }
    Ok(out.trim_end().to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::MakeData { config, out } => {
            let cfg = config.load()?;
            Data::generate(&cfg.data, cfg.seed)?.save(&out)?;
        }
        Command::BuildVocab { config, langs, tags, out } => {
            let cfg = config.load()?;
            let data = Data::generate(&cfg.data, cfg.seed)?;
            let mut corpora = BTreeMap::new();
            for l in &langs {
                corpora.insert(l.clone(), data.mono(l, Split::Train, None)?);
            }
            let v = build_vocab(&cfg.data, &corpora, &tags, cfg.seed)?;
            fs::create_dir_all(&out)?;
            v.save(&out, "vocab")?;
            println!("{} tokens", v.len());
        }
        Command::TrainBase { config, out } => {
            let cfg = config.load()?;
            let data = Data::generate(&cfg.data, cfg.seed)?;
            fs::create_dir_all(&out)?;
            let r = train_base(&cfg, &data, &out)?;
            println!("{}", format_scores(&r.scores)?);
        }
        Command::AddSource(a) => incremental(a, &[RunKind::NewSource])?,
        Command::AddTarget(a) => incremental(a, &[RunKind::NewTarget])?,
        Command::RetrainBaseline(a) => incremental(a, &[RunKind::Retrain, RunKind::Bilingual])?,
        Command::Compose { base, src_pack, tgt_pack, out } => {
            let base = load_model(&base)?;
            let sp = src_pack.as_deref().map(load_pack).transpose()?;
            let tp = tgt_pack.as_deref().map(load_pack).transpose()?;
            let m = compose(&base, sp.as_ref(), tp.as_ref())?;
            save_model(&out, &m)?;
        }
        Command::Translate { model, to, then, beam } => {
            let set_beam = |m: incnmt::inference::TranslationModel| match beam {
                Some(b) => {
                    let d = DecodeConfig { beam_size: b, ..m.decode.clone() };
                    m.with_decode(d)
                }
                None => m,
            };
            let first = set_beam(load_model(&model)?);
            let second = then.as_deref().map(load_model).transpose()?.map(set_beam);
            let pivot = second.as_ref().map(|s| Pivot { first: &first, second: s });
            let tr: &dyn Translator = match &pivot {
                Some(p) => p,
                None => &first,
            };
            let stdout = io::stdout();
            let mut out = stdout.lock();
            for line in io::stdin().lock().lines() {
                writeln!(out, "{}", tr.translate(&line?, &to)?)?;
            }
        }
        Command::Evaluate { hyp, reference } => {
            let (h, r) = (lines(&hyp)?, lines(&reference)?);
            println!("chrf = {:.4}\nbleu = {:.4}", chrf(&h, &r)?, bleu(&h, &r)?);
        }
        Command::Run { config, artifacts, print_config } => {
            let cfg = config.load()?;
            if print_config {
                print!("{}", cfg.to_toml()?);
                return Ok(());
            }
            let root = artifacts.unwrap_or_else(artifacts_root);
            let outcome = run_experiment(&cfg, &root)?;
            print!("{}", outcome.report);
        }
        Command::Report { dir } => print!("{}", report(&dir)?),
    }
    Ok(())
}
