//! `tgm`: corpus generation, topic mining, training, captioning, evaluation
//! and sweeps from the command line.
//!
//! Every command takes an optional TOML config file plus trailing
//! `key=value` overrides and writes its artifacts under `--out`.

mod gradcheck;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tgm_core::checkpoint::Checkpoint;
use tgm_core::config::{apply_overrides, TrainConfig};
use tgm_core::corpus::{
    generate_synthetic_corpus, load_corpus, save_corpus, Corpus, GeneratorConfig, Split,
    VideoRecord,
};
use tgm_core::inference::{evaluate_captions, CaptionLine, CaptionMode, DecodeOptions};
use tgm_core::metrics::EvalReport;
use tgm_core::topic_mining::{load_topics, mine_topics, save_topics, MinedTopics};
use tgm_core::trainer::{sweep_lambda, train, StageSummary, TrainOutput, Variant};

#[derive(Parser)]
#[command(name = "tgm", version, about = "Topic-guided video captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenCorpus(GenCorpusArgs),
    /// Mine latent topics from a corpus's training split.
    MineTopics(MineArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Caption a corpus split with a trained checkpoint.
    Caption(CaptionArgs),
    /// Caption a split and score it against the references.
    Evaluate(CaptionArgs),
    /// Train one model per value of K or λ.
    Sweep(SweepArgs),
    /// Check analytic gradients against finite differences on small random
    /// models (K 3, hidden 8, factors 4 unless overridden).
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct Overrides {
    /// TOML config file; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` config overrides.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Overrides {
    fn train_config(&self) -> Result<TrainConfig> {
        self.train_config_or(TrainConfig::default())
    }

    fn train_config_or(&self, default: TrainConfig) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => {
                TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?
            }
            None => default,
        };
        let cfg = base.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenCorpusArgs {
    /// TOML generator settings.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output corpus JSONL.
    #[arg(long)]
    out: PathBuf,
    /// `key=value` generator overrides.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Vanilla,
    Tgm,
    MmTgm,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Vanilla => Variant::Vanilla,
            VariantArg::Tgm => Variant::Tgm,
            VariantArg::MmTgm => Variant::MmTgm,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    variant: VariantArg,
    #[arg(long)]
    corpus: PathBuf,
    /// Mined topics; mined from the corpus when absent.
    #[arg(long)]
    topics: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Vanilla,
    Predicted,
    Assigned,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Defaults to vanilla for vanilla checkpoints, predicted otherwise.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Topic index for assigned mode; implies `--mode assigned`.
    #[arg(long)]
    assign_topic: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SweepParam {
    K,
    Lambda,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    param: SweepParam,
    #[arg(long)]
    corpus: PathBuf,
    /// Values of K to try (K sweeps only).
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 3, 4, 5, 6, 7, 8])]
    values: Vec<usize>,
    #[arg(long, value_enum, default_value = "mm-tgm")]
    variant: VariantArg,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: Overrides,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    vocab_size: usize,
    #[arg(long, default_value_t = 6)]
    feature_dim: usize,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: Overrides,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::MineTopics(a) => mine(a),
        Command::Train(a) => train_cmd(a),
        Command::Caption(a) => caption_cmd(a, false),
        Command::Evaluate(a) => caption_cmd(a, true),
        Command::Sweep(a) => sweep_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let base = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => GeneratorConfig::default(),
    };
    let gen: GeneratorConfig = apply_overrides(&base, &a.overrides)?;
    let corpus = generate_synthetic_corpus(&gen, a.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_corpus(&corpus, &a.out)?;
    println!(
        "wrote {} records, vocabulary {} to {}",
        corpus.records.len(),
        corpus.vocabulary.len(),
        a.out.display()
    );
    Ok(())
}

fn mine(a: MineArgs) -> Result<()> {
    let cfg = a.cfg.train_config()?;
    let corpus = read_corpus(&a.corpus)?;
    let topics = mine_topics(&corpus, &cfg.mining())?;
    create_dir(&a.out)?;
    save_topics(&topics, a.out.join("topics.jsonl"))?;
    println!(
        "mined K = {} topics over {} records, objective {:.6}",
        topics.assignment.k,
        topics.ids.len(),
        topics.objective
    );
    Ok(())
}

fn topics_for(
    variant: Variant,
    corpus: &Corpus,
    path: Option<&Path>,
    cfg: &TrainConfig,
) -> Result<Option<MinedTopics>> {
    if variant == Variant::Vanilla {
        return Ok(None);
    }
    let topics = match path {
        Some(p) => load_topics(p).with_context(|| format!("loading topics {}", p.display()))?,
        None => mine_topics(corpus, &cfg.mining())?,
    };
    if topics.assignment.k != cfg.k {
        bail!(
            "topics file has K = {} but the config has k = {}",
            topics.assignment.k,
            cfg.k
        );
    }
    Ok(Some(topics))
}

#[derive(Serialize)]
struct RunSummary<'a> {
    variant: String,
    seed: u64,
    stage: u8,
    stages: &'a [StageSummary],
}

fn write_run(out: &TrainOutput, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    out.checkpoint.save(dir.join("model.ckpt"))?;
    out.write_history(dir.join("history.jsonl"))?;
    out.write_timing(dir.join("timing.jsonl"))?;
    fs::write(
        dir.join("config.toml"),
        out.checkpoint.config.to_toml_string(),
    )?;
    write_json(
        &RunSummary {
            variant: out.checkpoint.variant.to_string(),
            seed: out.checkpoint.seed,
            stage: out.checkpoint.stage,
            stages: &out.stages,
        },
        &dir.join("summary.json"),
    )
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.train_config()?;
    let variant = Variant::from(a.variant);
    let corpus = read_corpus(&a.corpus)?;
    let topics = topics_for(variant, &corpus, a.topics.as_deref(), &cfg)?;
    let out = train(&corpus, topics.as_ref(), &cfg, variant)?;
    write_run(&out, &a.out)?;
    if let Some(t) = &topics {
        save_topics(t, a.out.join("topics.jsonl"))?;
    }
    for s in &out.stages {
        println!(
            "stage {}: {} epochs, best epoch {}, val BLEU-4 {}",
            s.stage,
            s.epochs_run,
            s.best_epoch,
            s.best_val_bleu4
                .map_or("-".to_string(), |b| format!("{b:.4}"))
        );
    }
    Ok(())
}

fn caption_cmd(a: CaptionArgs, score: bool) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let corpus = read_corpus(&a.corpus)?;
    if corpus.input_dim() != ckpt.feature_dim() {
        bail!(
            "checkpoint expects {}-dimensional features but the corpus has {}",
            ckpt.feature_dim(),
            corpus.input_dim()
        );
    }
    let mode = match (a.mode, a.assign_topic) {
        (Some(ModeArg::Vanilla), None) => CaptionMode::Vanilla,
        (Some(ModeArg::Predicted), None) => CaptionMode::Predicted,
        (Some(ModeArg::Assigned) | None, Some(k)) => CaptionMode::assign_topic(k, ckpt.config.k)?,
        (Some(ModeArg::Assigned), None) => bail!("--mode assigned needs --assign-topic"),
        (Some(_), Some(_)) => bail!("--assign-topic only applies to assigned mode"),
        (None, None) if ckpt.variant == Variant::Vanilla => CaptionMode::Vanilla,
        (None, None) => CaptionMode::Predicted,
    };
    let opts = DecodeOptions {
        beam_width: a.beam_width.unwrap_or(ckpt.config.beam_width),
        max_len: a.max_len.unwrap_or(ckpt.config.max_len),
        length_normalize: ckpt.config.length_normalize,
    };
    let records: Vec<&VideoRecord> = corpus.split(a.split.into()).collect();
    if records.is_empty() {
        bail!(
            "split {} of {} is empty",
            Split::from(a.split),
            a.corpus.display()
        );
    }
    let captions = ckpt.model.caption_all(&records, &mode, &opts)?;
    create_dir(&a.out)?;
    let mut lines = String::new();
    for (r, c) in records.iter().zip(&captions) {
        lines.push_str(&serde_json::to_string(&CaptionLine::new(
            &r.id,
            &mode,
            c,
            &ckpt.vocabulary,
        ))?);
        lines.push('\n');
    }
    fs::write(a.out.join("captions.jsonl"), lines)?;
    if score {
        let report: EvalReport = evaluate_captions(&ckpt.vocabulary, &records, &captions)?;
        write_json(&report, &a.out.join("report.json"))?;
        println!(
            "BLEU-4 {:.4}  ROUGE-L {:.4}  CIDEr {:.4}  ({} records)",
            report.bleu4,
            report.rouge_l,
            report.cider,
            records.len()
        );
    } else {
        println!(
            "captioned {} records in {} mode",
            records.len(),
            mode.name()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepLine {
    param: &'static str,
    value: f64,
    lambda: f64,
    k: usize,
    best_val_bleu4: Option<f64>,
    dir: String,
}

fn sweep_line(param: &'static str, value: f64, out: &TrainOutput, dir: &str) -> SweepLine {
    SweepLine {
        param,
        value,
        lambda: out.checkpoint.config.lambda,
        k: out.checkpoint.config.k,
        best_val_bleu4: out.stages.last().and_then(|s| s.best_val_bleu4),
        dir: dir.to_string(),
    }
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let cfg = a.cfg.train_config()?;
    let corpus = read_corpus(&a.corpus)?;
    create_dir(&a.out)?;
    let mut lines = Vec::new();
    match a.param {
        SweepParam::Lambda => {
            let topics = mine_topics(&corpus, &cfg.mining())?;
            for run in sweep_lambda(&corpus, &topics, &cfg)? {
                let name = format!("ratio-{:.1}", run.ratio);
                write_run(&run.output, &a.out.join(&name))?;
                lines.push(sweep_line("lambda", run.ratio, &run.output, &name));
            }
        }
        SweepParam::K => {
            let variant = Variant::from(a.variant);
            for &k in &a.values {
                let run_cfg = TrainConfig { k, ..cfg.clone() };
                run_cfg.validate()?;
                let topics = topics_for(variant, &corpus, None, &run_cfg)?;
                let out = train(&corpus, topics.as_ref(), &run_cfg, variant)?;
                let name = format!("k-{k}");
                write_run(&out, &a.out.join(&name))?;
                lines.push(sweep_line("k", k as f64, &out, &name));
            }
        }
    }
    let mut text = String::new();
    for l in &lines {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
        println!(
            "{} = {}: best val BLEU-4 {}",
            l.param,
            l.value,
            l.best_val_bleu4
                .map_or("-".to_string(), |b| format!("{b:.4}"))
        );
    }
    fs::write(a.out.join("sweep.jsonl"), text)?;
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<()> {
    let cfg = a.cfg.train_config_or(TrainConfig {
        k: 3,
        hidden_size: 8,
        factors: 4,
        predictor_hidden: 8,
        ..TrainConfig::default()
    })?;
    let report = gradcheck::run(&cfg, a.vocab_size, a.feature_dim, a.eps)?;
    for (name, err) in &report.errors {
        println!("{name:<24} max rel err {err:.3e}");
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_json(&report, &dir.join("grad-check.json"))?;
    }
    let worst = report.worst();
    if worst >= a.tolerance {
        bail!(
            "max relative error {worst:.3e} exceeds tolerance {:.1e}",
            a.tolerance
        );
    }
    Ok(())
}
