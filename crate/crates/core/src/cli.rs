//! Command-line interface: corpus preparation, training, evaluation,
//! embedding export, projection and ad hoc retrieval.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::corpus::{group_size_histogram, read_jsonl, split_corpus, write_jsonl, CorpusRecord};
use crate::data::squad::ingest_squad;
use crate::data::text::SplitterConfig;
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::eval::{encode_texts, evaluate, AnswerIndex};
use crate::model::{pretrained, Checkpoint, Model, ModelConfig, Side, Variant};
use crate::objective::ObjectiveConfig;
use crate::project::project_2d;
use crate::synthetic;
use crate::trainer::{RunOutput, TrainConfig, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "cvae", version, about = "Cross-VAE answer retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build train/dev/test corpora and a vocabulary from SQuAD JSON or corpus JSONL.
    Prepare(PrepareArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Score retrieval on a corpus.
    Evaluate(EvaluateArgs),
    /// Export normalized latent means as CSV.
    Embed(EmbedArgs),
    /// Project embedding CSV rows onto their top two singular directions.
    Project(ProjectArgs),
    /// Rank the answers of a corpus for one question.
    Retrieve(RetrieveArgs),
    /// Write a templated many-to-one corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// SQuAD JSON file (or corpus `.jsonl`); repeat to combine files.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Train, dev and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub split: String,
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    #[arg(long = "min-freq", default_value_t = 1)]
    pub min_freq: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from a `last.ckpt` written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Keep only answers with at least this many questions.
    #[arg(long = "subset-min")]
    pub subset_min: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary file to verify against the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Per-question JSONL of ranks and top-10 candidates.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    Question,
    Answer,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum)]
    pub side: SideArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus JSONL whose distinct answers form the candidate pool.
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub question: String,
    #[arg(long = "top-k", default_value_t = 10)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub groups: usize,
    #[arg(long = "min-questions", default_value_t = 8)]
    pub min_questions: usize,
    #[arg(long = "max-questions", default_value_t = 12)]
    pub max_questions: usize,
}

/// Model section of a run config. `vocab_size` defaults to the vocabulary's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub attention_hops: usize,
    pub attention_dim: usize,
    pub variant: Variant,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    pub vocab: PathBuf,
    pub out_dir: PathBuf,
    /// Optional `token f1 ... fd` table for the embedding layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub paths: PathsSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
}

impl RunConfig {
    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported schema_version {} (expected {SCHEMA_VERSION})",
                path.display(),
                cfg.schema_version
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut cfg.paths;
        for slot in [&mut p.train, &mut p.vocab, &mut p.out_dir] {
            *slot = base.join(&*slot);
        }
        for slot in [&mut p.dev, &mut p.embeddings].into_iter().flatten() {
            *slot = base.join(&*slot);
        }
        Ok(cfg)
    }

    pub fn model_config(&self, vocab: &Vocabulary) -> Result<ModelConfig> {
        let m = &self.model;
        if let Some(v) = m.vocab_size {
            if v != vocab.len() {
                return Err(Error::Config(format!(
                    "model.vocab_size {v} differs from the vocabulary size {}",
                    vocab.len()
                )));
            }
        }
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            latent_dim: m.latent_dim,
            attention_hops: m.attention_hops,
            attention_dim: m.attention_dim,
            variant: m.variant,
            max_len: m.max_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses and runs a command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Embed(a) => cmd_embed(&a),
        Command::Project(a) => cmd_project(&a),
        Command::Retrieve(a) => cmd_retrieve(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn parse_split(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("--split {s:?}: {e}")))?;
    <[f64; 3]>::try_from(parts).map_err(|_| Error::Config(format!("--split {s:?} needs three fractions")))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct SplitSummary {
    pairs: usize,
    answers: usize,
}

#[derive(Serialize)]
struct PrepareSummary {
    total_pairs: usize,
    train: SplitSummary,
    dev: SplitSummary,
    test: SplitSummary,
    vocab_size: usize,
    span_outside_context: usize,
    skipped_other: usize,
    group_size_histogram: BTreeMap<usize, usize>,
}

fn summarize(records: &[CorpusRecord]) -> SplitSummary {
    SplitSummary {
        pairs: records.len(),
        answers: crate::data::corpus::group_sizes(records).len(),
    }
}

pub fn cmd_prepare(a: &PrepareArgs) -> Result<()> {
    let fractions = parse_split(&a.split)?;
    let mut records = Vec::new();
    let (mut outside, mut skipped) = (0, 0);
    for path in &a.input {
        if path.extension().is_some_and(|e| e == "jsonl") {
            records.extend(read_jsonl(path)?);
            continue;
        }
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let out = ingest_squad(&raw, &SplitterConfig::default()).map_err(|e| match e {
            Error::MalformedJson { message, .. } => Error::MalformedJson {
                context: path.display().to_string(),
                message,
            },
            other => other,
        })?;
        outside += out.span_outside_context;
        skipped += out.skipped_other;
        records.extend(out.records);
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let splits = split_corpus(&records, fractions, a.seed)?;
    let vocab = Vocabulary::build(&splits.train, a.min_freq)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_jsonl(&a.out.join("train.jsonl"), &splits.train)?;
    write_jsonl(&a.out.join("dev.jsonl"), &splits.dev)?;
    write_jsonl(&a.out.join("test.jsonl"), &splits.test)?;
    vocab.save(&a.out.join("vocab.json"))?;
    let summary = PrepareSummary {
        total_pairs: records.len(),
        train: summarize(&splits.train),
        dev: summarize(&splits.dev),
        test: summarize(&splits.test),
        vocab_size: vocab.len(),
        span_outside_context: outside,
        skipped_other: skipped,
        group_size_histogram: group_size_histogram(&records),
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    eprintln!(
        "prepared {} pairs: train {} / dev {} / test {}; vocabulary {} ids",
        summary.total_pairs, summary.train.pairs, summary.dev.pairs, summary.test.pairs, summary.vocab_size
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    cfg.train.validate()?;
    let vocab = Vocabulary::load(&cfg.paths.vocab)?;
    let train = read_jsonl(&cfg.paths.train)?;
    let dev = cfg.paths.dev.as_deref().map(read_jsonl).transpose()?;
    let dev = dev.filter(|d| !d.is_empty());
    let model_cfg = cfg.model_config(&vocab)?;
    let mut model = Model::new(model_cfg, cfg.seed)?;
    if let Some(path) = &cfg.paths.embeddings {
        let covered = pretrained::load_into(model.params_mut(), &vocab, path)?;
        log::info!("pretrained embeddings cover {covered} of {} tokens", vocab.tokens().len());
    }
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let output = RunOutput {
        dir: Some(cfg.paths.out_dir.clone()),
    };
    let trainer = Trainer::new(
        &train,
        dev.as_deref(),
        &vocab,
        model,
        cfg.train.clone(),
        cfg.objective.clone(),
        cfg.seed,
        output,
        resume,
    )?;
    let outcome = trainer.run()?;
    let out = &cfg.paths.out_dir;
    eprintln!(
        "trained {} epochs; best epoch {:?}; checkpoints {} and {}",
        outcome.state.epochs_completed,
        outcome.state.best_epoch,
        out.join(BEST_CHECKPOINT).display(),
        out.join(LAST_CHECKPOINT).display()
    );
    if let Some(dev) = &dev {
        let (report, _) = evaluate(&outcome.best_model, &vocab, dev, None)?;
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    }
    Ok(())
}

fn load_checkpoint(path: &Path, vocab: Option<&Path>) -> Result<(Checkpoint, Model<f32>)> {
    let ck = Checkpoint::load(path)?;
    if let Some(v) = vocab {
        ck.check_vocab(&Vocabulary::load(v)?)?;
    }
    let model = ck.model()?;
    Ok((ck, model))
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let (ck, model) = load_checkpoint(&a.checkpoint, a.vocab.as_deref())?;
    let corpus = read_jsonl(&a.corpus)?;
    let (report, results) = evaluate(&model, &ck.vocab, &corpus, a.subset_min)?;
    write_json(&a.out, &report)?;
    if let Some(dump) = &a.dump {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dump).map_err(|e| Error::io(dump, e))?);
        for r in &results {
            let line = serde_json::to_string(r).expect("result serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(dump, e))?;
        }
        f.flush().map_err(|e| Error::io(dump, e))?;
    }
    eprintln!(
        "mrr {:.4}  r@1 {:.4}  r@5 {:.4}  r@10 {:.4}  ({} questions, {} answers)",
        report.mrr,
        report.recall(1),
        report.recall(5),
        report.recall(10),
        report.n_questions,
        report.n_answers
    );
    Ok(())
}

pub fn cmd_embed(a: &EmbedArgs) -> Result<()> {
    let (ck, model) = load_checkpoint(&a.checkpoint, a.vocab.as_deref())?;
    let corpus = read_jsonl(&a.corpus)?;
    let (ids, groups, texts, side): (Vec<&str>, Vec<&str>, Vec<&str>, Side) = match a.side {
        SideArg::Question => (
            corpus.iter().map(|r| r.pair_id.as_str()).collect(),
            corpus.iter().map(|r| r.answer_id.as_str()).collect(),
            corpus.iter().map(|r| r.question.as_str()).collect(),
            Side::Question,
        ),
        SideArg::Answer => {
            let mut seen = std::collections::HashSet::new();
            let uniq: Vec<&CorpusRecord> = corpus.iter().filter(|r| seen.insert(r.answer_id.as_str())).collect();
            (
                uniq.iter().map(|r| r.answer_id.as_str()).collect(),
                uniq.iter().map(|r| r.answer_id.as_str()).collect(),
                uniq.iter().map(|r| r.answer.as_str()).collect(),
                Side::Answer,
            )
        }
    };
    let rows = encode_texts(&model, &ck.vocab, &texts, side)?;
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| csv_err(&a.out, e))?;
    let d = model.config().latent_dim;
    let mut header = vec!["id".to_string(), "answer_id".to_string()];
    header.extend((0..d).map(|k| format!("dim_{k}")));
    w.write_record(&header).map_err(|e| csv_err(&a.out, e))?;
    for ((id, group), row) in ids.iter().zip(&groups).zip(&rows) {
        let mut rec = vec![id.to_string(), group.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(&a.out, e))?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

/// `(id, answer_id)` keys and vectors read from an embedding CSV.
pub type EmbeddingRows = (Vec<(String, String)>, Vec<Vec<f64>>);

/// Reads an `id,answer_id,dim_0,...` CSV.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingRows> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut keys = Vec::new();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() < 3 {
            return Err(Error::Config(format!("{}: row {} has no vector", path.display(), i + 1)));
        }
        let v = rec
            .iter()
            .skip(2)
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        keys.push((rec[0].to_string(), rec[1].to_string()));
        rows.push(v);
    }
    Ok((keys, rows))
}

pub fn cmd_project(a: &ProjectArgs) -> Result<()> {
    let (keys, rows) = read_embeddings(&a.embeddings)?;
    let p = project_2d(&rows)?;
    if p.degenerate {
        eprintln!("warning: embeddings have rank below 2 after centering; missing coordinates are 0");
    }
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| csv_err(&a.out, e))?;
    w.write_record(["id", "answer_id", "x", "y"]).map_err(|e| csv_err(&a.out, e))?;
    for ((id, group), [x, y]) in keys.iter().zip(&p.coords) {
        w.write_record([id.as_str(), group.as_str(), &x.to_string(), &y.to_string()])
            .map_err(|e| csv_err(&a.out, e))?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))
}

#[derive(Serialize)]
struct Hit<'a> {
    rank: usize,
    answer_id: &'a str,
    score: f64,
    answer: &'a str,
}

pub fn cmd_retrieve(a: &RetrieveArgs) -> Result<()> {
    if a.top_k == 0 {
        return Err(Error::Config("--top-k must be at least 1".into()));
    }
    let (ck, model) = load_checkpoint(&a.checkpoint, None)?;
    let corpus = read_jsonl(&a.index)?;
    let index = AnswerIndex::build(&model, &ck.vocab, &corpus)?;
    let q = encode_texts(&model, &ck.vocab, &[a.question.as_str()], Side::Question)?;
    let hits: Vec<Hit> = index
        .ranking(&q[0])
        .into_iter()
        .take(a.top_k)
        .enumerate()
        .map(|(r, (i, score))| Hit {
            rank: r + 1,
            answer_id: &index.answer_ids[i],
            score,
            answer: &index.texts[i],
        })
        .collect();
    for h in &hits {
        eprintln!("{:>3}  {:+.4}  {}  {}", h.rank, h.score, h.answer_id, h.answer);
    }
    println!("{}", serde_json::to_string_pretty(&hits).expect("hits serialize"));
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if a.min_questions == 0 || a.min_questions > a.max_questions {
        return Err(Error::Config("--min-questions must be in 1..=--max-questions".into()));
    }
    let recs = synthetic::generate(a.seed, a.groups, a.min_questions, a.max_questions);
    write_jsonl(&a.out, &recs)
}
