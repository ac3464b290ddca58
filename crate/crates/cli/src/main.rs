//! `mmkp`: train, evaluate and run cross-media keyphrase models.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mmkp_core::data::{
    build_vocab, encode_post, filter_rare_keyphrases, load_dataset, synth_corpus, write_dataset,
    LoadOptions, Mode, Post, VisualShape, Vocabulary,
};
use mmkp_core::eval::{evaluate, export_attention, predict_all, DecodeOptions, EvalReport, PostResult};
use mmkp_core::train::{checkpoint, fit, Split};
use mmkp_core::{Model, RunConfig};

const CHECKPOINT: &str = "model.ckpt";
const VOCAB: &str = "vocab.json";
const CONFIG: &str = "config.toml";
const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Parser)]
#[command(name = "mmkp", version, about = "Cross-media keyphrase prediction")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Write ranked keyphrases for every post.
    Predict(PredictArgs),
    /// Dump co-attention weights for every post.
    ExportAttn(ExportArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with [model], [data], [train] and [eval] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Run directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Visual feature sidecar for the training file.
    #[arg(long)]
    train_visual: Option<PathBuf>,
    /// Visual feature sidecar for the validation file.
    #[arg(long)]
    val_visual: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long)]
    data: PathBuf,
    /// Visual feature sidecar for the data file.
    #[arg(long)]
    visual: Option<PathBuf>,
    /// Report path; defaults to eval_report.json in the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    visual: Option<PathBuf>,
    /// Predictions file, one JSON object per line.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    ckpt: CheckpointArgs,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    visual: Option<PathBuf>,
    /// Output file, one JSON object per post.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    /// Number of filler words.
    #[arg(long, default_value_t = 30)]
    vocab: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::ExportAttn(a) => cmd_export_attn(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_config(path: &Path, cfg: &RunConfig) -> Result<()> {
    let text = toml::to_string(cfg).context("serializing config")?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Config echo written beside an output file.
fn config_echo_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".config.toml");
    out.with_file_name(name)
}

fn load_posts(path: &Path, visual: Option<&Path>, cfg: &RunConfig) -> Result<Vec<Post>> {
    let opts = LoadOptions {
        visual: cfg.data.visual_rows.map(|rows| VisualShape {
            rows,
            dim: cfg.model.visual_dim,
        }),
        sidecar: visual,
    };
    load_dataset(path, &opts).with_context(|| format!("loading {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.max_epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    cfg.validate()?;

    let train_posts = load_posts(&a.train, a.train_visual.as_deref(), &cfg)?;
    let train_posts = filter_rare_keyphrases(train_posts, cfg.data.min_keyphrase_count);
    ensure!(!train_posts.is_empty(), "{}: no usable training posts", a.train.display());
    let val_posts = load_posts(&a.val, a.val_visual.as_deref(), &cfg)?;
    let vocab = build_vocab(&train_posts, cfg.data.gen_cap, cfg.data.min_count)?;
    log::info!(
        "{} train posts, {} val posts, |gen| {}, |cls| {}",
        train_posts.len(),
        val_posts.len(),
        vocab.gen.len(),
        vocab.cls.len()
    );
    let train = Split::build(&train_posts, &vocab, Mode::Train)?;
    let val = Split::build(&val_posts, &vocab, Mode::Eval)?;

    let mut model = Model::<f32>::new(cfg.model.clone(), vocab.gen.len(), vocab.cls.len(), cfg.train.seed)?;
    if let Some(path) = &cfg.data.embeddings {
        let n = model.load_embeddings(path, &vocab)?;
        log::info!("loaded {n} pretrained embeddings");
    }

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_config(&a.out.join(CONFIG), &cfg)?;
    vocab.save(&a.out.join(VOCAB))?;
    let log_path = a.out.join(TRAIN_LOG);
    let mut log_file = BufWriter::new(fs::File::create(&log_path)?);
    let mut write_err = None;
    let outcome = fit(model, &train, &val, &vocab, &cfg.train, |e| {
        let res = serde_json::to_writer(&mut log_file, e)
            .map_err(anyhow::Error::from)
            .and_then(|_| Ok(log_file.write_all(b"\n").and_then(|_| log_file.flush())?));
        if let Err(err) = res {
            write_err.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_err {
        return Err(err.context(format!("writing {}", log_path.display())));
    }
    checkpoint::save(&a.out.join(CHECKPOINT), &outcome.best, &vocab)?;
    eprintln!(
        "trained {} epochs, best epoch {}; wrote {}",
        outcome.log.len(),
        outcome.best_epoch,
        a.out.display()
    );
    Ok(())
}

/// A trained model with the vocabulary and config of its run directory.
struct Run {
    model: Model<f32>,
    vocab: Vocabulary,
    cfg: RunConfig,
}

fn open_run(path: &Path) -> Result<Run> {
    let (dir, ckpt) = if path.is_dir() {
        (path.to_path_buf(), path.join(CHECKPOINT))
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (dir, path.to_path_buf())
    };
    let cfg = read_config(&dir.join(CONFIG))?;
    cfg.validate()?;
    let vocab = Vocabulary::load(&dir.join(VOCAB)).with_context(|| format!("reading vocabulary in {}", dir.display()))?;
    let model = checkpoint::load(&ckpt, cfg.model.clone(), &vocab)
        .with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(Run { model, vocab, cfg })
}

fn decode_options(cfg: &RunConfig, beam: Option<usize>, topk: Option<usize>) -> Result<DecodeOptions> {
    let opts = DecodeOptions {
        beam: beam.unwrap_or(cfg.eval.beam),
        top_k: topk.unwrap_or(cfg.eval.top_k),
        max_len: cfg.model.max_decode_len,
        agg: cfg.eval.aggregation()?,
    };
    ensure!(opts.beam > 0 && opts.top_k > 0, "--beam and --topk must be positive");
    Ok(opts)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    report: &'a EvalReport,
    config: &'a RunConfig,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut run = open_run(&a.ckpt.checkpoint)?;
    let opts = decode_options(&run.cfg, a.beam, a.topk)?;
    run.cfg.eval.beam = opts.beam;
    run.cfg.eval.top_k = opts.top_k;
    let posts = load_posts(&a.data, a.visual.as_deref(), &run.cfg)?;
    if posts.is_empty() {
        bail!("{}: no posts to evaluate", a.data.display());
    }
    let encoded = posts
        .iter()
        .map(|p| encode_post(p, &run.vocab))
        .collect::<mmkp_core::Result<Vec<_>>>()?;
    let preds = predict_all(&run.model, &run.vocab, &encoded, opts)?;
    let results: Vec<PostResult> = preds
        .into_iter()
        .zip(&posts)
        .map(|(pr, p)| PostResult {
            id: p.id.clone(),
            predictions: pr.keyphrases,
            golds: p.keyphrases.clone(),
            text: p.text.clone(),
        })
        .collect();
    let report = evaluate(&results, |k| run.vocab.cls.count(k))?;
    let out = a.out.unwrap_or_else(|| run_dir(&a.ckpt.checkpoint).join("eval_report.json"));
    let file = ReportFile {
        report: &report,
        config: &run.cfg,
    };
    let json = serde_json::to_string_pretty(&file)?;
    fs::write(&out, json + "\n").with_context(|| format!("writing {}", out.display()))?;
    let table = report.table();
    fs::write(out.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn run_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let mut run = open_run(&a.ckpt.checkpoint)?;
    let opts = decode_options(&run.cfg, a.beam, a.topk)?;
    run.cfg.eval.beam = opts.beam;
    run.cfg.eval.top_k = opts.top_k;
    let posts = load_posts(&a.input, a.visual.as_deref(), &run.cfg)?;
    let encoded = posts
        .iter()
        .map(|p| encode_post(p, &run.vocab))
        .collect::<mmkp_core::Result<Vec<_>>>()?;
    let preds = predict_all(&run.model, &run.vocab, &encoded, opts)?;
    write_lines(&a.out, &preds)?;
    write_config(&config_echo_path(&a.out), &run.cfg)
}

fn cmd_export_attn(a: ExportArgs) -> Result<()> {
    let run = open_run(&a.ckpt.checkpoint)?;
    let posts = load_posts(&a.input, a.visual.as_deref(), &run.cfg)?;
    let exports = posts
        .iter()
        .map(|p| export_attention(&run.model, &encode_post(p, &run.vocab)?))
        .collect::<mmkp_core::Result<Vec<_>>>()?;
    write_lines(&a.out, &exports)?;
    write_config(&config_echo_path(&a.out), &run.cfg)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let posts = synth_corpus(a.n, a.vocab, a.seed)?;
    write_dataset(&a.out, &posts).with_context(|| format!("writing {}", a.out.display()))
}
