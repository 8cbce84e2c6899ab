//! `fastqa` command-line driver.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use fastqa::checks::{check_fusion, check_model_loss, check_primitives};
use fastqa::eval::{diff_systems, evaluate, EvalResult};
use fastqa::synth::{write_synth, SynthConfig};
use fastqa::text::{load_embeddings, load_examples, Cache, CharVocab, TokenMode, TokenizedExample, CACHE_VERSION};
use fastqa::train::checkpoint::write_atomic;
use fastqa::train::{predict_dataset, prepare_training, Checkpoint, Dataset, TrainConfig, Trainer};
use fastqa::{Model, ModelKind};

#[derive(Parser, Debug)]
#[command(name = "fastqa", version, about = "Extractive question answering: BoW baseline, FastQA and FastQAExt")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tokenize and align a SQuAD JSON or NewsQA CSV file into a cache
    Preprocess(PreprocessArgs),
    /// Train a model; writes checkpoints, metrics.jsonl and model.ckpt
    Train(TrainArgs),
    /// Write a SQuAD-style predictions JSON
    Predict(PredictArgs),
    /// Score predictions against gold answers
    Evaluate(EvaluateArgs),
    /// Check analytic gradients against central differences
    Gradcheck(GradcheckArgs),
    /// Compare two prediction files question by question
    Diff(DiffArgs),
    /// Emit the synthetic toy dataset
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "fastqa")]
    model: ModelKind,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "fastqa")]
    model: ModelKind,
    /// Directory holding train.json, dev.json and embeddings.txt
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_context: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mini-batches between checkpoints; 0 checkpoints once per epoch
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    beam_k: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Stop after this many seconds of training
    #[arg(long)]
    max_seconds: Option<f64>,
    /// Disable the character CNN
    #[arg(long)]
    no_char_cnn: bool,
    /// Zero both word-in-question features
    #[arg(long)]
    no_wiq: bool,
    /// Continue from <out>/last.ckpt
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// SQuAD JSON, NewsQA CSV or preprocess cache
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam_k: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// Write {exact_match, f1} here as well
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-question CSV report
    #[arg(long)]
    per_question: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value = "fastqa")]
    model: ModelKind,
    #[arg(long, default_value_t = 7)]
    n: usize,
    #[arg(long, default_value_t = 11)]
    context_len: usize,
    #[arg(long, default_value_t = 5)]
    question_len: usize,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
}

#[derive(Args, Debug)]
struct DiffArgs {
    #[arg(long)]
    pred_a: PathBuf,
    #[arg(long)]
    pred_b: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    train_size: usize,
    #[arg(long, default_value_t = 500)]
    dev_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Removes the listed paths unless disarmed; keeps failed runs from leaving
/// partial outputs behind.
struct Cleanup(Vec<PathBuf>);

impl Cleanup {
    fn disarm(mut self) {
        self.0.clear();
    }
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        for p in &self.0 {
            let _ = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

/// `<stem>.config.json` next to an output file.
fn snapshot_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.config.json"))
}

fn read_predictions(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a JSON map id -> answer", path.display()))
}

fn gold_answers(path: &Path) -> Result<(HashMap<String, Vec<String>>, HashMap<String, String>)> {
    let (examples, _) = load_examples(path, TokenMode::FastQa)?;
    let golds = examples.iter().map(|e| (e.id.clone(), e.raw_answers.clone())).collect();
    let questions = examples.iter().map(|e| (e.id.clone(), e.question.clone())).collect();
    Ok((golds, questions))
}

fn preprocess(args: PreprocessArgs) -> Result<()> {
    let mode = args.model.token_mode();
    let (examples, stats) = load_examples(&args.data, mode)?;
    log::info!(
        "{} examples, {} answers, {} unalignable, {} without a span",
        stats.examples,
        stats.answers,
        stats.unalignable_answers,
        stats.unanswerable_examples
    );
    let cache = Cache {
        version: CACHE_VERSION,
        mode,
        stats,
        examples,
    };
    write_atomic(&args.out, serde_json::to_string(&cache)?.as_bytes())?;
    write_json(
        &snapshot_path(&args.out),
        &json!({"command": "preprocess", "data": args.data, "model": args.model.name(), "token_mode": mode}),
    )?;
    Ok(())
}

fn resolve_train_config(args: &TrainArgs) -> TrainConfig {
    let mut cfg = TrainConfig::new(args.model);
    cfg.seed = args.seed;
    if let Some(n) = args.n {
        cfg.model.n = n;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.dropout {
        cfg.dropout = v;
    }
    if let Some(v) = args.max_context {
        cfg.max_context = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = (v > 0).then_some(v);
    }
    if let Some(v) = args.beam_k {
        cfg.beam_k = v;
    }
    if let Some(v) = args.max_epochs {
        cfg.max_epochs = v;
    }
    cfg.max_steps = args.max_steps.or(cfg.max_steps);
    if let Some(v) = args.patience {
        cfg.patience = v;
    }
    cfg.max_seconds = args.max_seconds;
    if args.no_char_cnn {
        cfg.model.char_cnn = None;
    }
    if args.no_wiq {
        cfg.model.use_wiq_b = false;
        cfg.model.use_wiq_w = false;
    }
    cfg
}

fn train(args: TrainArgs) -> Result<()> {
    let pick = |explicit: &Option<PathBuf>, name: &str| -> Result<PathBuf> {
        match (explicit, &args.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(name)),
            (None, None) => bail!("need --data DIR or --{}", name.trim_end_matches(".json").trim_end_matches(".txt")),
        }
    };
    let train_path = pick(&args.train, "train.json")?;
    let dev_path = pick(&args.dev, "dev.json")?;
    let emb_path = pick(&args.embeddings, "embeddings.txt")?;
    let cfg = resolve_train_config(&args);
    if !(0.0..1.0).contains(&cfg.dropout) {
        bail!("--dropout must lie in [0, 1)");
    }
    if cfg.beam_k == 0 {
        bail!("--beam-k must be at least 1");
    }

    let kind = cfg.model.kind;
    let emb = load_embeddings(&emb_path, None)?;
    let (train_raw, _) = load_examples(&train_path, kind.token_mode())?;
    let (dev_raw, _) = load_examples(&dev_path, kind.token_mode())?;
    let (train_ex, prep) = prepare_training(&train_raw, &cfg);
    log::info!(
        "training on {} of {} examples ({} without gold, {} lost to cutting, {} too long)",
        prep.kept,
        train_raw.len(),
        prep.without_gold,
        prep.cut_dropped,
        prep.too_long
    );

    let fresh_dir = !args.out.exists();
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let guard = Cleanup(if fresh_dir { vec![args.out.clone()] } else { Vec::new() });

    let last = args.out.join("last.ckpt");
    let mut trainer = if args.resume && last.exists() {
        let ckpt = Checkpoint::load(&last)?;
        ckpt.check_vocab(&emb.vocab.fingerprint())?;
        let chars = ckpt.char_vocab.clone();
        let train = Dataset::new(train_ex, &emb.vocab, &chars, kind);
        let best = args.out.join("best.ckpt");
        let mut t = Trainer::resume(ckpt, emb.matrix.clone(), train.features)?;
        // the model and optimiser settings come from the checkpoint; only the budget is new
        t.config.max_steps = cfg.max_steps;
        t.config.max_epochs = cfg.max_epochs;
        t.config.max_seconds = cfg.max_seconds;
        t.config.patience = cfg.patience;
        if best.exists() {
            t = t.with_best_params(Checkpoint::load(&best)?.params);
        }
        log::info!("resuming at step {}", t.state.step);
        t
    } else {
        let mut chars = CharVocab::ascii();
        chars.extend_from(train_ex.iter().flat_map(|e| e.context_tokens.iter().chain(&e.question_tokens)).map(String::as_str));
        let train = Dataset::new(train_ex, &emb.vocab, &chars, kind);
        let model = Model::new(cfg.model.clone(), emb.matrix.clone(), chars.len(), cfg.seed)?;
        let _ = fs::remove_file(args.out.join("metrics.jsonl"));
        Trainer::new(cfg.clone(), model, train.features, emb.vocab.fingerprint(), chars)?
    };
    let dev = Dataset::new(dev_raw, &emb.vocab, &trainer.char_vocab, kind);
    write_json(
        &args.out.join("config.json"),
        &json!({
            "command": "train",
            "train": train_path,
            "dev": dev_path,
            "embeddings": emb_path,
            "config": trainer.config,
            "resume": args.resume,
        }),
    )?;
    trainer = trainer.with_output(&args.out);
    let summary = trainer.run(&dev)?;
    trainer.checkpoint().save(&args.out.join("model.ckpt"))?;
    write_json(&args.out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    guard.disarm();
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    if args.beam_k == 0 {
        bail!("--beam-k must be at least 1");
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let emb = load_embeddings(&args.embeddings, None)?;
    ckpt.check_vocab(&emb.vocab.fingerprint())?;
    let kind = ckpt.model.kind;
    let (examples, _): (Vec<TokenizedExample>, _) = load_examples(&args.data, kind.token_mode())?;
    let data = Dataset::new(examples, &emb.vocab, &ckpt.char_vocab, kind);
    let model = Model {
        config: ckpt.model.clone(),
        params: ckpt.params,
        embeddings: emb.matrix,
    };
    let preds: BTreeMap<String, String> = predict_dataset(&model, &data, args.beam_k)?.into_iter().collect();
    let guard = Cleanup(vec![args.out.clone()]);
    write_json(&args.out, &preds)?;
    write_json(
        &snapshot_path(&args.out),
        &json!({
            "command": "predict",
            "checkpoint": args.checkpoint,
            "data": args.data,
            "embeddings": args.embeddings,
            "beam_k": args.beam_k,
            "model": ckpt.model,
        }),
    )?;
    guard.disarm();
    Ok(())
}

fn score(pred: &Path, gold: &Path) -> Result<(EvalResult, HashMap<String, String>)> {
    let preds = read_predictions(pred)?;
    let (golds, questions) = gold_answers(gold)?;
    Ok((evaluate(&preds, &golds), questions))
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let (res, _) = score(&args.pred, &args.gold)?;
    if res.missing > 0 {
        log::warn!("{} questions have no prediction and score 0", res.missing);
    }
    let report = json!({"exact_match": res.exact_match, "f1": res.f1});
    println!("{report}");
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    if let Some(path) = &args.per_question {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "em", "f1", "prediction", "golds"])?;
        for (id, q) in &res.per_question {
            w.write_record([
                id.as_str(),
                &q.em.to_string(),
                &q.f1.to_string(),
                q.prediction.as_deref().unwrap_or(""),
                &q.golds.join(" | "),
            ])?;
        }
        write_atomic(path, &w.into_inner()?)?;
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let mut ok = true;
    let mut report = |name: &str, seed: u64, rep: &fastqa::autodiff::GradReport| {
        let status = if rep.passed() { "ok" } else { "FAIL" };
        println!("{name:<24} seed {seed:<3} max rel error {:.3e}  {status}", rep.max_rel_error());
        ok &= rep.passed();
    };
    for seed in 0..args.seeds {
        for (name, rep) in check_primitives(seed)? {
            report(name, seed, &rep);
        }
        let rep = check_model_loss(args.model, args.n, args.context_len, args.question_len, seed)?;
        report(&format!("{} loss", args.model), seed, &rep);
        if args.model == ModelKind::FastQaExt {
            let rep = check_fusion(args.n, args.context_len, args.question_len, seed)?;
            report("fusion stack", seed, &rep);
        }
    }
    Ok(ok)
}

fn diff(args: DiffArgs) -> Result<()> {
    let (a, questions) = score(&args.pred_a, &args.gold)?;
    let (b, _) = score(&args.pred_b, &args.gold)?;
    let d = diff_systems(&a, &b, &questions)?;
    println!(
        "{}",
        json!({"a_wins": d.a_wins.len(), "b_wins": d.b_wins.len(), "both": d.both.len(), "neither": d.neither.len()})
    );
    if let Some(out) = &args.out {
        write_json(out, &d)?;
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        train: args.train_size,
        dev: args.dev_size,
        seed: args.seed,
        ..Default::default()
    };
    let fresh = !args.out.exists();
    let guard = Cleanup(if fresh { vec![args.out.clone()] } else { Vec::new() });
    write_synth(&args.out, &cfg)?;
    write_json(
        &args.out.join("synth.config.json"),
        &json!({"command": "synth", "train": cfg.train, "dev": cfg.dev, "context_len": cfg.context_len,
                "near_miss_rate": cfg.near_miss_rate, "dim": cfg.dim, "seed": cfg.seed}),
    )?;
    guard.disarm();
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check exceeded tolerance");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
        Command::Diff(a) => diff(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
