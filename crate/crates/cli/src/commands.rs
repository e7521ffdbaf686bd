//! Subcommand arguments and implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use ecgqa_core::config::KeyValues;
use ecgqa_core::decoder::tokenizer::Tokenizer;
use ecgqa_core::fixtures::{check_pairing, load_reports, synthesize, Dataset, SynthConfig};
use ecgqa_core::gradsuite::{run_suite, GRAD_TOLERANCE, SUITE_SEEDS};
use ecgqa_core::index::{Hit, VectorIndex, DEFAULT_K};
use ecgqa_core::io_util::{content_hash, read_text};
use ecgqa_core::metrics::{aggregate, eval_to_jsonl};
use ecgqa_core::model::{ModelConfig, QaModel};
use ecgqa_core::nn::{checkpoint, ParamStore};
use ecgqa_core::pipeline::{self, evaluate, retrieve_all, Answerer, ModelAnswerer, OracleAnswerer};
use ecgqa_core::prompting::{prepare_prompt, QaItem, QuestionType};
use ecgqa_core::rng::{mix_seed, SeededRng};
use ecgqa_core::signal::EcgRecord;
use ecgqa_core::train::{load_params, params_to_tensors, Ablation, TrainConfig, TrainData, TrainState, Trainer, CSV_HEADER};
use ecgqa_core::{Error, Result};

use crate::meta::{read_meta, sidecar_path, write_artifact, write_meta, ArtifactMeta};
use crate::Context;

const TAG_VAL_SPLIT: u64 = 0x56;

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_vocab(data: &Path) -> Result<Tokenizer> {
    Tokenizer::load(&data.join("vocab.txt"))
}

fn require_meta(artifact: &Path) -> Result<ArtifactMeta> {
    read_meta(artifact)?.ok_or_else(|| Error::Format(format!("{} is missing", sidecar_path(artifact).display())))
}

/// `ctx.kv` on top of `base`.
fn layered(base: &KeyValues, ctx: &Context) -> KeyValues {
    let mut kv = base.clone();
    kv.merge(&ctx.kv);
    kv
}

// ---------------------------------------------------------------- synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of ECG records, each with one report and four questions.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Samples per lead at 500 Hz.
    #[arg(long)]
    pub len: Option<usize>,
}

pub fn synth_fixtures(ctx: &Context, a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(a.n, ctx.seed);
    cfg.len = ctx.kv.get_or("synth.len", cfg.len)?;
    cfg.noise = ctx.kv.get_or("synth.noise", cfg.noise)?;
    if let Some(len) = a.len {
        cfg.len = len;
    }
    let ds = synthesize(&cfg)?;
    create_dir(&a.out.join("ecg"))?;
    ds.write(&a.out)?;

    let mut kv = KeyValues::new();
    kv.set("synth.n", cfg.records);
    kv.set("synth.len", cfg.len);
    kv.set("synth.rate", cfg.rate);
    kv.set("synth.noise", cfg.noise);
    kv.set("seed", cfg.seed);
    let mut files = BTreeMap::new();
    let mut listing = String::new();
    for path in ds.files(&a.out) {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let rel = path
            .strip_prefix(&a.out)
            .expect("files lie in the dataset")
            .to_string_lossy()
            .replace('\\', "/");
        let h = content_hash(&bytes);
        let _ = writeln!(listing, "{h} {rel}");
        files.insert(rel, h);
    }
    let mut meta = ArtifactMeta::new("synth-fixtures", cfg.seed, &kv, listing.as_bytes());
    meta.files = files;
    write_meta(&a.out.join("fixtures.meta.json"), &meta)?;
    println!(
        "wrote {} records, {} reports, {} questions to {}",
        ds.records.len(),
        ds.reports.len(),
        ds.items.len(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- build-index

#[derive(Args, Debug)]
pub struct BuildIndexArgs {
    /// Dataset directory with `ecg/*.ecgr`, `reports.jsonl` and `vocab.txt`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output index file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

pub fn build_index(ctx: &Context, a: BuildIndexArgs) -> Result<()> {
    check_pairing(&a.data)?;
    let reports = load_reports(&a.data)?;
    let mut records = BTreeMap::new();
    for (r, _) in &reports {
        records.insert(r.clone(), EcgRecord::load(&a.data.join(r))?);
    }
    let tok = load_vocab(&a.data)?;
    let cfg = ModelConfig::from_kv(&ctx.kv, tok.len())?;
    let model = QaModel::from_config(&cfg)?;
    let enc = model.init_encoder_params(ctx.seed);
    let index = pipeline::build_index(&model, &enc, &records, &reports)?;

    let mut kv = ctx.kv.clone();
    cfg.to_kv(&mut kv);
    kv.set("seed", ctx.seed);
    write_artifact(&a.out, &index.to_bytes(), "build-index", ctx.seed, &kv)?;
    println!("indexed {} reports, dim {}", index.len(), index.dim());
    Ok(())
}

/// The index with the encoder that built it: same configuration and seed.
struct Retrieval {
    model: QaModel,
    encoder: ParamStore<f32>,
    index: VectorIndex,
    meta: ArtifactMeta,
}

impl Retrieval {
    fn load(path: &Path, vocab: usize) -> Result<Self> {
        let index = VectorIndex::load(path)?;
        let meta = require_meta(path)?;
        let model = QaModel::from_config(&ModelConfig::from_kv(&meta.config_kv(), vocab)?)?;
        if model.encoder.config().d_out != index.dim() {
            return Err(Error::Format(format!(
                "{}: dimension does not match its configuration",
                path.display()
            )));
        }
        let encoder = model.init_encoder_params(meta.seed);
        Ok(Self {
            model,
            encoder,
            index,
            meta,
        })
    }

    fn hits_for(&self, records: &BTreeMap<String, EcgRecord>, k: usize) -> Result<BTreeMap<String, Vec<Hit>>> {
        retrieve_all(&self.model, &self.encoder, &self.index, records, k)
    }
}

/// A trained (or freshly initialised) answering model.
struct Answering {
    model: QaModel,
    store: ParamStore<f32>,
    ablation: Ablation,
    kv: KeyValues,
    seed: u64,
}

impl Answering {
    fn from_checkpoint(path: &Path, vocab: usize) -> Result<Self> {
        let meta = require_meta(path)?;
        let kv = meta.config_kv();
        let ablation = Ablation::parse(kv.raw("train.ablation").unwrap_or("full"))?;
        let mut model = QaModel::from_config(&ModelConfig::from_kv(&kv, vocab)?)?;
        model.variant = ablation.mapper_variant();
        let mut store = model.init_params(meta.seed);
        load_params(&mut store, &checkpoint::load(path)?)?;
        Ok(Self {
            model,
            store,
            ablation,
            kv,
            seed: meta.seed,
        })
    }

    fn untrained(retrieval: &Retrieval) -> Self {
        let model = retrieval.model.clone();
        let store = model.init_params(retrieval.meta.seed);
        Self {
            model,
            store,
            ablation: Ablation::Full,
            kv: retrieval.meta.config_kv(),
            seed: retrieval.meta.seed,
        }
    }
}

// ---------------------------------------------------------------- ask

#[derive(Args, Debug)]
pub struct AskArgs {
    /// Dataset directory providing `vocab.txt`.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Index built by `build-index`.
    #[arg(long, value_name = "FILE")]
    pub index: PathBuf,
    /// Checkpoint written by `train`; without it the answer comes from the
    /// untrained model for the index seed.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Query ECG record (`.ecgr`).
    #[arg(long, value_name = "FILE")]
    pub ecg: PathBuf,
    /// Question type: single-verify, single-choose or single-query.
    #[arg(long)]
    pub qtype: String,
    #[arg(long)]
    pub question: String,
    /// Attribute named by the question; repeatable.
    #[arg(long = "attribute", value_name = "TEXT")]
    pub attributes: Vec<String>,
    /// Reports to retrieve (clamped to the index size).
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Longest generated answer, in tokens.
    #[arg(long, default_value_t = 16)]
    pub max_tokens: usize,
}

pub fn ask(ctx: &Context, a: AskArgs) -> Result<()> {
    let tok = load_vocab(&a.data)?;
    let retrieval = Retrieval::load(&a.index, tok.len())?;
    let rec = EcgRecord::load(&a.ecg)?;
    let z = retrieval.model.encoder.encode(&retrieval.encoder, &rec)?;
    let hits = retrieval.index.search(&z, a.k)?;

    let answering = match &a.checkpoint {
        Some(p) => Answering::from_checkpoint(p, tok.len())?,
        None => Answering::untrained(&retrieval),
    };
    let item = QaItem {
        ecg_ref: a.ecg.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        qtype: QuestionType::parse(&a.qtype)?,
        question: a.question,
        attributes: a.attributes,
        answers: Vec::new(),
    };
    let prompt = prepare_prompt(&item, &hits, &answering.ablation.eval_prompting(), &ctx.template)?;
    let mut answerer = ModelAnswerer {
        model: &answering.model,
        store: &answering.store,
        tokenizer: &tok,
        max_tokens: a.max_tokens,
    };
    let answer = answerer.answer(&item, &rec, &prompt)?;

    println!("retrieved {} report(s):", hits.len());
    for (rank, h) in hits.iter().enumerate() {
        println!("  {}. id {} score {:.6} | {}", rank + 1, h.id, h.score, h.report);
    }
    println!("prompt:");
    for line in prompt.text.lines() {
        println!("  {line}");
    }
    println!("answer: {answer}");
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Index built by `build-index` on the training records.
    #[arg(long, value_name = "FILE")]
    pub index: PathBuf,
    /// Output directory for `best.ecpt`, `last.ecpt` and `train_log.csv`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Fraction of records held out for validation; 0 validates on the
    /// training loss.
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Continue from `last.ecpt` in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Ablation: full, no-dp, no-report, no-mapper, no-pos, frozen-llm, frozen-encoder.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Total optimizer steps, overriding epochs × steps per epoch.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Stop this invocation after N epochs; `--resume` continues.
    #[arg(long, value_name = "N")]
    pub stop_after: Option<usize>,
}

/// Records in a seeded order; the first `fraction` of them validate.
fn split_records(items: &[QaItem], fraction: f64, seed: u64) -> Result<(Vec<QaItem>, Vec<QaItem>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(invalid("validation fraction must be in [0, 1)"));
    }
    let mut refs: Vec<&str> = items.iter().map(|it| it.ecg_ref.as_str()).collect();
    refs.sort_unstable();
    refs.dedup();
    SeededRng::new(mix_seed(seed, &[TAG_VAL_SPLIT])).shuffle(&mut refs);
    let n_val = (refs.len() as f64 * fraction).round() as usize;
    if n_val >= refs.len() && n_val > 0 {
        return Err(invalid("validation split leaves no training records"));
    }
    let val_refs: Vec<&str> = refs[..n_val].to_vec();
    let (val, train) = items.iter().cloned().partition(|it| val_refs.contains(&it.ecg_ref.as_str()));
    Ok((train, val))
}

/// CSV lines of an earlier run up to and including `step`.
fn kept_log_lines(path: &Path, step: usize) -> Result<Vec<String>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let s: usize = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("{}: bad row {line:?}", path.display())))?;
        if s <= step {
            out.push(line.to_string());
        }
    }
    Ok(out)
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let tok = load_vocab(&a.data)?;
    let retrieval = Retrieval::load(&a.index, tok.len())?;

    let mut kv = layered(&retrieval.meta.config_kv(), ctx);
    if let Some(v) = &a.ablation {
        kv.set("train.ablation", v);
    }
    if let Some(v) = a.epochs {
        kv.set("train.epochs", v);
    }
    if let Some(v) = a.batch_size {
        kv.set("train.batch_size", v);
    }
    if let Some(v) = a.lr {
        kv.set("train.lr", v);
    }
    if let Some(v) = a.max_steps {
        kv.set("train.max_steps", v);
    }
    if let Some(v) = a.val_fraction {
        kv.set("train.val_fraction", v);
    }
    let ablation = Ablation::parse(kv.raw("train.ablation").unwrap_or("full"))?;
    let val_fraction: f64 = kv.get_or("train.val_fraction", 0.0)?;
    let k: usize = kv.get_or("retrieval.k", DEFAULT_K)?;
    let cfg = ModelConfig::from_kv(&kv, tok.len())?;
    let tcfg = TrainConfig::default().with_kv(&kv)?;
    cfg.to_kv(&mut kv);
    tcfg.to_kv(&mut kv);
    kv.set("train.ablation", ablation.name());
    kv.set("train.val_fraction", val_fraction);
    kv.set("retrieval.k", k);
    let seed = tcfg.seed;

    let mut model = QaModel::from_config(&cfg)?;
    model.variant = ablation.mapper_variant();
    let hits = retrieval.hits_for(&ds.records, k)?;
    let (train_items, val_items) = split_records(&ds.items, val_fraction, seed)?;
    let data = TrainData {
        items: &train_items,
        val: &val_items,
        records: &ds.records,
        hits: &hits,
    };

    create_dir(&a.out)?;
    let last_path = a.out.join("last.ecpt");
    let best_path = a.out.join("best.ecpt");
    let log_path = a.out.join("train_log.csv");
    let mut store = model.init_params::<f32>(seed);
    let (mut state, mut lines) = if a.resume {
        let meta = require_meta(&last_path)?;
        if meta.config_kv() != kv || meta.seed != seed {
            return Err(invalid("resume configuration differs from the interrupted run"));
        }
        let state = TrainState::from_tensors(&mut store, checkpoint::load(&last_path)?)?;
        let lines = kept_log_lines(&log_path, state.step)?;
        (state, lines)
    } else {
        (TrainState::default(), Vec::new())
    };

    let trainer = Trainer {
        model: &model,
        tokenizer: &tok,
        template: &ctx.template,
        cfg: tcfg,
        ablation,
    };
    let mut epochs_run = 0;
    let summary = trainer.run(&mut store, &mut state, &data, &mut |e| {
        lines.push(e.row.to_csv());
        let mut csv = String::from(CSV_HEADER);
        csv.push('\n');
        for l in &lines {
            csv.push_str(l);
            csv.push('\n');
        }
        write_artifact(&log_path, csv.as_bytes(), "train", seed, &kv)?;
        if e.improved {
            write_artifact(&best_path, &checkpoint::encode(&params_to_tensors(e.store)), "train", seed, &kv)?;
        }
        write_artifact(&last_path, &checkpoint::encode(&e.state.to_tensors(e.store)), "train", seed, &kv)?;
        println!(
            "epoch {}: step {} lr {:.3e} train_loss {:.6} val_loss {:.6}{}",
            e.epoch + 1,
            e.row.step,
            e.row.lr,
            e.row.train_loss,
            e.row.val_loss,
            if e.improved { " (best)" } else { "" }
        );
        epochs_run += 1;
        Ok(if a.stop_after.is_some_and(|n| epochs_run >= n) {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        })
    })?;
    if summary.stopped_early {
        println!("stopped after step {}; continue with --resume", summary.steps);
    } else {
        println!(
            "trained {} steps; best val_loss {:.6}; checkpoint {}",
            summary.steps,
            state.best_val.unwrap_or(f32::NAN),
            best_path.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Index built by `build-index`.
    #[arg(long, value_name = "FILE")]
    pub index: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "FILE", required_unless_present = "oracle", conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Answer with the gold answers instead of a model.
    #[arg(long)]
    pub oracle: bool,
    /// Output directory for `metrics.json`, `metrics.txt` and `predictions.jsonl`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Evaluate a seeded, per-question-type sample of this fraction.
    #[arg(long)]
    pub subset: Option<f64>,
    /// Longest generated answer, in tokens.
    #[arg(long, default_value_t = 16)]
    pub max_tokens: usize,
    /// Row label in the report; defaults to the ablation label.
    #[arg(long)]
    pub label: Option<String>,
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let tok = load_vocab(&a.data)?;
    let retrieval = Retrieval::load(&a.index, tok.len())?;
    let answering = match &a.checkpoint {
        Some(p) => Some(Answering::from_checkpoint(p, tok.len())?),
        None => None,
    };
    let (base, ablation, label) = match &answering {
        Some(m) => (m.kv.clone(), m.ablation, m.ablation.label()),
        None => (retrieval.meta.config_kv(), Ablation::Full, "Oracle"),
    };
    let mut kv = layered(&base, ctx);
    let seed = kv.get_or("seed", answering.as_ref().map_or(retrieval.meta.seed, |m| m.seed))?;
    let k: usize = kv.get_or("retrieval.k", DEFAULT_K)?;
    let items = match a.subset {
        Some(f) => {
            kv.set("eval.subset", f);
            pipeline::subset(&ds.items, f, seed)?
        }
        None => ds.items.clone(),
    };
    kv.set("eval.max_tokens", a.max_tokens);
    kv.set("eval.answerer", if a.oracle { "oracle" } else { "model" });
    let hits = retrieval.hits_for(&ds.records, k)?;
    let dp = ablation.eval_prompting();
    let recs = match &answering {
        Some(m) => {
            let mut ans = ModelAnswerer {
                model: &m.model,
                store: &m.store,
                tokenizer: &tok,
                max_tokens: a.max_tokens,
            };
            evaluate(&items, &ds.records, &hits, &mut ans, &dp, &ctx.template)?
        }
        None => evaluate(&items, &ds.records, &hits, &mut OracleAnswerer, &dp, &ctx.template)?,
    };
    let report = aggregate(a.label.as_deref().unwrap_or(label), &recs)?;
    create_dir(&a.out)?;
    let table = report.to_table();
    write_artifact(&a.out.join("metrics.json"), report.to_json().as_bytes(), "eval", seed, &kv)?;
    write_artifact(&a.out.join("metrics.txt"), table.as_bytes(), "eval", seed, &kv)?;
    write_artifact(&a.out.join("predictions.jsonl"), eval_to_jsonl(&recs).as_bytes(), "eval", seed, &kv)?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------- grad-check

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = SUITE_SEEDS)]
    pub seeds: Vec<u64>,
}

pub fn grad_check(a: GradCheckArgs) -> Result<()> {
    let start = Instant::now();
    let checks = run_suite(&a.seeds)?;
    let mut failed = 0;
    for (seed, c) in &checks {
        let ok = c.max_rel_error <= GRAD_TOLERANCE;
        failed += usize::from(!ok);
        println!(
            "seed {seed} {:<28} coords {:>3} max_rel_err {:.3e} {}",
            c.label,
            c.coordinates,
            c.max_rel_error,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "{} checks, {failed} failed, tolerance {GRAD_TOLERANCE:e}, {:.2}s",
        checks.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(invalid(format!("{failed} gradient checks exceeded the tolerance")));
    }
    Ok(())
}

// ---------------------------------------------------------------- bench-index

#[derive(Args, Debug)]
pub struct BenchIndexArgs {
    /// Indexed vectors.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Timed queries.
    #[arg(long, default_value_t = 100)]
    pub queries: usize,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

pub fn bench_index(ctx: &Context, a: BenchIndexArgs) -> Result<()> {
    if a.n == 0 || a.queries == 0 {
        return Err(invalid("--n and --queries must be positive"));
    }
    let mut rng = SeededRng::new(ctx.seed);
    let vector = |rng: &mut SeededRng| -> Vec<f32> { (0..a.dim).map(|_| rng.normal() as f32).collect() };
    let data: Vec<Vec<f32>> = (0..a.n).map(|_| vector(&mut rng)).collect();
    let queries: Vec<Vec<f32>> = (0..a.queries).map(|_| vector(&mut rng)).collect();

    let start = Instant::now();
    let mut index = VectorIndex::new(a.dim)?;
    for (i, v) in data.iter().enumerate() {
        index.add(v, format!("r{i}"))?;
    }
    let build = start.elapsed();
    let start = Instant::now();
    let mut returned = 0;
    for q in &queries {
        returned += index.search(q, a.k)?.len();
    }
    let search = start.elapsed();
    println!("n {} dim {} k {} queries {}", a.n, a.dim, a.k, a.queries);
    println!("build {:.3} ms", build.as_secs_f64() * 1e3);
    println!(
        "search {:.3} ms total, {:.1} us/query, {} hits",
        search.as_secs_f64() * 1e3,
        search.as_secs_f64() * 1e6 / a.queries as f64,
        returned
    );
    Ok(())
}
