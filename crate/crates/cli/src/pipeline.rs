//! Pipeline stages shared by the subcommands and the sweep, and the fixed
//! output layout `data/`, `ckpt/`, `logs/`, `reports/`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use distill_lab::corpus::{self, Dataset, Split, Vocabulary};
use distill_lab::distill::{distill_with, EpochAction, KdConfig, KdMode, Trainer, TrainingLog};
use distill_lab::metrics::{self, Aggregate, ExampleEval};
use distill_lab::model::{checkpoint_hash, load_checkpoint, save_checkpoint, ModelParams};
use log::{info, warn};
use serde::Serialize;

use crate::manifest::Manifest;

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];
const SAMPLE_DUMPS: usize = 10;

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split_file(&self, split: Split) -> PathBuf {
        self.data().join(format!("{}.jsonl", split.name()))
    }

    pub fn vocab_file(&self) -> PathBuf {
        self.data().join("vocab.txt")
    }

    pub fn checkpoint(&self, run: &str) -> PathBuf {
        self.root.join("ckpt").join(format!("{run}.ckpt"))
    }

    pub fn log(&self, run: &str, kind: &str) -> PathBuf {
        self.root.join("logs").join(format!("{run}.{kind}"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

pub fn teacher_run(seed: u64) -> String {
    format!("teacher-seed{seed}")
}

pub fn sft_run(seed: u64) -> String {
    format!("sft-seed{seed}")
}

pub fn kd_run(mode: KdMode, alpha: f64, seed: u64) -> String {
    let mode = match mode {
        KdMode::Word => "word",
        KdMode::WordPlusSequence => "word-seq",
    };
    format!("kd-{mode}-alpha{alpha}-seed{seed}")
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes the three split files and the vocabulary.
pub fn gen_data(spec: &corpus::CorpusSpec, layout: &Layout) -> Result<Dataset> {
    let dataset = corpus::generate(spec)?;
    for split in SPLITS {
        corpus::write_dataset(&dataset.split(split), &layout.split_file(split))?;
    }
    spec.vocabulary().write(&layout.vocab_file())?;
    Ok(dataset)
}

pub fn load_data(layout: &Layout) -> Result<(Dataset, Vocabulary)> {
    let mut examples = Vec::new();
    for split in SPLITS {
        let path = layout.split_file(split);
        if !path.exists() {
            bail!("dataset file {} not found; run `gen-data` first", path.display());
        }
        examples.extend(corpus::read_dataset(&path)?.examples);
    }
    examples.sort_by_key(|e| e.id);
    let vocab = Vocabulary::read(&layout.vocab_file())
        .with_context(|| format!("reading {}", layout.vocab_file().display()))?;
    Ok((Dataset::new(examples), vocab))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Run metadata written next to the training log.
#[derive(Serialize)]
pub struct RunMeta {
    pub run: String,
    pub seed: u64,
    pub alpha: Option<f64>,
    pub mode: Option<String>,
    pub teacher_checkpoint_hash: Option<String>,
    pub train_size: usize,
    pub dropped_augmented: usize,
    pub steps: usize,
    pub final_loss_sup: Option<f64>,
    pub final_loss_kd: Option<f64>,
    pub final_loss_total: Option<f64>,
    pub checkpoint_hash: String,
}

fn save_run(layout: &Layout, run: &str, params: &ModelParams, log: &TrainingLog, mut meta: RunMeta) -> Result<RunMeta> {
    let ckpt = layout.checkpoint(run);
    if let Some(dir) = ckpt.parent() {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(params, &ckpt)?;
    fs::create_dir_all(layout.root.join("logs"))?;
    log.write_steps_csv(&layout.log(run, "steps.csv"))?;
    log.write_epochs_csv(&layout.log(run, "epochs.csv"))?;
    let last = log.steps.last();
    meta.steps = log.steps.len();
    meta.train_size = log.train_size;
    meta.dropped_augmented = log.dropped_augmented;
    meta.final_loss_sup = last.map(|s| s.loss_sup);
    meta.final_loss_kd = last.and_then(|s| s.loss_kd);
    meta.final_loss_total = last.map(|s| s.loss_total);
    meta.checkpoint_hash = checkpoint_hash(params);
    write(&layout.log(run, "meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(meta)
}

fn meta(run: &str, seed: u64) -> RunMeta {
    RunMeta {
        run: run.to_string(),
        seed,
        alpha: None,
        mode: None,
        teacher_checkpoint_hash: None,
        train_size: 0,
        dropped_augmented: 0,
        steps: 0,
        final_loss_sup: None,
        final_loss_kd: None,
        final_loss_total: None,
        checkpoint_hash: String::new(),
    }
}

pub fn train_teacher(m: &Manifest, layout: &Layout, data: &Dataset, vocab: &Vocabulary, seed: u64) -> Result<RunMeta> {
    let run = teacher_run(seed);
    let params = ModelParams::init(&m.model_config(&m.teacher, seed)?)?;
    let cfg = distill_lab::distill::TrainConfig {
        seed,
        ..m.teacher_train.clone()
    };
    let mut trainer = Trainer::new(cfg);
    if let Some(target) = m.teacher_target_faithfulness {
        trainer = trainer.on_epoch(move |epoch, model, _| {
            let evals = metrics::evaluate(model, vocab, data, Split::Val)?;
            let agg = metrics::aggregate(&evals, None)?;
            let f = agg.exact_faithfulness.unwrap_or(0.0);
            info!("{run}: epoch {epoch} val exact_faithfulness {f:.4}", run = teacher_run(seed));
            Ok(if f >= target { EpochAction::Stop } else { EpochAction::Continue })
        });
    }
    let (params, log) = trainer.run(params, data)?;
    save_run(layout, &run, &params, &log, meta(&run, seed))
}

pub fn train_sft(m: &Manifest, layout: &Layout, data: &Dataset, seed: u64) -> Result<RunMeta> {
    let run = sft_run(seed);
    let params = ModelParams::init(&m.model_config(&m.student, seed)?)?;
    let cfg = distill_lab::distill::TrainConfig {
        seed,
        ..m.student_train.clone()
    };
    let (params, log) = Trainer::new(cfg).run(params, data)?;
    save_run(layout, &run, &params, &log, meta(&run, seed))
}

pub fn train_kd(
    m: &Manifest,
    layout: &Layout,
    data: &Dataset,
    teacher_path: &Path,
    alpha: f64,
    mode: KdMode,
    seed: u64,
) -> Result<RunMeta> {
    let run = kd_run(mode, alpha, seed);
    let teacher = load_model(teacher_path)?;
    let student = ModelParams::init(&m.model_config(&m.student, seed)?)?;
    let kd = KdConfig {
        alpha,
        mode,
        teacher_checkpoint: teacher_path.to_path_buf(),
    };
    let cfg = distill_lab::distill::TrainConfig {
        seed,
        ..m.student_train.clone()
    };
    let (params, log) = distill_with(Trainer::new(cfg), student, &teacher, data, &kd)?;
    let mut info = meta(&run, seed);
    info.alpha = Some(alpha);
    info.mode = Some(mode.to_string());
    info.teacher_checkpoint_hash = Some(checkpoint_hash(&teacher));
    save_run(layout, &run, &params, &log, info)
}

/// Per-example scores plus the aggregate, with the factual-rate classifier
/// fit on the model's own val-split generations.
pub struct Evaluation {
    pub examples: Vec<ExampleEval>,
    pub aggregate: Aggregate,
}

pub fn evaluate(model: &ModelParams, vocab: &Vocabulary, data: &Dataset, split: Split) -> Result<Evaluation> {
    let examples = metrics::evaluate(model, vocab, data, split)?;
    let calibration = if split == Split::Val || !data.contains_split(Split::Val) {
        None
    } else {
        Some(metrics::evaluate(model, vocab, data, Split::Val)?)
    };
    let classifier = metrics::fit_span_classifier(calibration.as_deref().unwrap_or(&examples))?;
    if classifier.is_none() && examples.iter().any(|e| !e.spans.is_empty()) {
        warn!("val spans hold a single class; factual_rate omitted");
    }
    let aggregate = metrics::aggregate(&examples, classifier.as_ref())?;
    Ok(Evaluation { examples, aggregate })
}

pub const METRIC_NAMES: [&str; 5] = [
    "rouge_l",
    "exact_faithfulness",
    "factual_rate",
    "mean_entropy",
    "length_normalized_accuracy",
];

/// Writes `<run>.<split>.examples.jsonl`, `.metrics.csv` and `.samples.txt`.
pub fn write_eval_reports(
    layout: &Layout,
    run: &str,
    split: Split,
    eval: &Evaluation,
    data: &Dataset,
    vocab: &Vocabulary,
    selection: Option<&[String]>,
) -> Result<()> {
    let s = split.name();
    let mut lines = String::new();
    for e in &eval.examples {
        lines.push_str(&serde_json::to_string(e)?);
        lines.push('\n');
    }
    write(&layout.report(&format!("{run}.{s}.examples.jsonl")), lines)?;

    let mut csv = String::from("metric,split,value\n");
    for (name, value) in eval.aggregate.rows() {
        if selection.map_or(true, |sel| sel.iter().any(|m| m == name)) {
            writeln!(csv, "{name},{s},{value}")?;
        }
    }
    write(&layout.report(&format!("{run}.{s}.metrics.csv")), csv)?;

    let split_data = data.split(split);
    let mut dump = String::new();
    for (e, ex) in eval.examples.iter().zip(&split_data.examples).take(SAMPLE_DUMPS) {
        writeln!(dump, "id {}", ex.id)?;
        writeln!(dump, "  prompt:    {}", vocab.render(&ex.prompt()))?;
        writeln!(dump, "  gold:      {}", vocab.render(&ex.response))?;
        writeln!(dump, "  generated: {}", vocab.render(&e.generated))?;
        if let Some(f) = e.exact_faithfulness {
            writeln!(dump, "  exact_faithfulness: {f}")?;
        }
        dump.push('\n');
    }
    write(&layout.report(&format!("{run}.{s}.samples.txt")), dump)?;
    Ok(())
}

pub fn write_report(layout: &Layout, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    write(&layout.report(name), contents)
}
