//! `distill-lab`: data generation, teacher and SFT training, distillation,
//! evaluation, overconfidence analysis and seeded sweeps.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod manifest;
mod pipeline;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use distill_lab::corpus::{Split, TaskTag};
use distill_lab::distill::KdMode;
use distill_lab::metrics::overconfidence_report;
use log::{error, info};
use rayon::prelude::*;

use manifest::{load_corpus_spec, Manifest};
use pipeline::Layout;

/// A usage or configuration problem (exit code 1).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Parser)]
#[command(name = "distill-lab", version, about = "Hard-label finetuning vs. knowledge distillation on synthetic grounded tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Teacher,
    SftStudent,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test files and the vocabulary from a corpus spec.
    GenData {
        /// Corpus spec (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finetune the teacher or the hard-label student baseline.
    Train {
        /// Experiment manifest (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        role: Role,
        /// Defaults to `teacher_seed` for the teacher and the first manifest seed otherwise.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the student against the teacher's soft labels.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        alpha: f64,
        /// `word` or `word+seq`; defaults to the manifest mode.
        #[arg(long)]
        mode: Option<KdMode>,
        /// Defaults to `ckpt/teacher-seed<teacher_seed>.ckpt`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint's greedy generations on the val or test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Comma-separated subset of rouge_l, exact_faithfulness,
        /// factual_rate, mean_entropy, length_normalized_accuracy.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// NLL of wrong MCQ answers before and after finetuning.
    Overconfidence {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint before finetuning.
        #[arg(long)]
        pre: PathBuf,
        /// Checkpoint after finetuning.
        #[arg(long)]
        post: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Teacher, then SFT and every alpha over every seed, evaluated on test.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

/// `DISTILL_LAB_THREADS` caps the worker pool.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DISTILL_LAB_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| ConfigError(format!("DISTILL_LAB_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn layout_for(m: &Manifest, out: Option<PathBuf>) -> Result<Layout> {
    out.or_else(|| m.out.clone())
        .map(Layout::new)
        .ok_or_else(|| ConfigError("no output directory: pass --out or set `out` in the manifest".into()).into())
}

fn eval_split(split: Split) -> Result<Split> {
    if split == Split::Train {
        return Err(ConfigError("models are evaluated on the val or test split only, never on train".into()).into());
    }
    Ok(split)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out, seed } => {
            let mut spec = load_corpus_spec(&config)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = pipeline::gen_data(&spec, &Layout::new(&out))?;
            println!("wrote {} examples to {}", data.len(), out.join("data").display());
        }
        Command::Train { config, role, seed, out } => {
            let m = Manifest::load(&config)?;
            let layout = layout_for(&m, out)?;
            let (data, vocab) = pipeline::load_data(&layout)?;
            let meta = match role {
                Role::Teacher => pipeline::train_teacher(&m, &layout, &data, &vocab, seed.unwrap_or(m.teacher_seed))?,
                Role::SftStudent => pipeline::train_sft(&m, &layout, &data, seed.unwrap_or(m.seeds[0]))?,
            };
            print_meta(&meta);
        }
        Command::Distill {
            config,
            alpha,
            mode,
            teacher,
            seed,
            out,
        } => {
            let m = Manifest::load(&config)?;
            if !alpha.is_finite() || alpha < 0.0 {
                return Err(ConfigError(format!("alpha must be finite and non-negative, got {alpha}")).into());
            }
            let layout = layout_for(&m, out)?;
            let (data, _) = pipeline::load_data(&layout)?;
            let teacher = teacher.unwrap_or_else(|| layout.checkpoint(&pipeline::teacher_run(m.teacher_seed)));
            let meta = pipeline::train_kd(
                &m,
                &layout,
                &data,
                &teacher,
                alpha,
                mode.unwrap_or(m.mode),
                seed.unwrap_or(m.seeds[0]),
            )?;
            print_meta(&meta);
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            metrics,
            out,
        } => {
            let split = eval_split(split)?;
            if let Some(sel) = &metrics {
                if let Some(bad) = sel.iter().find(|s| !pipeline::METRIC_NAMES.contains(&s.as_str())) {
                    return Err(ConfigError(format!("unknown metric `{bad}`")).into());
                }
            }
            let m = Manifest::load(&config)?;
            let layout = layout_for(&m, out)?;
            let (data, vocab) = pipeline::load_data(&layout)?;
            let model = pipeline::load_model(&checkpoint)?;
            let eval = pipeline::evaluate(&model, &vocab, &data, split)?;
            let run = run_name(&checkpoint);
            pipeline::write_eval_reports(&layout, &run, split, &eval, &data, &vocab, metrics.as_deref())?;
            for (name, value) in eval.aggregate.rows() {
                println!("{name} {}: {value:.6}", split.name());
            }
        }
        Command::Overconfidence {
            config,
            pre,
            post,
            split,
            out,
        } => {
            let split = eval_split(split)?;
            let m = Manifest::load(&config)?;
            if m.corpus.task != TaskTag::Mcq {
                return Err(ConfigError("overconfidence needs an mcq corpus".into()).into());
            }
            let layout = layout_for(&m, out)?;
            let (data, _) = pipeline::load_data(&layout)?;
            let mut acc = String::from("model,acc\n");
            let mut summary = String::from("model,acc,mean_incorrect_nll,n_incorrect\n");
            for (label, path) in [("pre", &pre), ("post", &post)] {
                let model = pipeline::load_model(path)?;
                let r = overconfidence_report(&model, &data, split)?;
                let dir = format!("overconfidence/{label}");
                pipeline::write_report(&layout, &format!("{dir}.nll.csv"), r.nll_csv())?;
                pipeline::write_report(&layout, &format!("{dir}.histogram.csv"), r.histogram.to_csv())?;
                if let Some(d) = &r.density {
                    pipeline::write_report(&layout, &format!("{dir}.density.csv"), d.to_csv())?;
                }
                let pct = 100.0 * r.accuracy;
                writeln!(acc, "{label},{pct}")?;
                let mean = r.mean_incorrect_nll().map_or(String::new(), |v| v.to_string());
                writeln!(summary, "{label},{pct},{mean},{}", r.incorrect_nll.len())?;
                println!("{label}: accuracy {pct:.2}%, mean NLL of wrong answers {mean}");
            }
            pipeline::write_report(&layout, "overconfidence/accuracy.csv", acc)?;
            pipeline::write_report(&layout, "overconfidence/summary.csv", summary)?;
        }
        Command::Sweep { config, out } => sweep(&config, out)?,
    }
    Ok(())
}

fn run_name(checkpoint: &Path) -> String {
    checkpoint
        .file_stem()
        .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
}

fn print_meta(meta: &pipeline::RunMeta) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
    println!(
        "{}: {} steps, final loss_sup {} loss_kd {} loss_total {}, checkpoint {}",
        meta.run,
        meta.steps,
        fmt(meta.final_loss_sup),
        fmt(meta.final_loss_kd),
        fmt(meta.final_loss_total),
        meta.checkpoint_hash
    );
}

/// One (method, alpha, seed) cell of the sweep grid.
#[derive(Clone, Copy)]
struct Cell {
    alpha: Option<f64>,
    seed: u64,
}

impl Cell {
    fn method(&self) -> &'static str {
        if self.alpha.is_some() {
            "kd"
        } else {
            "sft"
        }
    }

    fn alpha_field(&self) -> String {
        self.alpha.map_or(String::new(), |a| a.to_string())
    }
}

fn sweep(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let m = Manifest::load(config)?;
    let layout = layout_for(&m, out)?;
    pipeline::gen_data(&m.corpus, &layout)?;
    let (data, vocab) = pipeline::load_data(&layout)?;
    let teacher = pipeline::train_teacher(&m, &layout, &data, &vocab, m.teacher_seed).context("teacher training")?;
    info!("teacher ready: {}", teacher.checkpoint_hash);
    let teacher_path = layout.checkpoint(&teacher.run);

    let mut cells = Vec::new();
    for &seed in &m.seeds {
        cells.push(Cell { alpha: None, seed });
        for &a in &m.alphas {
            cells.push(Cell { alpha: Some(a), seed });
        }
    }
    let results: Vec<Result<Vec<(&'static str, f64)>>> = cells
        .par_iter()
        .map(|cell| {
            let meta = match cell.alpha {
                None => pipeline::train_sft(&m, &layout, &data, cell.seed)?,
                Some(a) => pipeline::train_kd(&m, &layout, &data, &teacher_path, a, m.mode, cell.seed)?,
            };
            let model = pipeline::load_model(&layout.checkpoint(&meta.run))?;
            let eval = pipeline::evaluate(&model, &vocab, &data, Split::Test)?;
            pipeline::write_eval_reports(&layout, &meta.run, Split::Test, &eval, &data, &vocab, None)?;
            info!("{} done", meta.run);
            Ok(eval.aggregate.rows())
        })
        .collect();

    let mut runs = String::from("method,alpha,seed,metric,value\n");
    let mut failures = String::from("method,alpha,seed,error\n");
    let mut n_failed = 0;
    // (method, alpha, metric) -> values, in first-seen order.
    let mut groups: Vec<((&str, String, &str), Vec<f64>)> = Vec::new();
    for (cell, result) in cells.iter().zip(results) {
        match result {
            Ok(rows) => {
                for (metric, value) in rows {
                    writeln!(runs, "{},{},{},{metric},{value}", cell.method(), cell.alpha_field(), cell.seed)?;
                    let key = (cell.method(), cell.alpha_field(), metric);
                    match groups.iter_mut().find(|(k, _)| *k == key) {
                        Some((_, v)) => v.push(value),
                        None => groups.push((key, vec![value])),
                    }
                }
            }
            Err(e) => {
                n_failed += 1;
                error!("{} alpha={} seed={} failed: {e:#}", cell.method(), cell.alpha_field(), cell.seed);
                let msg = format!("{e:#}").replace(['\n', ','], " ");
                writeln!(failures, "{},{},{},{msg}", cell.method(), cell.alpha_field(), cell.seed)?;
            }
        }
    }
    let mut summary = String::from("method,alpha,metric,mean,std,n\n");
    for ((method, alpha, metric), values) in &groups {
        let (mean, std) = mean_std(values);
        writeln!(summary, "{method},{alpha},{metric},{mean},{std},{}", values.len())?;
    }
    pipeline::write_report(&layout, "sweep_runs.csv", runs)?;
    pipeline::write_report(&layout, "sweep_summary.csv", summary)?;
    pipeline::write_report(&layout, "sweep_failures.csv", failures)?;
    print!("{}", std::fs::read_to_string(layout.report("sweep_summary.csv"))?);
    if n_failed > 0 {
        anyhow::bail!("{n_failed} of {} sweep runs failed; see reports/sweep_failures.csv", cells.len());
    }
    Ok(())
}

/// Mean and sample standard deviation; a constant group is reported exactly.
fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.windows(2).all(|w| w[0] == w[1]) {
        return (values[0], 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
