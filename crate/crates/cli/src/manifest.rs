//! Experiment manifest: one TOML file naming the corpus, both architectures,
//! both training schedules and the sweep grid.
//!
//! ```toml
//! corpus = "corpus.toml"   # relative to this file
//! out = "runs/demo"        # optional, `--out` overrides
//! seeds = [1, 2, 3]
//! teacher_seed = 0
//! alphas = [0.01, 0.1, 1.0, 10.0]
//! mode = "word"
//! teacher_target_faithfulness = 0.95   # optional early stop for the teacher
//!
//! [teacher]
//! d_model = 128
//! n_layers = 4
//! n_heads = 4
//! d_ff = 256
//!
//! [student]
//! d_model = 64
//! n_layers = 2
//! n_heads = 4
//! d_ff = 128
//!
//! [teacher_train]
//! learning_rate = 1e-3
//! epochs = 20
//!
//! [student_train]
//! learning_rate = 1e-3
//! epochs = 10
//! ```

use std::path::{Path, PathBuf};

use distill_lab::corpus::CorpusSpec;
use distill_lab::distill::{KdMode, TrainConfig, TrainFile};
use distill_lab::model::ModelConfig;
use serde::Deserialize;

use crate::ConfigError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Defaults to the corpus `max_seq_len`.
    pub max_seq_len: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    corpus: PathBuf,
    out: Option<PathBuf>,
    seeds: Vec<u64>,
    #[serde(default)]
    teacher_seed: u64,
    #[serde(default = "default_alphas")]
    alphas: Vec<f64>,
    #[serde(default)]
    mode: KdMode,
    teacher_target_faithfulness: Option<f64>,
    teacher: ModelSection,
    student: ModelSection,
    #[serde(default)]
    teacher_train: TrainFile,
    #[serde(default)]
    student_train: TrainFile,
}

fn default_alphas() -> Vec<f64> {
    vec![0.01, 0.1, 1.0, 10.0]
}

/// A validated manifest with the corpus spec loaded.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub corpus: CorpusSpec,
    pub out: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub teacher_seed: u64,
    pub alphas: Vec<f64>,
    pub mode: KdMode,
    pub teacher_target_faithfulness: Option<f64>,
    pub teacher: ModelSection,
    pub student: ModelSection,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read manifest {}: {e}", path.display())))?;
        let raw: RawManifest =
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let corpus = load_corpus_spec(&base.join(&raw.corpus))?;
        if raw.seeds.is_empty() {
            return Err(ConfigError("manifest seed list is empty".into()));
        }
        for &a in &raw.alphas {
            if !a.is_finite() || a < 0.0 {
                return Err(ConfigError(format!("alpha must be finite and non-negative, got {a}")));
            }
        }
        if let Some(t) = raw.teacher_target_faithfulness {
            if !(0.0..=1.0).contains(&t) {
                return Err(ConfigError(format!("teacher_target_faithfulness must be in [0, 1], got {t}")));
            }
        }
        for (name, t) in [("teacher_train", &raw.teacher_train), ("student_train", &raw.student_train)] {
            if t.alpha.is_some() || t.mode.is_some() {
                return Err(ConfigError(format!(
                    "[{name}] cannot set alpha or mode; use the top-level `alphas` and `mode` keys"
                )));
            }
        }
        let teacher_train = raw
            .teacher_train
            .train_config()
            .map_err(|e| ConfigError(format!("[teacher_train]: {e}")))?;
        let student_train = raw
            .student_train
            .train_config()
            .map_err(|e| ConfigError(format!("[student_train]: {e}")))?;
        let m = Self {
            corpus,
            out: raw.out.map(|o| base.join(o)),
            seeds: raw.seeds,
            teacher_seed: raw.teacher_seed,
            alphas: raw.alphas,
            mode: raw.mode,
            teacher_target_faithfulness: raw.teacher_target_faithfulness,
            teacher: raw.teacher,
            student: raw.student,
            teacher_train,
            student_train,
        };
        m.model_config(&m.teacher, 0)?;
        m.model_config(&m.student, 0)?;
        Ok(m)
    }

    /// Architecture with the corpus vocabulary and the given init seed.
    pub fn model_config(&self, section: &ModelSection, seed: u64) -> Result<ModelConfig, ConfigError> {
        let cfg = ModelConfig {
            vocab_size: self.corpus.vocabulary().len(),
            d_model: section.d_model,
            n_layers: section.n_layers,
            n_heads: section.n_heads,
            d_ff: section.d_ff,
            max_seq_len: section.max_seq_len.unwrap_or(self.corpus.max_seq_len),
            seed,
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        if cfg.max_seq_len < self.corpus.sequence_len() {
            return Err(ConfigError(format!(
                "model max_seq_len {} is shorter than the corpus examples ({} tokens)",
                cfg.max_seq_len,
                self.corpus.sequence_len()
            )));
        }
        Ok(cfg)
    }
}

pub fn load_corpus_spec(path: &Path) -> Result<CorpusSpec, ConfigError> {
    let spec = CorpusSpec::from_file(path).map_err(|e| ConfigError(e.to_string()))?;
    spec.validate()
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    Ok(spec)
}
