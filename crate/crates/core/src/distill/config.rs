use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Optimizer and schedule settings shared by every training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 16,
            epochs: 5,
            seed: 0,
            grad_clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted and leaves parameters untouched.
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return invalid(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        if self.epochs == 0 {
            return invalid("epochs must be positive");
        }
        if !(self.grad_clip_norm > 0.0) || !self.grad_clip_norm.is_finite() {
            return invalid(format!(
                "grad_clip_norm must be finite and positive, got {}",
                self.grad_clip_norm
            ));
        }
        Ok(())
    }
}

/// Whether the teacher contributes soft labels only, or also greedy-decoded
/// responses appended to the training set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum KdMode {
    #[default]
    #[serde(rename = "word", alias = "word_level")]
    Word,
    #[serde(rename = "word+seq", alias = "word_plus_sequence")]
    WordPlusSequence,
}

impl fmt::Display for KdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KdMode::Word => "word",
            KdMode::WordPlusSequence => "word+seq",
        })
    }
}

impl std::str::FromStr for KdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" | "word_level" => Ok(KdMode::Word),
            "word+seq" | "word_plus_sequence" => Ok(KdMode::WordPlusSequence),
            other => invalid(format!("unknown distillation mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub alpha: f64,
    pub mode: KdMode,
    pub teacher_checkpoint: PathBuf,
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        validate_alpha(self.alpha)
    }
}

pub(crate) fn validate_alpha(alpha: f64) -> Result<()> {
    if !alpha.is_finite() || alpha < 0.0 {
        return invalid(format!("alpha must be finite and non-negative, got {alpha}"));
    }
    Ok(())
}

/// Flat training config file. Absent keys fall back to [`TrainConfig::default`]
/// and, for the distillation keys, to `alpha = 1.0`, `mode = "word"`.
///
/// ```toml
/// learning_rate = 3e-4
/// batch_size = 16
/// epochs = 5
/// seed = 0
/// grad_clip_norm = 1.0
/// alpha = 1.0
/// mode = "word"
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub grad_clip_norm: Option<f64>,
    pub alpha: Option<f64>,
    pub mode: Option<KdMode>,
}

impl TrainFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            seed: self.seed.unwrap_or(d.seed),
            grad_clip_norm: self.grad_clip_norm.unwrap_or(d.grad_clip_norm),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kd_config(&self, teacher_checkpoint: PathBuf) -> Result<KdConfig> {
        let kd = KdConfig {
            alpha: self.alpha.unwrap_or(1.0),
            mode: self.mode.unwrap_or_default(),
            teacher_checkpoint,
        };
        kd.validate()?;
        Ok(kd)
    }
}
