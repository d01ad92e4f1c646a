use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics, Statistics};

use crate::corpus::{Dataset, Split, TaskTag};
use crate::error::{invalid, Result};
use crate::model::ModelParams;
use crate::tensor::kernels::argmax;

use super::scores::answer_nll;

pub const HISTOGRAM_BINS: usize = 50;
const DENSITY_POINTS: usize = 200;

/// Equal-width histogram normalized to unit area.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub densities: Vec<f64>,
}

/// Gaussian kernel density estimate sampled on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

/// Negative log-likelihoods a model assigns to its own wrong answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverconfidenceReport {
    pub incorrect_nll: Vec<f64>,
    pub histogram: Histogram,
    pub density: Option<DensityCurve>,
    pub accuracy: f64,
    pub n_examples: usize,
}

impl Histogram {
    /// `bins` equal bins over `[0, max]`; the last bin is closed.
    pub fn of(values: &[f64], bins: usize) -> Self {
        if values.is_empty() || bins == 0 {
            return Self::default();
        }
        let max = values.iter().copied().fold(0.0, f64::max);
        let upper = if max > 0.0 { max } else { 1.0 };
        let width = upper / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| upper * i as f64 / bins as f64).collect();
        let mut counts = vec![0usize; bins];
        for &v in values {
            let b = ((v / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let n = values.len() as f64;
        let densities = counts.iter().map(|&c| c as f64 / (n * width)).collect();
        Self { edges, densities }
    }

    /// `Σ density · width`
    pub fn area(&self) -> f64 {
        self.densities
            .iter()
            .zip(self.edges.windows(2))
            .map(|(d, e)| d * (e[1] - e[0]))
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,density\n");
        for (d, e) in self.densities.iter().zip(self.edges.windows(2)) {
            let _ = writeln!(s, "{},{},{}", e[0], e[1], d);
        }
        s
    }
}

/// Silverman's rule, `0.9 · min(σ, IQR / 1.34) · n^(-1/5)`. `None` when the
/// values have no spread.
pub fn silverman_bandwidth(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let sd = values.std_dev();
    let iqr = Data::new(values.to_vec()).interquartile_range();
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (values.len() as f64).powf(-0.2);
    (h > 0.0 && h.is_finite()).then_some(h)
}

impl DensityCurve {
    pub fn of(values: &[f64]) -> Option<Self> {
        let h = silverman_bandwidth(values)?;
        let lo = (values.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h).max(0.0);
        let hi = values.iter().copied().fold(0.0, f64::max) + 3.0 * h;
        let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
        let x: Vec<f64> = (0..DENSITY_POINTS)
            .map(|i| lo + (hi - lo) * i as f64 / (DENSITY_POINTS - 1) as f64)
            .collect();
        let density = x
            .iter()
            .map(|&g| norm * values.iter().map(|&v| (-0.5 * ((g - v) / h).powi(2)).exp()).sum::<f64>())
            .collect();
        Some(Self { bandwidth: h, x, density })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,density\n");
        for (x, d) in self.x.iter().zip(&self.density) {
            let _ = writeln!(s, "{x},{d}");
        }
        s
    }
}

impl OverconfidenceReport {
    /// Builds the report from first-step answer logits and gold answer tokens.
    /// The predicted answer is the argmax; each wrong prediction contributes
    /// the NLL of the predicted token.
    pub fn from_predictions(rows: &[(Vec<f64>, usize)]) -> Result<Self> {
        if rows.is_empty() {
            return invalid("overconfidence report over no examples");
        }
        let mut incorrect_nll = Vec::new();
        for (logits, gold) in rows {
            let predicted = argmax(logits);
            if predicted != *gold {
                incorrect_nll.push(answer_nll(logits, predicted)?);
            }
        }
        let accuracy = 1.0 - incorrect_nll.len() as f64 / rows.len() as f64;
        Ok(Self {
            histogram: Histogram::of(&incorrect_nll, HISTOGRAM_BINS),
            density: DensityCurve::of(&incorrect_nll),
            incorrect_nll,
            accuracy,
            n_examples: rows.len(),
        })
    }

    pub fn mean_incorrect_nll(&self) -> Option<f64> {
        (!self.incorrect_nll.is_empty())
            .then(|| self.incorrect_nll.iter().sum::<f64>() / self.incorrect_nll.len() as f64)
    }

    pub fn nll_csv(&self) -> String {
        let mut s = String::from("nll\n");
        for v in &self.incorrect_nll {
            let _ = writeln!(s, "{v}");
        }
        s
    }
}

/// Greedy first-step answers of `model` on the MCQ examples of `split`.
pub fn overconfidence_report(model: &ModelParams, dataset: &Dataset, split: Split) -> Result<OverconfidenceReport> {
    if split == Split::Train {
        return invalid("overconfidence is measured on the val or test split only");
    }
    let examples = dataset.split(split);
    if examples.examples.iter().any(|e| e.task_tag != TaskTag::Mcq) {
        return invalid("overconfidence needs an mcq dataset");
    }
    let rows = examples
        .examples
        .par_iter()
        .map(|e| {
            let prompt = e.prompt();
            let logits = model.logits(&prompt)?;
            let v = model.config.vocab_size;
            let last = prompt.len() - 1;
            let gold = *e.response.first().ok_or_else(|| {
                crate::Error::InvalidArgument(format!("example {} has no answer", e.id))
            })?;
            Ok((logits.data()[last * v..(last + 1) * v].to_vec(), gold))
        })
        .collect::<Result<Vec<_>>>()?;
    OverconfidenceReport::from_predictions(&rows)
}
