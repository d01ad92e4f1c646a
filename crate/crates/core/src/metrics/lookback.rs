use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::AttentionTrace;

/// Mean per-head lookback ratios over one generated span.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookbackFeatures {
    pub span_id: usize,
    /// Layer-major, `n_layers * n_heads` entries in `[0, 1]`.
    pub ratios: Vec<f64>,
    /// `Some(true)` for a factual span, when known.
    pub label: Option<bool>,
}

/// `Ā_ctx / (Ā_ctx + Ā_new)` for one attention row, where the means run over
/// positions before and from `context_len`.
pub fn lookback_ratio(
    trace: &AttentionTrace,
    context_len: usize,
    step: usize,
    layer: usize,
    head: usize,
) -> Result<f64> {
    let Some(row) = trace.row(step, layer, head) else {
        return invalid(format!("no attention row at step {step}, layer {layer}, head {head}"));
    };
    if context_len == 0 {
        return invalid("lookback ratio needs at least one context position");
    }
    if row.len() <= context_len {
        return invalid(format!(
            "step {step} attends to {} positions, none generated after a context of {context_len}",
            row.len()
        ));
    }
    let (ctx, new) = row.split_at(context_len);
    let ctx = ctx.iter().sum::<f64>() / ctx.len() as f64;
    let new = new.iter().sum::<f64>() / new.len() as f64;
    if ctx + new <= 0.0 {
        return invalid(format!("attention row at step {step} carries no mass"));
    }
    Ok(ctx / (ctx + new))
}

/// Per-(layer, head) mean of [`lookback_ratio`] over the steps of `span`.
/// The span id is the first step.
pub fn extract_span_features(
    trace: &AttentionTrace,
    context_len: usize,
    span: Range<usize>,
) -> Result<LookbackFeatures> {
    if span.is_empty() {
        return invalid("span must cover at least one step");
    }
    if span.end > trace.steps().len() {
        return invalid(format!(
            "span {span:?} exceeds the {} traced steps",
            trace.steps().len()
        ));
    }
    let (n_layers, n_heads) = (trace.n_layers(), trace.n_heads());
    let mut ratios = vec![0.0; n_layers * n_heads];
    for step in span.clone() {
        for layer in 0..n_layers {
            for head in 0..n_heads {
                ratios[layer * n_heads + head] += lookback_ratio(trace, context_len, step, layer, head)?;
            }
        }
    }
    let n = span.len() as f64;
    ratios.iter_mut().for_each(|r| *r /= n);
    Ok(LookbackFeatures {
        span_id: span.start,
        ratios,
        label: None,
    })
}

/// Logistic regression over lookback ratios.
///
/// Features are centred on 0.5, the ratio of a head that looks at context and
/// generated tokens equally, so `p = σ(bias + w · (x − 0.5))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactualClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
}

const CENTRE: f64 = 0.5;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl FactualClassifier {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias
            + self
                .weights
                .iter()
                .zip(x)
                .map(|(w, v)| w * (v - CENTRE))
                .sum::<f64>()
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.probability(x) >= self.threshold
    }
}

/// Mean log-loss plus `l2 · ‖w‖² / 2` (the bias is not penalised) and its
/// gradient with respect to `(weights, bias)`, bias last.
pub fn classifier_objective(
    classifier: &FactualClassifier,
    features: &[&[f64]],
    labels: &[bool],
    l2: f64,
) -> (f64, Vec<f64>) {
    let m = classifier.weights.len();
    let n = features.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; m + 1];
    for (x, &y) in features.iter().zip(labels) {
        let z = classifier.logit(x);
        // -[y ln σ(z) + (1-y) ln(1-σ(z))] = softplus(z) - y z
        loss += softplus(z) - if y { z } else { 0.0 };
        let r = sigmoid(z) - f64::from(u8::from(y));
        for (g, v) in grad.iter_mut().zip(x.iter()) {
            *g += r * (v - CENTRE);
        }
        grad[m] += r;
    }
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    for (g, w) in grad.iter_mut().zip(&classifier.weights) {
        *g += l2 * w;
    }
    loss += 0.5 * l2 * classifier.weights.iter().map(|w| w * w).sum::<f64>();
    (loss, grad)
}

/// Fits a [`FactualClassifier`] by full-batch gradient descent from zero.
///
/// The step is `1 / L`, with `L` the Lipschitz bound of the objective's
/// gradient for this data, so every step is a descent step.
pub fn train_factual_classifier(
    features: &[LookbackFeatures],
    l2: f64,
    iterations: usize,
) -> Result<FactualClassifier> {
    if !(l2 >= 0.0) || !l2.is_finite() {
        return invalid(format!("l2 must be finite and non-negative, got {l2}"));
    }
    let Some(first) = features.first() else {
        return invalid("no training spans");
    };
    let m = first.ratios.len();
    let mut xs = Vec::with_capacity(features.len());
    let mut ys = Vec::with_capacity(features.len());
    for f in features {
        if f.ratios.len() != m {
            return invalid("feature vectors differ in length");
        }
        if f.ratios.iter().any(|v| !v.is_finite()) {
            return invalid(format!("span {} has a non-finite feature", f.span_id));
        }
        let Some(y) = f.label else {
            return invalid(format!("span {} is unlabeled", f.span_id));
        };
        xs.push(f.ratios.as_slice());
        ys.push(y);
    }
    if ys.iter().all(|&y| y) || ys.iter().all(|&y| !y) {
        return invalid("classifier training needs both factual and hallucinated spans");
    }
    let max_sq = xs
        .iter()
        .map(|x| 1.0 + x.iter().map(|v| (v - CENTRE).powi(2)).sum::<f64>())
        .fold(0.0, f64::max);
    let step = 1.0 / (0.25 * max_sq + l2);
    let mut clf = FactualClassifier {
        weights: vec![0.0; m],
        bias: 0.0,
        threshold: 0.5,
    };
    for _ in 0..iterations {
        let (_, grad) = classifier_objective(&clf, &xs, &ys, l2);
        for (w, g) in clf.weights.iter_mut().zip(&grad) {
            *w -= step * g;
        }
        clf.bias -= step * grad[m];
    }
    Ok(clf)
}

/// Fraction of spans whose predicted factual probability reaches the
/// classifier threshold.
pub fn factual_rate(classifier: &FactualClassifier, spans: &[LookbackFeatures]) -> Result<f64> {
    if spans.is_empty() {
        return invalid("factual rate over an empty span list");
    }
    let factual = spans.iter().filter(|s| classifier.predict(&s.ratios)).count();
    Ok(factual as f64 / spans.len() as f64)
}
