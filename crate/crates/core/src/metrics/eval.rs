use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{ANS, EOS, RESERVED};
use crate::corpus::{mcq_options, Dataset, Example, Split, TaskTag, Vocabulary};
use crate::error::{invalid, Result};
use crate::model::ModelParams;
use crate::tensor::kernels;

use super::lookback::{extract_span_features, factual_rate, train_factual_classifier, FactualClassifier, LookbackFeatures};
use super::rouge::{rouge_l, RougeScore};
use super::scores::{entropy_of_logits, exact_faithfulness, length_normalized_accuracy, slot_correctness};

/// L2 strength and iteration count used to fit the span classifier.
pub const CLASSIFIER_L2: f64 = 1e-3;
pub const CLASSIFIER_ITERATIONS: usize = 500;

/// Scores of one greedy generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleEval {
    pub id: usize,
    /// Generated tokens after the prompt.
    pub generated: Vec<usize>,
    pub rouge_l: RougeScore,
    /// FactTable only.
    pub exact_faithfulness: Option<f64>,
    pub malformed: bool,
    /// Mean next-token entropy over the gold response positions.
    pub mean_entropy: f64,
    /// MCQ only.
    pub length_normalized_correct: Option<bool>,
    /// One span per emitted answer slot, labeled by slot correctness.
    #[serde(skip)]
    pub spans: Vec<LookbackFeatures>,
}

/// Means over examples; `None` where a metric does not apply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_examples: usize,
    pub rouge_l: f64,
    pub exact_faithfulness: Option<f64>,
    pub factual_rate: Option<f64>,
    pub mean_entropy: f64,
    pub length_normalized_accuracy: Option<f64>,
}

impl Aggregate {
    /// `(metric, value)` rows in a fixed order, skipping absent metrics.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let mut rows = vec![("rouge_l", self.rouge_l)];
        if let Some(v) = self.exact_faithfulness {
            rows.push(("exact_faithfulness", v));
        }
        if let Some(v) = self.factual_rate {
            rows.push(("factual_rate", v));
        }
        rows.push(("mean_entropy", self.mean_entropy));
        if let Some(v) = self.length_normalized_accuracy {
            rows.push(("length_normalized_accuracy", v));
        }
        rows
    }
}

fn content(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| t >= RESERVED.len()).collect()
}

/// Decodes greedily up to the model's context length and scores the output.
pub fn evaluate_example(model: &ModelParams, vocab: &Vocabulary, example: &Example) -> Result<ExampleEval> {
    let prompt = example.prompt();
    let budget = model.config.max_seq_len.saturating_sub(prompt.len());
    let (seq, trace) = model.generate_greedy(&prompt, budget, EOS)?;
    let generated = seq[prompt.len()..].to_vec();

    let reference = content(&example.response);
    let rouge_l = rouge_l(&content(&generated), &reference)?;

    let (inputs, _, mask) = example.training_view();
    let logits = model.logits(&inputs)?;
    let v = model.config.vocab_size;
    let entropies: Vec<f64> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(r, _)| entropy_of_logits(&logits.data()[r * v..(r + 1) * v]))
        .collect();
    let mean_entropy = entropies.iter().sum::<f64>() / entropies.len() as f64;

    let mut eval = ExampleEval {
        id: example.id,
        generated,
        rouge_l,
        exact_faithfulness: None,
        malformed: false,
        mean_entropy,
        length_normalized_correct: None,
        spans: Vec::new(),
    };
    match example.task_tag {
        TaskTag::FactTable => {
            let f = exact_faithfulness(&eval.generated, &example.context, &example.gold_bindings)?;
            eval.exact_faithfulness = Some(f.score);
            eval.malformed = f.malformed;
            if let Some(correct) = slot_correctness(&eval.generated, &example.context, &example.gold_bindings) {
                // Generated token `s` is produced at trace step `s`.
                let first_slot = eval.generated.iter().position(|&t| t == ANS).unwrap_or(0) + 1;
                for (k, ok) in correct.into_iter().enumerate() {
                    let step = first_slot + k;
                    let mut f = extract_span_features(&trace, prompt.len(), step..step + 1)?;
                    f.label = Some(ok);
                    eval.spans.push(f);
                }
            }
        }
        TaskTag::Mcq => {
            let last = prompt.len() - 1;
            let (logp, _) = kernels::log_softmax(&model.logits(&prompt)?.data()[last * v..(last + 1) * v]);
            let options = mcq_options(example);
            let choices = options
                .iter()
                .map(|&(letter, _)| {
                    let chars = vocab.symbol(letter).map_or(1, |s| s.chars().count());
                    (logp[letter], chars)
                })
                .collect::<Vec<_>>();
            let gold = options
                .iter()
                .position(|&(letter, _)| Some(&letter) == example.response.first())
                .ok_or_else(|| crate::Error::InvalidArgument(format!("example {} has no gold option", example.id)))?;
            eval.length_normalized_correct = Some(length_normalized_accuracy(&choices, gold)?);
        }
    }
    Ok(eval)
}

/// Evaluates every example of `split` in dataset order.
pub fn evaluate(model: &ModelParams, vocab: &Vocabulary, dataset: &Dataset, split: Split) -> Result<Vec<ExampleEval>> {
    if split == Split::Train {
        return invalid("models are evaluated on the val or test split only, never on train");
    }
    let examples = dataset.split(split);
    if examples.is_empty() {
        return invalid(format!("dataset has no {} examples", split.name()));
    }
    if examples.vocab_extent() > model.config.vocab_size {
        return invalid(format!(
            "dataset uses {} token ids but the model has a vocabulary of {}",
            examples.vocab_extent(),
            model.config.vocab_size
        ));
    }
    examples
        .examples
        .par_iter()
        .map(|e| evaluate_example(model, vocab, e))
        .collect()
}

/// Fits the span classifier on labeled spans; `None` when the spans hold only
/// one class, since no decision boundary exists then.
pub fn fit_span_classifier(evals: &[ExampleEval]) -> Result<Option<FactualClassifier>> {
    let spans: Vec<LookbackFeatures> = evals.iter().flat_map(|e| e.spans.iter().cloned()).collect();
    let factual = spans.iter().filter(|s| s.label == Some(true)).count();
    if factual == 0 || factual == spans.len() {
        return Ok(None);
    }
    train_factual_classifier(&spans, CLASSIFIER_L2, CLASSIFIER_ITERATIONS).map(Some)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn aggregate(evals: &[ExampleEval], classifier: Option<&FactualClassifier>) -> Result<Aggregate> {
    if evals.is_empty() {
        return invalid("nothing to aggregate");
    }
    let spans: Vec<LookbackFeatures> = evals.iter().flat_map(|e| e.spans.iter().cloned()).collect();
    let factual_rate = match classifier {
        Some(c) if !spans.is_empty() => Some(factual_rate(c, &spans)?),
        _ => None,
    };
    Ok(Aggregate {
        n_examples: evals.len(),
        rouge_l: mean(evals.iter().map(|e| e.rouge_l.f1)).unwrap_or(0.0),
        exact_faithfulness: mean(evals.iter().filter_map(|e| e.exact_faithfulness)),
        factual_rate,
        mean_entropy: mean(evals.iter().map(|e| e.mean_entropy)).unwrap_or(0.0),
        length_normalized_accuracy: mean(
            evals
                .iter()
                .filter_map(|e| e.length_normalized_correct.map(|c| f64::from(u8::from(c)))),
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusSpec};
    use crate::model::ModelConfig;

    fn spec(task: TaskTag) -> CorpusSpec {
        CorpusSpec {
            task,
            n_examples: 30,
            n_entities: 6,
            n_values: 6,
            facts_per_context: 2,
            queried_facts: if task == TaskTag::Mcq { 1 } else { 2 },
            distractor_count: 1,
            seed: 5,
            n_choices: (task == TaskTag::Mcq).then_some(3),
            max_seq_len: 32,
        }
    }

    fn model(vocab: usize) -> ModelParams {
        ModelParams::init(&ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 32,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn evaluation_covers_split_and_refuses_train() {
        let s = spec(TaskTag::FactTable);
        let data = generate(&s).unwrap();
        let vocab = s.vocabulary();
        let m = model(vocab.len());
        assert!(evaluate(&m, &vocab, &data, Split::Train).is_err());
        let evals = evaluate(&m, &vocab, &data, Split::Test).unwrap();
        assert_eq!(evals.len(), data.split(Split::Test).len());
        for (e, ex) in evals.iter().zip(&data.split(Split::Test).examples) {
            assert_eq!(e.id, ex.id);
            let f = e.exact_faithfulness.unwrap();
            assert!((0.0..=1.0).contains(&f));
            assert!(e.mean_entropy >= 0.0 && e.mean_entropy <= (vocab.len() as f64).ln() + 1e-9);
            for span in &e.spans {
                assert_eq!(span.ratios.len(), 4);
                assert!(span.ratios.iter().all(|r| (0.0..=1.0).contains(r)));
            }
        }
        let agg = aggregate(&evals, None).unwrap();
        let mean_f = evals.iter().map(|e| e.exact_faithfulness.unwrap()).sum::<f64>() / evals.len() as f64;
        assert!((agg.exact_faithfulness.unwrap() - mean_f).abs() < 1e-12);
        assert_eq!(agg.factual_rate, None);
    }

    #[test]
    fn mcq_evaluation_scores_options() {
        let s = spec(TaskTag::Mcq);
        let data = generate(&s).unwrap();
        let vocab = s.vocabulary();
        let evals = evaluate(&model(vocab.len()), &vocab, &data, Split::Val).unwrap();
        assert!(evals.iter().all(|e| e.length_normalized_correct.is_some() && e.exact_faithfulness.is_none()));
        let agg = aggregate(&evals, None).unwrap();
        let acc = agg.length_normalized_accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn single_class_spans_yield_no_classifier() {
        let span = |label| LookbackFeatures {
            span_id: 0,
            ratios: vec![0.5],
            label: Some(label),
        };
        let mut e = ExampleEval {
            id: 0,
            generated: vec![],
            rouge_l: RougeScore::default(),
            exact_faithfulness: Some(1.0),
            malformed: false,
            mean_entropy: 0.0,
            length_normalized_correct: None,
            spans: vec![span(true), span(true)],
        };
        assert!(fit_span_classifier(std::slice::from_ref(&e)).unwrap().is_none());
        e.spans.push(span(false));
        assert!(fit_span_classifier(&[e]).unwrap().is_some());
    }
}
