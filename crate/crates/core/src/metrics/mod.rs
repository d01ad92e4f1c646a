//! Measurement stack for generations and predictions.
//!
//! * ROUGE-L over content tokens.
//! * Exact faithfulness against the fact bindings in the context.
//! * Lookback-ratio span features and a logistic factual classifier, giving
//!   the factual rate of generated answer slots.
//! * Length-normalized multiple-choice accuracy.
//! * NLL of wrong answers with histogram and kernel-density summaries.
//! * Predictive entropy.

mod eval;
mod lookback;
mod overconfidence;
mod rouge;
mod scores;

pub use eval::{
    aggregate, evaluate, evaluate_example, fit_span_classifier, Aggregate, ExampleEval, CLASSIFIER_ITERATIONS,
    CLASSIFIER_L2,
};
pub use lookback::{
    classifier_objective, extract_span_features, factual_rate, lookback_ratio, train_factual_classifier,
    FactualClassifier, LookbackFeatures,
};
pub use overconfidence::{
    overconfidence_report, silverman_bandwidth, DensityCurve, Histogram, OverconfidenceReport, HISTOGRAM_BINS,
};
pub use rouge::{lcs_length, rouge_l, RougeScore};
pub use scores::{
    answer_nll, answer_slots, context_bindings, entropy, entropy_of_logits, exact_faithfulness,
    length_normalized_accuracy, length_normalized_choice, slot_correctness, Faithfulness,
};
