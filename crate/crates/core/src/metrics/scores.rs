use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{ANS, CTX, EOS, SEP};
use crate::error::{invalid, Result};
use crate::tensor::{kernels, PROB_FLOOR};

/// Exact-faithfulness score of one response.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Faithfulness {
    pub score: f64,
    /// The response had no `ANS` marker and was scored 0.
    pub malformed: bool,
}

/// `(entity, value)` bindings rendered as `CTX e SEP v` in a context.
pub fn context_bindings(context: &[usize]) -> Vec<(usize, usize)> {
    context
        .windows(4)
        .filter(|w| w[0] == CTX && w[2] == SEP)
        .map(|w| (w[1], w[3]))
        .collect()
}

/// Value tokens emitted after the first `ANS`, up to `EOS`; `None` without an
/// `ANS` marker.
pub fn answer_slots(response: &[usize]) -> Option<&[usize]> {
    let start = response.iter().position(|&t| t == ANS)? + 1;
    let rest = &response[start..];
    let end = rest.iter().position(|&t| t == EOS).unwrap_or(rest.len());
    Some(&rest[..end])
}

/// Per-slot correctness: slot `k` must carry the value the context binds to
/// the `k`-th queried entity.
pub fn slot_correctness(response: &[usize], context: &[usize], gold_bindings: &[(usize, usize)]) -> Option<Vec<bool>> {
    let slots = answer_slots(response)?;
    let bindings = context_bindings(context);
    Some(
        slots
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                gold_bindings.get(k).is_some_and(|&(e, _)| {
                    bindings.iter().any(|&(ce, cv)| ce == e && cv == v)
                })
            })
            .collect(),
    )
}

/// Fraction of answer slots holding the queried entity's context value.
///
/// The denominator is the larger of the number of queried entities and the
/// number of emitted slots, so both missing and surplus values count against
/// the response.
pub fn exact_faithfulness(
    response: &[usize],
    context: &[usize],
    gold_bindings: &[(usize, usize)],
) -> Result<Faithfulness> {
    if gold_bindings.is_empty() {
        return invalid("exact faithfulness needs at least one queried entity");
    }
    let Some(correct) = slot_correctness(response, context, gold_bindings) else {
        return Ok(Faithfulness {
            score: 0.0,
            malformed: true,
        });
    };
    let hits = correct.iter().filter(|&&c| c).count();
    Ok(Faithfulness {
        score: hits as f64 / gold_bindings.len().max(correct.len()) as f64,
        malformed: false,
    })
}

/// Index of the choice with the highest `log-prob sum / character length`;
/// ties resolve to the lowest index.
pub fn length_normalized_choice(choices: &[(f64, usize)]) -> Result<usize> {
    if choices.len() < 2 {
        return invalid("length-normalized scoring needs at least two choices");
    }
    if choices.iter().any(|&(_, len)| len == 0) {
        return invalid("completion with zero characters");
    }
    let mut best = 0;
    let score = |(lp, len): (f64, usize)| lp / len as f64;
    for i in 1..choices.len() {
        if score(choices[i]) > score(choices[best]) {
            best = i;
        }
    }
    Ok(best)
}

/// Whether the length-normalized choice is the gold one.
pub fn length_normalized_accuracy(choices: &[(f64, usize)], gold_index: usize) -> Result<bool> {
    if gold_index >= choices.len() {
        return invalid(format!("gold index {gold_index} out of {} choices", choices.len()));
    }
    Ok(length_normalized_choice(choices)? == gold_index)
}

/// `-ln softmax(logits_row)[answer_token]`, with the probability floored.
pub fn answer_nll(logits_row: &[f64], answer_token: usize) -> Result<f64> {
    if answer_token >= logits_row.len() {
        return invalid(format!(
            "answer token {answer_token} out of range for {} logits",
            logits_row.len()
        ));
    }
    if logits_row.iter().any(|x| !x.is_finite()) {
        return invalid("logits contain non-finite values");
    }
    let (logp, _) = kernels::log_softmax(logits_row);
    Ok((-logp[answer_token]).min(-PROB_FLOOR.ln()))
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return invalid("entropy of an empty distribution");
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return invalid("probabilities must be finite and non-negative");
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return invalid(format!("probabilities sum to {s}, expected 1"));
    }
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>())
}

/// Entropy of `softmax(logits)`.
pub fn entropy_of_logits(logits: &[f64]) -> f64 {
    let (logp, p) = kernels::log_softmax(logits);
    -p.iter().zip(&logp).filter(|(&q, _)| q > 0.0).map(|(q, l)| q * l).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::{QRY, Vocabulary};
    use proptest::prelude::*;

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((entropy(&[0.5, 0.25, 0.25]).unwrap() - 1.5 * 2f64.ln()).abs() < 1e-15);
        assert!((entropy(&[0.5, 0.25, 0.25]).unwrap() - 1.0397).abs() < 1e-4);
        assert!(entropy(&[-0.1, 1.1]).is_err());
        assert!(entropy(&[0.3, 0.3]).is_err());
    }

    #[test]
    fn answer_nll_examples() {
        assert_eq!(answer_nll(&[900.0, 0.0, 0.0], 0).unwrap(), 0.0);
        assert!((answer_nll(&[0.3; 5], 2).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!((answer_nll(&[1.0, 1.0, -800.0], 1).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((answer_nll(&[0.0, -900.0], 1).unwrap() + PROB_FLOOR.ln()).abs() < 1e-12);
        assert!(answer_nll(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn length_normalized_examples() {
        assert_eq!(length_normalized_choice(&[(-2.0, 4), (-10.0, 4)]).unwrap(), 0);
        // Raw sums favour index 0; per-character scores -2.0 and -0.5 favour 1.
        assert_eq!(length_normalized_choice(&[(-4.0, 2), (-4.5, 9)]).unwrap(), 1);
        assert_eq!(length_normalized_choice(&[(-1.0, 3), (-1.0, 3), (-1.0, 3)]).unwrap(), 0);
        assert!(length_normalized_accuracy(&[(-4.0, 2), (-4.5, 9)], 1).unwrap());
        assert!(length_normalized_choice(&[(-1.0, 0), (-1.0, 3)]).is_err());
        assert!(length_normalized_choice(&[(-1.0, 3)]).is_err());
    }

    #[test]
    fn faithfulness_examples() {
        let v = Vocabulary::new(4, 6);
        let (e, val) = (|i| v.entity(i), |j| v.value(j));
        // e0 -> v0, e1 -> v1 queried; e2 -> v2 is a distractor.
        let context = vec![CTX, e(0), SEP, val(0), CTX, e(2), SEP, val(2), CTX, e(1), SEP, val(1)];
        let gold = [(e(0), val(0)), (e(1), val(1))];
        let score = |r: &[usize]| exact_faithfulness(r, &context, &gold).unwrap();

        assert_eq!(score(&[ANS, val(0), val(1), EOS]).score, 1.0);
        assert_eq!(score(&[ANS, val(0), val(5), EOS]).score, 0.5);
        assert_eq!(score(&[ANS, val(2), val(1), EOS]).score, 0.5);
        assert_eq!(score(&[ANS, val(0)]).score, 0.5);
        assert_eq!(score(&[ANS, val(0), val(1), val(1), EOS]).score, 2.0 / 3.0);
        let bad = score(&[QRY, val(0), val(1), EOS]);
        assert!(bad.malformed);
        assert_eq!(bad.score, 0.0);
        assert!(exact_faithfulness(&[ANS], &context, &[]).is_err());
    }

    proptest! {
        #[test]
        fn entropy_bounded_by_log_len(raw in prop::collection::vec(0.0f64..1.0, 1..20)) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 1e-3);
            let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let h = entropy(&p).unwrap();
            let max = (p.len() as f64).ln();
            prop_assert!(h >= 0.0 && h <= max + 1e-9);
            let spread = p.iter().fold(0.0f64, |m, &x| m.max((x - 1.0 / p.len() as f64).abs()));
            if spread > 1e-3 {
                prop_assert!(h < max - 1e-9);
            }
        }

        #[test]
        fn answer_nll_decreases_with_answer_logit(
            z in prop::collection::vec(-5.0f64..5.0, 2..10),
            k in 0usize..10,
            bump in 0.01f64..3.0,
        ) {
            let k = k % z.len();
            let before = answer_nll(&z, k).unwrap();
            let mut up = z.clone();
            up[k] += bump;
            let after = answer_nll(&up, k).unwrap();
            prop_assert!(before >= 0.0 && after >= 0.0);
            prop_assert!(after < before);
        }
    }

    #[test]
    fn gold_responses_are_fully_faithful() {
        use crate::corpus::{generate, CorpusSpec, TaskTag};
        let spec = CorpusSpec {
            task: TaskTag::FactTable,
            n_examples: 200,
            n_entities: 12,
            n_values: 12,
            facts_per_context: 5,
            queried_facts: 2,
            distractor_count: 2,
            seed: 5,
            n_choices: None,
            max_seq_len: 36,
        };
        for e in generate(&spec).unwrap().examples {
            let f = exact_faithfulness(&e.response, &e.context, &e.gold_bindings).unwrap();
            assert_eq!(f.score, 1.0, "example {}", e.id);
            assert!(!f.malformed);
        }
    }
}
