use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// ROUGE-L precision, recall and F1 (β = 1).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Longest common subsequence length by the standard two-row dynamic program.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `P = LCS/|candidate|`, `R = LCS/|reference|`; an empty candidate scores 0.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<RougeScore> {
    if reference.is_empty() {
        return invalid("ROUGE-L needs a non-empty reference");
    }
    if candidate.is_empty() {
        return Ok(RougeScore::default());
    }
    let lcs = lcs_length(candidate, reference) as f64;
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(RougeScore {
        precision,
        recall,
        f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Is `a` a subsequence of `b`?
    fn is_subsequence(a: &[u8], b: &[u8]) -> bool {
        let mut it = b.iter();
        a.iter().all(|x| it.any(|y| y == x))
    }

    /// Longest subsequence of `a` (tried by bitmask) that is also one of `b`.
    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        (0u32..1 << a.len())
            .filter_map(|mask| {
                let sub: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
                is_subsequence(&sub, b).then_some(sub.len())
            })
            .max()
            .unwrap_or(0)
    }

    fn all_sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for c in 0..alphabet {
                    let mut t: Vec<u8> = s.clone();
                    t.push(c);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn examples() {
        let a: Vec<char> = "AGGTAB".chars().collect();
        let b: Vec<char> = "GXTXAYB".chars().collect();
        assert_eq!(lcs_length(&a, &b), 4);
        assert_eq!(lcs_length(&[1, 2, 3], &[1, 2, 3]), 3);
        assert_eq!(lcs_length(&[1, 2], &[3, 4]), 0);

        let s = rouge_l(&["a", "b", "c"], &["a", "b", "c"]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = rouge_l(&["a", "b", "c"], &["a", "c", "d"]).unwrap();
        assert_eq!((s.precision, s.recall), (2.0 / 3.0, 2.0 / 3.0));
        assert!((s.f1 - 0.6667).abs() < 1e-4);
        assert_eq!(rouge_l::<u8>(&[], &[1]).unwrap(), RougeScore::default());
        assert!(rouge_l::<u8>(&[1], &[]).is_err());
    }

    #[test]
    fn lcs_matches_exhaustive_search_on_short_sequences() {
        // Lengths up to 5 over 3 symbols keep the unit test quick; the
        // acceptance suite covers lengths up to 7.
        let seqs = all_sequences(5, 3);
        for a in &seqs {
            for b in seqs.iter().step_by(7) {
                let l = lcs_length(a, b);
                assert_eq!(l, brute_lcs(a, b), "{a:?} {b:?}");
                assert_eq!(l == a.len(), is_subsequence(a, b));
            }
        }
    }

    proptest! {
        #[test]
        fn f1_is_symmetric(a in prop::collection::vec(0u8..4, 1..20), b in prop::collection::vec(0u8..4, 1..20)) {
            let ab = rouge_l(&a, &b).unwrap();
            let ba = rouge_l(&b, &a).unwrap();
            prop_assert_eq!(ab.precision, ba.recall);
            prop_assert_eq!(ab.recall, ba.precision);
            prop_assert!((ab.f1 - ba.f1).abs() < 1e-15);
            for v in [ab.precision, ab.recall, ab.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn lcs_bounded_by_shorter(a in prop::collection::vec(0u8..3, 0..30), b in prop::collection::vec(0u8..3, 0..30)) {
            let l = lcs_length(&a, &b);
            prop_assert!(l <= a.len().min(b.len()));
            prop_assert_eq!(l, lcs_length(&b, &a));
        }
    }
}
