use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{Tape, Var};

/// Attention rows captured during a forward pass or a greedy decode.
///
/// `steps()[s][layer][head]` is the causal attention row of the query
/// position handled at step `s`; it covers every position up to and including
/// that query, so row lengths grow by one per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    context_len: usize,
    n_layers: usize,
    n_heads: usize,
    steps: Vec<Vec<Vec<Vec<f64>>>>,
}

impl AttentionTrace {
    pub fn new(context_len: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            context_len,
            n_layers,
            n_heads,
            steps: Vec::new(),
        }
    }

    /// Builds a trace from explicit rows; validates shape and normalization.
    pub fn from_steps(context_len: usize, steps: Vec<Vec<Vec<Vec<f64>>>>) -> Result<Self> {
        let n_layers = steps.first().map_or(0, Vec::len);
        let n_heads = steps.first().and_then(|s| s.first()).map_or(0, Vec::len);
        let trace = Self {
            context_len,
            n_layers,
            n_heads,
            steps,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub(crate) fn from_forward(
        tape: &Tape<'_>,
        attention: &[Vec<Var>],
        seq_len: usize,
        context_len: usize,
    ) -> Result<Self> {
        let n_heads = attention.first().map_or(0, Vec::len);
        let mut trace = Self::new(context_len, attention.len(), n_heads);
        for t in 0..seq_len {
            trace.steps.push(rows_at(tape, attention, seq_len, t));
        }
        Ok(trace)
    }

    pub(crate) fn push_last_rows(
        &mut self,
        tape: &Tape<'_>,
        attention: &[Vec<Var>],
        seq_len: usize,
    ) -> Result<()> {
        if attention.len() != self.n_layers {
            return invalid("attention layer count changed between steps");
        }
        self.steps.push(rows_at(tape, attention, seq_len, seq_len - 1));
        Ok(())
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn set_context_len(&mut self, context_len: usize) {
        self.context_len = context_len;
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn steps(&self) -> &[Vec<Vec<Vec<f64>>>] {
        &self.steps
    }

    pub fn row(&self, step: usize, layer: usize, head: usize) -> Option<&[f64]> {
        self.steps
            .get(step)
            .and_then(|s| s.get(layer))
            .and_then(|l| l.get(head))
            .map(Vec::as_slice)
    }

    /// Checks that rows sum to one and grow by exactly one position per step.
    pub fn validate(&self) -> Result<()> {
        let mut prev_len: Option<usize> = None;
        for (s, step) in self.steps.iter().enumerate() {
            if step.len() != self.n_layers || step.iter().any(|l| l.len() != self.n_heads) {
                return invalid(format!("step {s} has inconsistent layer/head counts"));
            }
            let len = step[0][0].len();
            if let Some(p) = prev_len {
                if len != p + 1 {
                    return invalid(format!("step {s} row length {len} does not follow {p}"));
                }
            }
            prev_len = Some(len);
            for row in step.iter().flatten() {
                if row.len() != len {
                    return invalid(format!("step {s} has rows of different lengths"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&a| a < 0.0) {
                    return invalid(format!("step {s} has an attention row summing to {sum}"));
                }
            }
        }
        Ok(())
    }
}

fn rows_at(tape: &Tape<'_>, attention: &[Vec<Var>], n: usize, t: usize) -> Vec<Vec<Vec<f64>>> {
    attention
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|&v| tape.value(v)[t * n..t * n + t + 1].to_vec())
                .collect()
        })
        .collect()
}
