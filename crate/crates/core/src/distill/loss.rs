//! Hard-label, soft-label and combined next-token losses.
//!
//! Both terms average over the masked positions only, and the same mask is
//! used for both so that `alpha = 0` reduces the combined loss to the
//! supervised loss bit for bit.

use crate::error::{invalid, Result};
use crate::tensor::kernels;
use crate::tensor::{Tape, Tensor, Var};

fn masked_rows(mask: &[bool]) -> Result<Vec<usize>> {
    let rows: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return invalid("loss mask selects no positions");
    }
    Ok(rows)
}

/// Records the mean masked cross-entropy against one-hot `labels`.
pub fn supervised_loss_on_tape(
    tape: &mut Tape<'_>,
    logits: Var,
    labels: &[usize],
    mask: &[bool],
) -> Result<Var> {
    let (t_len, vocab) = dims(tape, logits)?;
    if labels.len() != t_len || mask.len() != t_len {
        return invalid(format!(
            "labels ({}) and mask ({}) must have one entry per logits row ({t_len})",
            labels.len(),
            mask.len()
        ));
    }
    let rows = masked_rows(mask)?;
    let mut targets = vec![0.0; rows.len() * vocab];
    for (k, &r) in rows.iter().enumerate() {
        if labels[r] >= vocab {
            return invalid(format!("label {} out of range for vocab {vocab}", labels[r]));
        }
        targets[k * vocab + labels[r]] = 1.0;
    }
    let w = vec![1.0 / rows.len() as f64; rows.len()];
    tape.softmax_cross_entropy(logits, &rows, targets, &w)
}

/// Records the mean masked cross-entropy against teacher distributions.
///
/// `teacher_probs` holds one probability row per masked position, in
/// position order.
pub fn kd_loss_on_tape(
    tape: &mut Tape<'_>,
    logits: Var,
    teacher_probs: Vec<f64>,
    mask: &[bool],
) -> Result<Var> {
    let (t_len, vocab) = dims(tape, logits)?;
    if mask.len() != t_len {
        return invalid("mask must have one entry per logits row");
    }
    let rows = masked_rows(mask)?;
    if teacher_probs.len() != rows.len() * vocab {
        return invalid(format!(
            "expected {} teacher rows of width {vocab}",
            rows.len()
        ));
    }
    let w = vec![1.0 / rows.len() as f64; rows.len()];
    tape.softmax_cross_entropy(logits, &rows, teacher_probs, &w)
}

/// Teacher softmax rows at the masked positions, for [`kd_loss_on_tape`].
pub fn teacher_targets(teacher_logits: &[f64], vocab: usize, mask: &[bool]) -> Vec<f64> {
    let mut out = Vec::new();
    for (r, &m) in mask.iter().enumerate() {
        if m {
            let mut p = vec![0.0; vocab];
            kernels::softmax_into(&teacher_logits[r * vocab..(r + 1) * vocab], &mut p);
            out.extend(p);
        }
    }
    out
}

fn dims(tape: &Tape<'_>, v: Var) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [r, c] => Ok((*r, *c)),
        s => invalid(format!("logits must be a matrix, got shape {s:?}")),
    }
}

fn logits_dims(logits: &Tensor) -> Result<(usize, usize)> {
    match logits.shape() {
        [r, c] => Ok((*r, *c)),
        s => invalid(format!("logits must be a matrix, got shape {s:?}")),
    }
}

/// Mean over masked positions of `CE(softmax(logits[t]), onehot(labels[t]))`.
pub fn supervised_loss(student_logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<f64> {
    logits_dims(student_logits)?;
    let mut tape = Tape::no_grad();
    let z = tape.constant(student_logits.shape().to_vec(), student_logits.data().to_vec())?;
    let l = supervised_loss_on_tape(&mut tape, z, labels, mask)?;
    Ok(tape.scalar(l))
}

/// Mean over masked positions of `CE(softmax(student[t]), softmax(teacher[t]))`.
pub fn kd_loss(student_logits: &Tensor, teacher_logits: &Tensor, mask: &[bool]) -> Result<f64> {
    let (_, vocab) = logits_dims(student_logits)?;
    if student_logits.shape() != teacher_logits.shape() {
        return invalid(format!(
            "student logits {:?} and teacher logits {:?} differ in shape",
            student_logits.shape(),
            teacher_logits.shape()
        ));
    }
    let mut tape = Tape::no_grad();
    let z = tape.constant(student_logits.shape().to_vec(), student_logits.data().to_vec())?;
    let targets = teacher_targets(teacher_logits.data(), vocab, mask);
    let l = kd_loss_on_tape(&mut tape, z, targets, mask)?;
    Ok(tape.scalar(l))
}

/// `supervised + alpha * kd`; with `alpha == 0` the supervised value is
/// returned unchanged.
pub fn combined_loss(
    student_logits: &Tensor,
    labels: &[usize],
    teacher_logits: &Tensor,
    mask: &[bool],
    alpha: f64,
) -> Result<f64> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return invalid(format!("alpha must be a finite non-negative number, got {alpha}"));
    }
    let sup = supervised_loss(student_logits, labels, mask)?;
    let kd = kd_loss(student_logits, teacher_logits, mask)?;
    Ok(combine(sup, kd, alpha))
}

pub(crate) fn combine(sup: f64, kd: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        sup
    } else {
        sup + alpha * kd
    }
}
