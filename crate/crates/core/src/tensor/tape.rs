//! Reverse-mode differentiation over a linear (Wengert) tape.
//!
//! Operations append nodes in execution order, so every node's inputs have
//! smaller ids than the node itself. `backward` walks the tape in reverse.

use std::borrow::Cow;

use super::kernels;
use super::{Tensor, PROB_FLOOR};
use crate::error::{invalid, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// `a [m x k] * b[n x k]^T`
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var, cols: usize },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Gelu { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather { table: Var, ids: Vec<usize>, cols: usize },
    SliceCols { x: Var, cols: usize, start: usize, width: usize },
    ConcatCols { parts: Vec<(Var, usize)>, cols: usize },
    CausalSoftmax { x: Var, n: usize },
    SoftmaxCrossEntropy {
        logits: Var,
        cols: usize,
        rows: Vec<usize>,
        targets: Vec<f64>,
        weights: Vec<f64>,
        logp: Vec<f64>,
    },
    Sum { a: Var },
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass.
///
/// A tape is single-owner; run one tape per worker when evaluating in parallel.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    recording: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates values only; `backward` on it is an error.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.recording
            && match op {
                Op::Param => true,
                Op::Constant => false,
                _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
            };
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        match self.nodes[v.0].shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    /// Registers a trainable tensor; its data is borrowed, not copied.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Param,
            &[],
        )
    }

    /// Registers an owned leaf that receives gradients (used for gradient checks).
    pub fn param_owned(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        check_len(&shape, data.len())?;
        Ok(self.push(Cow::Owned(data), shape, Op::Param, &[]))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        check_len(&shape, data.len())?;
        Ok(self.push(Cow::Owned(data), shape, Op::Constant, &[]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return invalid(format!("matmul inner dimensions disagree: {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return invalid(format!("matmul_nt inner dimensions disagree: {k} vs {k2}"));
        }
        let bt = kernels::transpose(self.value(b), n, k);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), &bt, &mut out, m, k, n);
        Ok(self.push(Cow::Owned(out), vec![m, n], Op::MatMulNt { a, b, m, k, n }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return invalid(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.dims2(x);
        if self.value(bias).len() != cols {
            return invalid(format!(
                "bias length {} does not match {cols} columns",
                self.value(bias).len()
            ));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::AddBias { x, bias, cols }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return invalid(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Scale { a, c }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Gelu { a }, &[a])
    }

    /// Row-wise layer norm over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return invalid("layer_norm gamma/beta length must match the row width");
        }
        if !(eps > 0.0) {
            return invalid("layer_norm eps must be positive");
        }
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            rstd[r] = kernels::layer_norm_row(
                &xv[span.clone()],
                g,
                b,
                eps,
                &mut out[span.clone()],
                &mut xhat[span],
            );
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::LayerNorm { x, gamma, beta, cols, xhat, rstd },
            &[x, gamma, beta],
        ))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table);
        if ids.is_empty() {
            return invalid("gather of zero rows");
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        let t = self.value(table);
        for &id in ids {
            if id >= rows {
                return invalid(format!("row index {id} out of range for {rows} rows"));
            }
            out.extend_from_slice(&t[id * cols..(id + 1) * cols]);
        }
        Ok(self.push(
            Cow::Owned(out),
            vec![ids.len(), cols],
            Op::Gather { table, ids: ids.to_vec(), cols },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        if width == 0 || start + width > cols {
            return invalid(format!("column slice {start}..{} out of {cols}", start + width));
        }
        let out: Vec<f64> = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        Ok(self.push(
            Cow::Owned(out),
            vec![rows, width],
            Op::SliceCols { x, cols, start, width },
            &[x],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat of zero parts");
        }
        let rows = self.dims2(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p);
            if r != rows {
                return invalid("concat_cols parts must share a row count");
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let spec = parts.iter().copied().zip(widths).collect();
        Ok(self.push(
            Cow::Owned(out),
            vec![rows, cols],
            Op::ConcatCols { parts: spec, cols },
            parts,
        ))
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x);
        if rows != cols {
            return invalid(format!("causal softmax needs a square matrix, got {rows}x{cols}"));
        }
        let n = rows;
        let mut out = vec![0.0; n * n];
        let xv = self.value(x);
        for i in 0..n {
            kernels::softmax_into(&xv[i * n..i * n + i + 1], &mut out[i * n..i * n + i + 1]);
        }
        Ok(self.push(Cow::Owned(out), vec![n, n], Op::CausalSoftmax { x, n }, &[x]))
    }

    /// Weighted sum over selected rows of `CE(softmax(logits[row]), target)`.
    ///
    /// `targets` holds one probability row per entry of `rows`. Log
    /// probabilities are floored at `ln(PROB_FLOOR)`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        rows: &[usize],
        targets: Vec<f64>,
        weights: &[f64],
    ) -> Result<Var> {
        let (n_rows, cols) = self.dims2(logits);
        if rows.len() != weights.len() || targets.len() != rows.len() * cols {
            return invalid("softmax_cross_entropy: rows, weights and targets disagree");
        }
        let floor = PROB_FLOOR.ln();
        let mut logp = Vec::with_capacity(rows.len() * cols);
        let mut total = 0.0;
        for (k, &r) in rows.iter().enumerate() {
            if r >= n_rows {
                return invalid(format!("row {r} out of range for {n_rows} rows"));
            }
            let (lp, _) = kernels::log_softmax(&self.value(logits)[r * cols..(r + 1) * cols]);
            let t = &targets[k * cols..(k + 1) * cols];
            let mut ce = 0.0;
            for (&l, &tv) in lp.iter().zip(t) {
                if tv > 0.0 {
                    ce -= tv * l.max(floor);
                }
            }
            total += weights[k] * ce;
            logp.extend(lp);
        }
        Ok(self.push(
            Cow::Owned(vec![total]),
            vec![1],
            Op::SoftmaxCrossEntropy {
                logits,
                cols,
                rows: rows.to_vec(),
                targets,
                weights: weights.to_vec(),
                logp,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum { a }, &[a])
    }

    /// Computes `d loss / d node` for every node that depends on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return invalid("backward on a tape created with no_grad");
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            self.backprop_node(node, g, lo);
            if !matches!(node.op, Op::Param) {
                hi[0] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'_>, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        // Accumulates into the gradient slot of `v`, creating it on first use.
        macro_rules! acc {
            ($v:expr, $d:ident => $body:expr) => {{
                let v: Var = $v;
                let mut buf = lo[v.0]
                    .take()
                    .unwrap_or_else(|| vec![0.0; nodes[v.0].value.len()]);
                {
                    let $d: &mut [f64] = &mut buf;
                    $body;
                }
                lo[v.0] = Some(buf);
            }};
        }
        match &node.op {
            Op::Constant | Op::Param => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let bt = kernels::transpose(self.value(b), k, n);
                    acc!(a, d => kernels::matmul_acc(g, &bt, d, m, n, k));
                }
                if wants(b) {
                    acc!(b, d => kernels::matmul_tn_acc(self.value(a), g, d, m, k, n));
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if wants(a) {
                    acc!(a, d => kernels::matmul_acc(g, self.value(b), d, m, n, k));
                }
                if wants(b) {
                    acc!(b, d => kernels::matmul_tn_acc(g, self.value(a), d, m, n, k));
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if wants(v) {
                        acc!(v, d => add_into(d, g));
                    }
                }
            }
            &Op::AddBias { x, bias, cols } => {
                if wants(x) {
                    acc!(x, d => add_into(d, g));
                }
                if wants(bias) {
                    acc!(bias, db => {
                        for row in g.chunks(cols) {
                            add_into(db, row);
                        }
                    });
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    let bv = self.value(b);
                    acc!(a, buf => {
                        for ((d, &gv), &y) in buf.iter_mut().zip(g).zip(bv) {
                            *d += gv * y;
                        }
                    });
                }
                if wants(b) {
                    let av = self.value(a);
                    acc!(b, buf => {
                        for ((d, &gv), &y) in buf.iter_mut().zip(g).zip(av) {
                            *d += gv * y;
                        }
                    });
                }
            }
            &Op::Scale { a, c } => {
                if wants(a) {
                    acc!(a, buf => {
                        for (d, &gv) in buf.iter_mut().zip(g) {
                            *d += c * gv;
                        }
                    });
                }
            }
            &Op::Gelu { a } => {
                if wants(a) {
                    let xv = self.value(a);
                    acc!(a, buf => {
                        for ((d, &gv), &x) in buf.iter_mut().zip(g).zip(xv) {
                            *d += gv * kernels::gelu_grad(x);
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, cols, xhat, rstd } => {
                let (x, gamma, beta, cols) = (*x, *gamma, *beta, *cols);
                if wants(beta) {
                    acc!(beta, db => {
                        for row in g.chunks(cols) {
                            add_into(db, row);
                        }
                    });
                }
                if wants(gamma) {
                    acc!(gamma, dg => {
                        for (row, xh) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for ((d, &gv), &h) in dg.iter_mut().zip(row).zip(xh) {
                                *d += gv * h;
                            }
                        }
                    });
                }
                if wants(x) {
                    let gam = self.value(gamma);
                    acc!(x, dx => {
                        let n = cols as f64;
                        let mut dxhat = vec![0.0; cols];
                        for (r, (row, xh)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..cols {
                                dxhat[c] = row[c] * gam[c];
                                mean_d += dxhat[c];
                                mean_dx += dxhat[c] * xh[c];
                            }
                            mean_d /= n;
                            mean_dx /= n;
                            let out = &mut dx[r * cols..(r + 1) * cols];
                            for c in 0..cols {
                                out[c] += rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                            }
                        }
                    });
                }
            }
            Op::Gather { table, ids, cols } => {
                let (table, cols) = (*table, *cols);
                if wants(table) {
                    acc!(table, dt => {
                        for (row, &id) in g.chunks(cols).zip(ids) {
                            add_into(&mut dt[id * cols..(id + 1) * cols], row);
                        }
                    });
                }
            }
            &Op::SliceCols { x, cols, start, width } => {
                if wants(x) {
                    acc!(x, dx => {
                        for (r, row) in g.chunks(width).enumerate() {
                            add_into(&mut dx[r * cols + start..r * cols + start + width], row);
                        }
                    });
                }
            }
            Op::ConcatCols { parts, cols } => {
                let mut offset = 0;
                for &(p, w) in parts {
                    if wants(p) {
                        acc!(p, dp => {
                            for (r, row) in g.chunks(*cols).enumerate() {
                                add_into(&mut dp[r * w..(r + 1) * w], &row[offset..offset + w]);
                            }
                        });
                    }
                    offset += w;
                }
            }
            &Op::CausalSoftmax { x, n } => {
                if wants(x) {
                    let y = &node.value;
                    acc!(x, dx => {
                        for i in 0..n {
                            let yr = &y[i * n..i * n + i + 1];
                            let gr = &g[i * n..i * n + i + 1];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..=i {
                                dx[i * n + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::SoftmaxCrossEntropy { logits, cols, rows, targets, weights, logp } => {
                let (logits, cols) = (*logits, *cols);
                if wants(logits) {
                    let floor = PROB_FLOOR.ln();
                    acc!(logits, dz => {
                        for (k, &r) in rows.iter().enumerate() {
                            let w = weights[k] * g[0];
                            let lp = &logp[k * cols..(k + 1) * cols];
                            let t = &targets[k * cols..(k + 1) * cols];
                            let mass: f64 = lp
                                .iter()
                                .zip(t)
                                .filter(|(l, _)| **l > floor)
                                .map(|(_, tv)| tv)
                                .sum();
                            let out = &mut dz[r * cols..(r + 1) * cols];
                            for c in 0..cols {
                                let active = if lp[c] > floor { t[c] } else { 0.0 };
                                out[c] += w * (lp[c].exp() * mass - active);
                            }
                        }
                    });
                }
            }
            &Op::Sum { a } => {
                if wants(a) {
                    acc!(a, buf => {
                        for d in buf.iter_mut() {
                            *d += g[0];
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len || shape.contains(&0) {
        return invalid(format!("shape {shape:?} does not hold {len} elements"));
    }
    Ok(())
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a parameter node, if the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled when the loss does not reach it.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }

    pub fn take(&mut self, v: Var, len: usize) -> Vec<f64> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| vec![0.0; len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_gradient, softmax};
    use rand::{Rng, SeedableRng};

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Builds a scalar from `inputs` on a fresh tape and checks its gradient
    /// against central differences.
    fn check<F>(shapes: &[Vec<usize>], seed: u64, build: F)
    where
        F: Fn(&mut Tape<'_>, &[Var]) -> Var,
    {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| (0..s.iter().product::<usize>()).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(&data)
            .map(|(s, d)| tape.param_owned(s.clone(), d.clone()).unwrap())
            .collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        for (idx, d) in data.iter().enumerate() {
            let analytic = grads.wrt(vars[idx], d.len());
            let numeric = finite_difference_gradient(
                |x: &[f64]| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = shapes
                        .iter()
                        .zip(&data)
                        .enumerate()
                        .map(|(j, (s, dd))| {
                            let v = if j == idx { x.to_vec() } else { dd.clone() };
                            t.param_owned(s.clone(), v).unwrap()
                        })
                        .collect();
                    let o = build(&mut t, &vs);
                    Ok::<_, ()>(t.scalar(o))
                },
                d,
                1e-4,
            )
            .unwrap();
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(rel_err(*a, *n) < 1e-4, "input {idx}: analytic {a} numeric {n}");
            }
        }
    }

    /// Reduces any node to a scalar with fixed random-looking weights so
    /// every output entry gets a distinct upstream gradient.
    fn weighted_sum(t: &mut Tape<'_>, v: Var) -> Var {
        let n = t.value(v).len();
        let shape = t.shape(v).to_vec();
        let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.731 + 0.3).sin()).collect();
        let c = t.constant(shape, w).unwrap();
        let p = t.mul(v, c).unwrap();
        t.sum(p)
    }

    #[test]
    fn square_has_gradient_six() {
        let mut t = Tape::new();
        let x = t.param_owned(vec![1], vec![3.0]).unwrap();
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softmax_ce_gradient_is_p_minus_y() {
        let z = vec![0.3, -1.1, 2.0, 0.7];
        let y = vec![0.0, 0.0, 1.0, 0.0];
        let mut t = Tape::new();
        let zv = t.param_owned(vec![1, 4], z.clone()).unwrap();
        let l = t.softmax_cross_entropy(zv, &[0], y.clone(), &[1.0]).unwrap();
        let g = t.backward(l).unwrap();
        let p = softmax(&z).unwrap();
        for i in 0..4 {
            assert!((g.get(zv).unwrap()[i] - (p[i] - y[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut t = Tape::new();
        let x = t.param_owned(vec![2], vec![1.0, 2.0]).unwrap();
        let y = t.scale(x, 2.0);
        assert!(t.backward(y).is_err());
        let mut nt = Tape::no_grad();
        let x = nt.constant(vec![1], vec![1.0]).unwrap();
        assert!(nt.backward(x).is_err());
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut t = Tape::new();
        let x = t.param_owned(vec![2], vec![1.0, 2.0]).unwrap();
        let unused = t.param_owned(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.sum(x);
        let g = t.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused, 3), vec![0.0; 3]);
    }

    #[test]
    fn gradcheck_matmul() {
        check(&[vec![3, 4], vec![4, 5]], 1, |t, v| {
            let o = t.matmul(v[0], v[1]).unwrap();
            weighted_sum(t, o)
        });
    }

    #[test]
    fn gradcheck_matmul_nt() {
        check(&[vec![3, 4], vec![5, 4]], 2, |t, v| {
            let o = t.matmul_nt(v[0], v[1]).unwrap();
            weighted_sum(t, o)
        });
    }

    #[test]
    fn gradcheck_bias_gelu_scale() {
        check(&[vec![3, 4], vec![4]], 3, |t, v| {
            let o = t.add_bias(v[0], v[1]).unwrap();
            let o = t.gelu(o);
            let o = t.scale(o, -0.7);
            weighted_sum(t, o)
        });
    }

    #[test]
    fn gradcheck_add_mul() {
        check(&[vec![2, 3], vec![2, 3]], 4, |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let o = t.mul(a, v[0]).unwrap();
            weighted_sum(t, o)
        });
    }

    #[test]
    fn gradcheck_layer_norm() {
        check(&[vec![3, 5], vec![5], vec![5]], 5, |t, v| {
            let o = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(t, o)
        });
    }

    #[test]
    fn gradcheck_gather_slice_concat() {
        check(&[vec![4, 6]], 6, |t, v| {
            let g = t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap();
            let a = t.slice_cols(g, 0, 2).unwrap();
            let b = t.slice_cols(g, 3, 3).unwrap();
            let o = t.concat_cols(&[b, a]).unwrap();
            weighted_sum(t, o)
        });
    }

    #[test]
    fn gradcheck_causal_softmax() {
        check(&[vec![4, 4]], 7, |t, v| {
            let o = t.causal_softmax(v[0]).unwrap();
            weighted_sum(t, o)
        });
    }

    #[test]
    fn gradcheck_softmax_cross_entropy_soft_targets() {
        let target = {
            let a = softmax(&[0.2, 1.0, -0.5, 0.1]).unwrap();
            let b = softmax(&[-1.0, 0.0, 0.5, 2.0]).unwrap();
            [a, b].concat()
        };
        check(&[vec![3, 4]], 8, move |t, v| {
            t.softmax_cross_entropy(v[0], &[0, 2], target.clone(), &[0.5, 0.5]).unwrap()
        });
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut t = Tape::new();
        let x = t.param_owned(vec![3, 3], (0..9).map(f64::from).collect()).unwrap();
        let p = t.causal_softmax(x).unwrap();
        let v = t.value(p);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        for i in 0..3 {
            let s: f64 = v[i * 3..i * 3 + 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.param_owned(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.param_owned(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(t.matmul(a, b).is_err());
        assert!(t.gather_rows(a, &[5]).is_err());
        assert!(t.slice_cols(a, 2, 2).is_err());
        assert!(t.causal_softmax(a).is_err());
        assert!(t.constant(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
