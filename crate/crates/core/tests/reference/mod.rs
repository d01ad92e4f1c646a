//! An independent double-double implementation of the transformer and its
//! losses, used as a high-precision central-difference oracle.
//!
//! In plain `f64` a central difference of an O(1) loss at `h = 1e-4` carries
//! about `ulp(loss) / 2h ≈ 1e-12` of rounding noise, which swamps gradients
//! near 1e-8. Evaluating the same function in double-double arithmetic leaves
//! only the truncation error of the difference itself.

#![allow(dead_code)]

use distill_lab::model::{ModelConfig, ModelParams, LAYER_NORM_EPS};
use twofloat::TwoFloat as T;

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn t(x: f64) -> T {
    T::from(x)
}

/// Which loss the oracle differentiates. Teacher rows are given per masked
/// position, as consumed by the training code.
pub enum Objective<'a> {
    Supervised {
        labels: &'a [usize],
        mask: &'a [bool],
    },
    Kd {
        teacher_probs: &'a [f64],
        mask: &'a [bool],
    },
    Combined {
        labels: &'a [usize],
        teacher_probs: &'a [f64],
        mask: &'a [bool],
        alpha: f64,
    },
}

pub struct Reference {
    config: ModelConfig,
    weights: Vec<Vec<T>>,
}

fn layer_norm(x: &[T], d: usize, gamma: &[T], beta: &[T]) -> Vec<T> {
    let mut out = vec![t(0.0); x.len()];
    for (r, row) in x.chunks(d).enumerate() {
        let mean = row.iter().fold(t(0.0), |a, &v| a + v) / d as f64;
        let var = row.iter().fold(t(0.0), |a, &v| a + (v - mean) * (v - mean)) / d as f64;
        let inv = (var + LAYER_NORM_EPS).sqrt().recip();
        for c in 0..d {
            out[r * d + c] = gamma[c] * (row[c] - mean) * inv + beta[c];
        }
    }
    out
}

/// `x [rows x d_in] · w [d_in x d_out] + b`
fn affine(x: &[T], rows: usize, d_in: usize, w: &[T], d_out: usize, b: &[T]) -> Vec<T> {
    let mut out = vec![t(0.0); rows * d_out];
    for r in 0..rows {
        for o in 0..d_out {
            let mut s = b[o];
            for i in 0..d_in {
                s += x[r * d_in + i] * w[i * d_out + o];
            }
            out[r * d_out + o] = s;
        }
    }
    out
}

fn log_softmax(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(z[0], |a, v| if v > a { v } else { a });
    let s = z.iter().fold(t(0.0), |a, &v| a + (v - m).exp());
    let l = s.ln();
    z.iter().map(|&v| v - m - l).collect()
}

impl Reference {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            config: params.config.clone(),
            weights: params
                .tensors()
                .iter()
                .map(|w| w.data().iter().map(|&v| t(v)).collect())
                .collect(),
        }
    }

    /// Next-token logits, row-major `[T x vocab]`.
    pub fn logits(&self, tokens: &[usize]) -> Vec<T> {
        let c = &self.config;
        let w = &self.weights;
        let (d, n, hd) = (c.d_model, tokens.len(), c.d_model / c.n_heads);
        let mut x = vec![t(0.0); n * d];
        for (p, &tok) in tokens.iter().enumerate() {
            for j in 0..d {
                x[p * d + j] = w[0][tok * d + j] + w[1][p * d + j];
            }
        }
        let scale = t(1.0) / t(hd as f64).sqrt();
        for l in 0..c.n_layers {
            let o = 2 + 16 * l;
            let h = layer_norm(&x, d, &w[o], &w[o + 1]);
            let q = affine(&h, n, d, &w[o + 2], d, &w[o + 3]);
            let k = affine(&h, n, d, &w[o + 4], d, &w[o + 5]);
            let v = affine(&h, n, d, &w[o + 6], d, &w[o + 7]);
            let mut merged = vec![t(0.0); n * d];
            for head in 0..c.n_heads {
                let col = head * hd;
                for i in 0..n {
                    let scores: Vec<T> = (0..=i)
                        .map(|j| {
                            let mut s = t(0.0);
                            for e in 0..hd {
                                s += q[i * d + col + e] * k[j * d + col + e];
                            }
                            s * scale
                        })
                        .collect();
                    let logp = log_softmax(&scores);
                    for j in 0..=i {
                        let a = logp[j].exp();
                        for e in 0..hd {
                            merged[i * d + col + e] += a * v[j * d + col + e];
                        }
                    }
                }
            }
            let attn = affine(&merged, n, d, &w[o + 8], d, &w[o + 9]);
            for i in 0..n * d {
                x[i] += attn[i];
            }
            let h2 = layer_norm(&x, d, &w[o + 10], &w[o + 11]);
            let mut f = affine(&h2, n, d, &w[o + 12], c.d_ff, &w[o + 13]);
            for u in f.iter_mut() {
                let a = *u;
                *u = 0.5 * a * (1.0 + (GELU_C * (a + 0.044715 * a * a * a)).tanh());
            }
            let f2 = affine(&f, n, c.d_ff, &w[o + 14], d, &w[o + 15]);
            for i in 0..n * d {
                x[i] += f2[i];
            }
        }
        let o = 2 + 16 * c.n_layers;
        let h = layer_norm(&x, d, &w[o], &w[o + 1]);
        let vs = c.vocab_size;
        let mut z = vec![t(0.0); n * vs];
        for i in 0..n {
            for tok in 0..vs {
                let mut s = t(0.0);
                for e in 0..d {
                    s += h[i * d + e] * w[0][tok * d + e];
                }
                z[i * vs + tok] = s;
            }
        }
        z
    }

    pub fn loss(&self, tokens: &[usize], objective: &Objective<'_>) -> T {
        let vs = self.config.vocab_size;
        let z = self.logits(tokens);
        let (labels, teacher, mask, alpha) = match *objective {
            Objective::Supervised { labels, mask } => (Some(labels), None, mask, 0.0),
            Objective::Kd { teacher_probs, mask } => (None, Some(teacher_probs), mask, 1.0),
            Objective::Combined {
                labels,
                teacher_probs,
                mask,
                alpha,
            } => (Some(labels), Some(teacher_probs), mask, alpha),
        };
        let n = mask.iter().filter(|&&m| m).count() as f64;
        let (mut sup, mut kd) = (t(0.0), t(0.0));
        let mut k = 0;
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let logp = log_softmax(&z[r * vs..(r + 1) * vs]);
            if let Some(labels) = labels {
                sup -= logp[labels[r]];
            }
            if let Some(tp) = teacher {
                for c in 0..vs {
                    kd -= logp[c] * tp[k * vs + c];
                }
            }
            k += 1;
        }
        match (labels.is_some(), teacher.is_some()) {
            (true, false) => sup / n,
            (false, true) => kd / n,
            _ => sup / n + alpha * (kd / n),
        }
    }

    /// Central differences `(L(w + h e_i) - L(w - h e_i)) / 2h` over every
    /// weight, in canonical flat order.
    pub fn central_difference(&mut self, tokens: &[usize], objective: &Objective<'_>, h: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for ti in 0..self.weights.len() {
            for j in 0..self.weights[ti].len() {
                let orig = self.weights[ti][j];
                self.weights[ti][j] = orig + h;
                let up = self.loss(tokens, objective);
                self.weights[ti][j] = orig - h;
                let down = self.loss(tokens, objective);
                self.weights[ti][j] = orig;
                out.push(((up - down) / (2.0 * h)).into());
            }
        }
        out
    }
}

/// Largest `|a - b| / max(|a|, |b|, floor)` and its index.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> (f64, usize) {
    assert_eq!(a.len(), b.len());
    let mut worst = (0.0, 0);
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        let rel = (x - y).abs() / x.abs().max(y.abs()).max(floor);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    worst
}
