//! Dense `f64` tensors, the reverse-mode tape and the scalar reference ops.
//!
//! Everything here runs in double precision with a fixed summation order so
//! that seeded runs are bit-reproducible.

pub(crate) mod kernels;
mod tape;

pub use tape::{Gradients, Tape, Var};

use crate::error::{invalid, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// A dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return invalid(format!("tensor shape {shape:?} has a zero dimension"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return invalid(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.data.len()
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    /// Rows and columns of a 2-d tensor; a 1-d tensor is treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => invalid(format!("expected a matrix, got shape {s:?}")),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return invalid("softmax of an empty vector");
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return invalid(format!("softmax input contains non-finite value {x}"));
    }
    let mut out = vec![0.0; v.len()];
    kernels::softmax_into(v, &mut out);
    Ok(out)
}

/// `-sum(target * ln(pred))`; zero-target terms contribute exactly zero and
/// predictions are floored at [`PROB_FLOOR`].
pub fn cross_entropy(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return invalid(format!(
            "cross_entropy length mismatch: {} vs {}",
            pred.len(),
            target.len()
        ));
    }
    if pred.is_empty() {
        return invalid("cross_entropy of empty vectors");
    }
    check_distribution("pred", pred)?;
    check_distribution("target", target)?;
    let mut acc = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        if t > 0.0 {
            acc -= t * p.max(PROB_FLOOR).ln();
        }
    }
    Ok(acc)
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return invalid(format!("{name} has negative or non-finite entries"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return invalid(format!("{name} sums to {s}, expected 1"));
    }
    Ok(())
}

/// Matrix product with a fixed left-to-right accumulation order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return invalid(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![0.0; m * n];
    kernels::matmul_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::matrix(m, n, out)
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` with population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return invalid(format!(
            "layer_norm length mismatch: x {}, gamma {}, beta {}",
            x.len(),
            gamma.len(),
            beta.len()
        ));
    }
    if x.is_empty() {
        return invalid("layer_norm of an empty vector");
    }
    if !(eps > 0.0) {
        return invalid(format!("layer_norm eps must be positive, got {eps}"));
    }
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    kernels::layer_norm_row(x, gamma, beta, eps, &mut out, &mut xhat);
    Ok(out)
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    kernels::gelu(x)
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_gradient<F, E>(mut f: F, x: &[f64], h: f64) -> std::result::Result<Vec<f64>, E>
where
    F: FnMut(&[f64]) -> std::result::Result<f64, E>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        let v = [0.3, -1.2, 4.0];
        let shifted: Vec<f64> = v.iter().map(|x| x + 1000.0).collect();
        let a = softmax(&v).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[1.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let h = cross_entropy(&[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!((h - 0.693_147_180_559_945_3).abs() < 1e-12);
        let p = softmax(&[2.0, 0.0]).unwrap();
        let l = cross_entropy(&p, &[1.0, 0.0]).unwrap();
        // -ln(e^2 / (e^2 + 1))
        assert!((l - 0.126_928_011_042_972_5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_floor_instead_of_infinity() {
        let l = cross_entropy(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-9);
        assert!(cross_entropy(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);

        let vals: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let m = Tensor::matrix(4, 4, vals).unwrap();
        let mut eye = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        assert_eq!(matmul(&m, &eye).unwrap(), m);

        let bad = Tensor::matrix(3, 2, vec![0.0; 6]).unwrap();
        assert!(matmul(&m, &bad).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = matmul(
            &Tensor::matrix(3, 3, a.clone()).unwrap(),
            &Tensor::matrix(3, 3, b.clone()).unwrap(),
        )
        .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a[i * 3 + k] * b[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] + 1.0).abs() < 1e-9);

        let out = layer_norm(&[3.0; 5], &[1.0; 5], &[0.0; 5], 1e-5).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));

        let x = [0.2, -0.7, 1.9];
        let g = [0.5, 2.0, -1.0];
        let b = [0.1, 0.0, 0.3];
        let shifted: Vec<f64> = x.iter().map(|v| v + 7.5).collect();
        let a = layer_norm(&x, &g, &b, 1e-5).unwrap();
        let c = layer_norm(&shifted, &g, &b, 1e-5).unwrap();
        for (p, q) in a.iter().zip(&c) {
            assert!((p - q).abs() < 1e-9);
        }
        assert!(layer_norm(&x, &g[..2], &b, 1e-5).is_err());
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(
            |x: &[f64]| Ok::<_, ()>(x.iter().map(|v| v * v).sum()),
            &[1.0, 2.0],
            1e-5,
        )
        .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);

        let w = [0.5, -3.0, 2.25];
        let g = finite_difference_gradient(
            |x: &[f64]| Ok::<_, ()>(x.iter().zip(&w).map(|(a, b)| a * b).sum()),
            &[0.1, 0.2, 0.3],
            1e-3,
        )
        .unwrap();
        for (a, b) in g.iter().zip(&w) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    fn entropy_of(p: &[f64]) -> f64 {
        -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn softmax_normalized_and_shift_invariant(
            v in prop::collection::vec(-50.0f64..50.0, 1..=64),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&v).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn self_cross_entropy_is_entropy(v in prop::collection::vec(-5.0f64..5.0, 1..=32)) {
            let p = softmax(&v).unwrap();
            let ce = cross_entropy(&p, &p).unwrap();
            prop_assert!((ce - entropy_of(&p)).abs() < 1e-10);
        }

        #[test]
        fn one_hot_cross_entropy_nonnegative(
            v in prop::collection::vec(-20.0f64..20.0, 2..=32),
            idx in 0usize..32,
        ) {
            let p = softmax(&v).unwrap();
            let i = idx % p.len();
            let mut y = vec![0.0; p.len()];
            y[i] = 1.0;
            let ce = cross_entropy(&p, &y).unwrap();
            prop_assert!(ce >= 0.0);
            prop_assert!((ce == 0.0) == (p[i] == 1.0));
        }
    }

    #[test]
    fn ops_are_deterministic() {
        let v: Vec<f64> = (0..50).map(|i| (i as f64).cos() * 7.0).collect();
        let a = softmax(&v).unwrap();
        let b = softmax(&v).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
