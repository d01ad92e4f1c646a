//! Backpropagated loss gradients of a full 2-layer model against a
//! high-precision central-difference oracle.

mod reference;

use distill_lab::distill::{example_gradient, kd_loss_on_tape, teacher_targets};
use distill_lab::model::{ModelConfig, ModelParams};
use distill_lab::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reference::{max_relative_error, Objective, Reference};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-8;

struct Case {
    student: ModelParams,
    inputs: Vec<usize>,
    labels: Vec<usize>,
    mask: Vec<bool>,
    teacher_probs: Vec<f64>,
}

/// Unit-scale random weights keep layer-norm inputs O(1), so the central
/// difference's truncation error stays far below the tolerance.
fn case(seed: u64) -> Case {
    let cfg = ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
        seed,
    };
    let mut student = ModelParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = (0..student.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    student.load_flat(&flat).unwrap();
    let teacher = ModelParams::init(&ModelConfig { seed: seed + 1, ..cfg }).unwrap();
    let inputs: Vec<usize> = (0..8).map(|_| rng.gen_range(0..20)).collect();
    let labels: Vec<usize> = (0..8).map(|_| rng.gen_range(0..20)).collect();
    let mask: Vec<bool> = (0..8).map(|i| i >= 3).collect();
    let zt = teacher.logits(&inputs).unwrap();
    let teacher_probs = teacher_targets(zt.data(), 20, &mask);
    Case {
        student,
        inputs,
        labels,
        mask,
        teacher_probs,
    }
}

#[test]
fn reference_forward_agrees_with_model() {
    let c = case(0);
    let ours = c.student.logits(&c.inputs).unwrap();
    let reference = Reference::new(&c.student).logits(&c.inputs);
    for (a, b) in ours.data().iter().zip(&reference) {
        let b: f64 = (*b).into();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn supervised_gradient_matches_central_differences() {
    let c = case(1);
    let g = example_gradient(&c.student, &c.inputs, &c.labels, &c.mask, None, 0.0).unwrap();
    let fd = Reference::new(&c.student).central_difference(
        &c.inputs,
        &Objective::Supervised {
            labels: &c.labels,
            mask: &c.mask,
        },
        H,
    );
    let (err, i) = max_relative_error(&g.grad, &fd, FLOOR);
    assert!(err < TOL, "relative error {err} at {i}");
}

#[test]
fn kd_gradient_matches_central_differences() {
    let c = case(2);
    let mut tape = Tape::new();
    let nodes = c.student.forward_on_tape(&mut tape, &c.inputs).unwrap();
    let loss = kd_loss_on_tape(&mut tape, nodes.logits, c.teacher_probs.clone(), &c.mask).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let kd: Vec<f64> = nodes
        .params
        .iter()
        .zip(c.student.tensors())
        .flat_map(|(&v, t)| grads.take(v, t.numel()))
        .collect();
    let fd = Reference::new(&c.student).central_difference(
        &c.inputs,
        &Objective::Kd {
            teacher_probs: &c.teacher_probs,
            mask: &c.mask,
        },
        H,
    );
    let (err, i) = max_relative_error(&kd, &fd, FLOOR);
    assert!(err < TOL, "relative error {err} at {i}");
}

#[test]
fn combined_gradient_matches_central_differences() {
    for (seed, alpha) in [(3, 1.0), (4, 10.0)] {
        let c = case(seed);
        let g = example_gradient(&c.student, &c.inputs, &c.labels, &c.mask, Some(&c.teacher_probs), alpha)
            .unwrap();
        let fd = Reference::new(&c.student).central_difference(
            &c.inputs,
            &Objective::Combined {
                labels: &c.labels,
                teacher_probs: &c.teacher_probs,
                mask: &c.mask,
                alpha,
            },
            H,
        );
        let (err, i) = max_relative_error(&g.grad, &fd, FLOOR);
        assert!(err < TOL, "alpha {alpha}: relative error {err} at {i}");
    }
}
