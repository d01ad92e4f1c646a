use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{validate_alpha, KdConfig, KdMode, TrainConfig};
use super::loss::{kd_loss_on_tape, supervised_loss, supervised_loss_on_tape, teacher_targets};
use crate::corpus::vocab::EOS;
use crate::corpus::{Dataset, Example, Split};
use crate::error::{invalid, Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tape;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Losses and gradient norm (before clipping) of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss_sup: f64,
    /// Absent when no teacher is involved.
    pub loss_kd: Option<f64>,
    pub loss_total: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    /// Mean supervised loss on the validation split after each epoch, when
    /// the dataset has one.
    pub epoch_val_loss: Vec<Option<f64>>,
    /// Number of training examples, including teacher-augmented copies.
    pub train_size: usize,
    /// Augmented copies dropped because the teacher produced no response.
    pub dropped_augmented: usize,
}

impl TrainingLog {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,loss_sup,loss_kd,loss_total,grad_norm\n");
        for r in &self.steps {
            let kd = r.loss_kd.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.step, r.loss_sup, kd, r.loss_total, r.grad_norm
            );
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,val_loss\n");
        for (e, v) in self.epoch_val_loss.iter().enumerate() {
            let v = v.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{e},{v}");
        }
        s
    }

    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.steps_csv())?;
        Ok(())
    }

    pub fn write_epochs_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.epochs_csv())?;
        Ok(())
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Applies one update; `grad` is flat in canonical parameter order.
    pub fn step(&mut self, params: &mut ModelParams, grad: &[f64]) -> Result<()> {
        if grad.len() != self.m.len() || params.num_params() != self.m.len() {
            return invalid("gradient length does not match the optimizer state");
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let mut i = 0;
        for tensor in params.tensors_mut() {
            for p in tensor.data_mut() {
                let g = grad[i];
                self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = self.m[i] / c1;
                let v_hat = self.v[i] / c2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                i += 1;
            }
        }
        Ok(())
    }
}

/// Losses and flat parameter gradient for one example.
#[derive(Clone, Debug)]
pub struct ExampleGradient {
    pub loss_sup: f64,
    pub loss_kd: Option<f64>,
    pub loss_total: f64,
    pub grad: Vec<f64>,
}

/// Forward and backward pass for one teacher-forced sequence.
///
/// With `teacher_probs` (one teacher distribution per masked position) the
/// objective is `sup + alpha * kd`; at `alpha == 0` the KD node is recorded
/// for logging but does not reach the gradient.
pub fn example_gradient(
    params: &ModelParams,
    inputs: &[usize],
    labels: &[usize],
    mask: &[bool],
    teacher_probs: Option<&[f64]>,
    alpha: f64,
) -> Result<ExampleGradient> {
    let mut tape = Tape::new();
    let nodes = params.forward_on_tape(&mut tape, inputs)?;
    let sup = supervised_loss_on_tape(&mut tape, nodes.logits, labels, mask)?;
    let (kd, total) = match teacher_probs {
        None => (None, sup),
        Some(t) => {
            let kd = kd_loss_on_tape(&mut tape, nodes.logits, t.to_vec(), mask)?;
            let total = if alpha == 0.0 {
                sup
            } else {
                let weighted = tape.scale(kd, alpha);
                tape.add(sup, weighted)?
            };
            (Some(kd), total)
        }
    };
    let mut grads = tape.backward(total)?;
    let mut grad = Vec::with_capacity(params.num_params());
    for (var, t) in nodes.params.iter().zip(params.tensors()) {
        grad.extend(grads.take(*var, t.numel()));
    }
    Ok(ExampleGradient {
        loss_sup: tape.scalar(sup),
        loss_kd: kd.map(|k| tape.scalar(k)),
        loss_total: tape.scalar(total),
        grad,
    })
}

/// Returned by an epoch hook to continue or end training early.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochAction {
    Continue,
    Stop,
}

type EpochHook<'h> = Box<dyn FnMut(usize, &ModelParams, &TrainingLog) -> Result<EpochAction> + 'h>;

struct Item {
    inputs: Vec<usize>,
    labels: Vec<usize>,
    mask: Vec<bool>,
    teacher: Option<Vec<f64>>,
}

/// Mini-batch training loop shared by every training stage.
///
/// Training uses the examples tagged [`Split::Train`]; the validation split,
/// if present, is scored after every epoch. Per-example gradients may be
/// computed in parallel but are reduced in batch order, so results do not
/// depend on the thread count.
pub struct Trainer<'t, 'h> {
    cfg: TrainConfig,
    teacher: Option<(&'t ModelParams, f64)>,
    hook: Option<EpochHook<'h>>,
}

impl<'t, 'h> Trainer<'t, 'h> {
    pub fn new(cfg: TrainConfig) -> Self {
        Self {
            cfg,
            teacher: None,
            hook: None,
        }
    }

    /// Adds the teacher soft-label term with weight `alpha`.
    pub fn with_teacher(mut self, teacher: &'t ModelParams, alpha: f64) -> Self {
        self.teacher = Some((teacher, alpha));
        self
    }

    /// Called after each epoch with the epoch index (from 0).
    pub fn on_epoch<F>(mut self, hook: F) -> Self
    where
        F: FnMut(usize, &ModelParams, &TrainingLog) -> Result<EpochAction> + 'h,
    {
        self.hook = Some(Box::new(hook));
        self
    }

    pub fn run(mut self, mut params: ModelParams, dataset: &Dataset) -> Result<(ModelParams, TrainingLog)> {
        self.cfg.validate()?;
        let max_len = params.config.max_seq_len;
        let train: Vec<&Example> = dataset
            .examples
            .iter()
            .filter(|e| e.split == Split::Train)
            .collect();
        if train.is_empty() {
            return invalid("dataset has no training-split examples");
        }
        for e in dataset.examples.iter() {
            if e.seq_len() > max_len {
                return invalid(format!(
                    "example {} has {} tokens, exceeding max_seq_len {max_len}",
                    e.id,
                    e.seq_len()
                ));
            }
            if e.response.is_empty() {
                return invalid(format!("example {} has an empty response", e.id));
            }
        }
        if let Some((teacher, alpha)) = self.teacher {
            validate_alpha(alpha)?;
            check_compatible(&params, teacher)?;
        }

        let items = training_items(&train, self.teacher.map(|(t, _)| t))?;
        let val: Vec<&Example> = dataset
            .examples
            .iter()
            .filter(|e| e.split == Split::Val)
            .collect();

        let mut log = TrainingLog {
            train_size: items.len(),
            ..TrainingLog::default()
        };
        let alpha = self.teacher.map_or(0.0, |(_, a)| a);
        let mut adam = Adam::new(self.cfg.learning_rate, params.num_params());
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut step = 0;

        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(self.cfg.batch_size) {
                let results: Vec<Result<ExampleGradient>> = batch
                    .par_iter()
                    .map(|&i| {
                        let it = &items[i];
                        example_gradient(
                            &params,
                            &it.inputs,
                            &it.labels,
                            &it.mask,
                            it.teacher.as_deref(),
                            alpha,
                        )
                    })
                    .collect();
                let record = reduce_and_step(results, step, &self.cfg, &mut params, &mut adam)?;
                log.steps.push(record);
                step += 1;
            }
            log.epoch_val_loss.push(validation_loss(&params, &val)?);
            if let Some(hook) = self.hook.as_mut() {
                if hook(epoch, &params, &log)? == EpochAction::Stop {
                    break;
                }
            }
        }
        Ok((params, log))
    }
}

fn training_items(train: &[&Example], teacher: Option<&ModelParams>) -> Result<Vec<Item>> {
    train
        .par_iter()
        .map(|e| {
            let (inputs, labels, mask) = e.training_view();
            let teacher = match teacher {
                Some(t) => {
                    let z = t.logits(&inputs)?;
                    Some(teacher_targets(z.data(), t.config.vocab_size, &mask))
                }
                None => None,
            };
            Ok(Item {
                inputs,
                labels,
                mask,
                teacher,
            })
        })
        .collect()
}

fn reduce_and_step(
    results: Vec<Result<ExampleGradient>>,
    step: usize,
    cfg: &TrainConfig,
    params: &mut ModelParams,
    adam: &mut Adam,
) -> Result<StepRecord> {
    let n = results.len() as f64;
    let mut grad = vec![0.0; params.num_params()];
    let (mut sup, mut kd, mut total) = (0.0, None::<f64>, 0.0);
    for r in results {
        let r = r?;
        sup += r.loss_sup;
        total += r.loss_total;
        if let Some(k) = r.loss_kd {
            *kd.get_or_insert(0.0) += k;
        }
        for (g, x) in grad.iter_mut().zip(&r.grad) {
            *g += x;
        }
    }
    let (sup, kd, total) = (sup / n, kd.map(|k| k / n), total / n);
    for g in grad.iter_mut() {
        *g /= n;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !total.is_finite() || !norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("loss_sup={sup} loss_kd={kd:?} loss_total={total} grad_norm={norm}"),
        });
    }
    if norm > cfg.grad_clip_norm {
        let s = cfg.grad_clip_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    adam.step(params, &grad)?;
    Ok(StepRecord {
        step,
        loss_sup: sup,
        loss_kd: kd,
        loss_total: total,
        grad_norm: norm,
    })
}

fn validation_loss(params: &ModelParams, val: &[&Example]) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let losses: Vec<Result<f64>> = val
        .par_iter()
        .map(|e| {
            let (inputs, labels, mask) = e.training_view();
            supervised_loss(&params.logits(&inputs)?, &labels, &mask)
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(Some(sum / val.len() as f64))
}

fn check_compatible(student: &ModelParams, teacher: &ModelParams) -> Result<()> {
    if student.config.vocab_size != teacher.config.vocab_size {
        return invalid(format!(
            "student vocab size {} differs from teacher vocab size {}",
            student.config.vocab_size, teacher.config.vocab_size
        ));
    }
    Ok(())
}

/// Hard-label finetuning on response tokens.
pub fn finetune(params: ModelParams, dataset: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainingLog)> {
    Trainer::new(cfg.clone()).run(params, dataset)
}

/// Teacher alignment stage; same procedure as [`finetune`].
pub fn finetune_teacher(
    teacher: ModelParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainingLog)> {
    finetune(teacher, dataset, cfg)
}

/// Trains `student` on `sup + alpha * kd` against a frozen teacher.
///
/// In [`KdMode::WordPlusSequence`] the training split is first extended with
/// teacher-decoded responses.
pub fn distill(
    student: ModelParams,
    teacher: &ModelParams,
    dataset: &Dataset,
    kd: &KdConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainingLog)> {
    distill_with(Trainer::new(cfg.clone()), student, teacher, dataset, kd)
}

/// [`distill`] driven by a caller-configured trainer (for epoch hooks).
pub fn distill_with<'t>(
    trainer: Trainer<'t, '_>,
    student: ModelParams,
    teacher: &'t ModelParams,
    dataset: &Dataset,
    kd: &KdConfig,
) -> Result<(ModelParams, TrainingLog)> {
    kd.validate()?;
    check_compatible(&student, teacher)?;
    let (data, dropped) = match kd.mode {
        KdMode::Word => (None, 0),
        KdMode::WordPlusSequence => {
            let a = augment_with_teacher(teacher, dataset)?;
            (Some(a.dataset), a.dropped)
        }
    };
    let data = data.as_ref().unwrap_or(dataset);
    let (params, mut log) = trainer.with_teacher(teacher, kd.alpha).run(student, data)?;
    log.dropped_augmented = dropped;
    Ok((params, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    pub dataset: Dataset,
    /// Copies dropped because the teacher emitted nothing besides EOS.
    pub dropped: usize,
}

/// Appends, for every training example, a copy whose response is the
/// teacher's greedy decode of the prompt.
///
/// Decoding stops at EOS or at the teacher's `max_seq_len`. Validation and
/// test examples are passed through unchanged.
pub fn augment_with_teacher(teacher: &ModelParams, dataset: &Dataset) -> Result<Augmentation> {
    if dataset.vocab_extent() > teacher.config.vocab_size {
        return invalid(format!(
            "dataset uses token ids up to {} but the teacher vocab has {}",
            dataset.vocab_extent() - 1,
            teacher.config.vocab_size
        ));
    }
    let max_len = teacher.config.max_seq_len;
    let decoded: Vec<Result<Option<Example>>> = dataset
        .examples
        .par_iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| {
            let prompt = e.prompt();
            let budget = max_len.saturating_sub(prompt.len());
            let (seq, _) = teacher.generate_greedy(&prompt, budget, EOS)?;
            let response = seq[prompt.len()..].to_vec();
            if response.iter().all(|&t| t == EOS) {
                return Ok(None);
            }
            Ok(Some(Example {
                response,
                augmented: true,
                ..e.clone()
            }))
        })
        .collect();
    let mut examples = dataset.examples.clone();
    let mut dropped = 0;
    for d in decoded {
        match d? {
            Some(e) => examples.push(e),
            None => dropped += 1,
        }
    }
    Ok(Augmentation {
        dataset: Dataset::new(examples),
        dropped,
    })
}
