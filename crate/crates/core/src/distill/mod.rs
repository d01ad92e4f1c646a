//! Hard-label finetuning and teacher-student distillation.
//!
//! The objective is `supervised + alpha * kd`, where both terms are
//! cross-entropies averaged over response positions: against the gold next
//! token for the supervised term, and against the full teacher softmax for
//! the soft-label term. Sequence-level distillation additionally trains on
//! teacher greedy decodes.

mod config;
mod loss;
mod trainer;

pub use config::{KdConfig, KdMode, TrainConfig, TrainFile};
pub use loss::{
    combined_loss, kd_loss, kd_loss_on_tape, supervised_loss, supervised_loss_on_tape,
    teacher_targets,
};
pub use trainer::{
    augment_with_teacher, distill, distill_with, example_gradient, finetune, finetune_teacher,
    Adam, Augmentation, EpochAction, ExampleGradient, StepRecord, Trainer, TrainingLog,
};
