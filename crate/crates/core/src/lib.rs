//! A desk-scale knowledge-distillation laboratory.
//!
//! The crate bundles a small reverse-mode autodiff engine, a decoder-only
//! transformer, hard-label and soft-label (teacher) training, synthetic
//! grounded corpora, and a set of hallucination and calibration metrics.

pub mod corpus;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
