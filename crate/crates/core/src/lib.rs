//! Desk-scale laboratory for on-policy self-distillation (OPSD).
//!
//! A tiny byte-level transformer is trained against its own EMA copy
//! conditioned on privileged context (feedback, peer solutions, hints),
//! on verifiable toy tasks. The crate also measures the initial
//! student/self-teacher gap and fits the linear law relating that gap to
//! the final student improvement.
//!
//! Module map:
//! - [`numcore`]: dense f64 tensors and a reverse-mode tape.
//! - [`model`]: decoder-only transformer, sampling, checkpoints.
//! - [`env`]: verifiable task generators with textual feedback.
//! - [`context`]: the six self-teacher prompt constructions.
//! - [`distill`]: top-k reverse-KL loss, EMA teacher, clipped AdamW.
//! - [`trainer`]: warm-start pretraining and the OPSD loop.
//! - [`evalproto`]: mean@n, initial gap, improvement.
//! - [`lawfit`]: OLS, Pearson, Spearman, LOOCV and prediction.

pub mod context;
pub mod distill;
pub mod env;
mod error;
pub mod evalproto;
pub mod lawfit;
pub mod model;
pub mod numcore;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
