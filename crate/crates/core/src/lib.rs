//! Exemplar-free semi-supervised class-incremental learning on feature
//! vectors.
//!
//! Each task brings a few labeled and many unlabeled samples of new classes.
//! Learning a task has two stages:
//!
//! 1. [`stage1`] trains the task's classifier head (and optionally a linear
//!    feature layer) on the labeled loss plus a pseudo-label loss gated by a
//!    confidence threshold that decays with the task index
//!    ([`threshold`]), with per-class weights that favour classes receiving
//!    few confident pseudo-labels.
//! 2. [`stage2`] estimates a Gaussian per class from labeled and confident
//!    pseudo-labeled features, stores it, and realigns every head on samples
//!    drawn from the stored Gaussians of all classes seen so far. No raw
//!    sample of a finished task is kept.
//!
//! [`experiment`] runs whole streams from [`stream`] and reports the
//! [`eval`] metrics. The guide under `book/` walks through each piece.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod experiment;
pub mod linear;
pub mod rng;
pub mod stage1;
pub mod stage2;
pub mod stream;
pub mod threshold;

pub use error::{Error, Result};
