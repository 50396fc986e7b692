//! Cohort-based score normalization for speaker verification, plus a
//! trainable variant whose cohort statistics are produced by learnable
//! impostor embeddings or learnable shift/scale gates.
//!
//! The crate is organized as a pipeline:
//!
//! - [`types`] — embeddings, trials, and the impostor bank.
//! - [`scoring`] — cosine scoring and top-K cohort statistics.
//! - [`norms`] — classical normalizations (z/t/s/at/as-norm) over trial lists.
//! - [`tape`] — a small reverse-mode autodiff arena for the training loop.
//! - [`train`] — margin-penalized cohort scoring, losses, and fine-tuning.
//! - [`metrics`] — EER, detection-cost, and calibration metrics.
//! - [`io`] — embedding archives, trial lists, synthetic data, checkpoints.
//! - [`rng`] — deterministic, versioned random streams.
//!
//! All numerics are `f64`. Every documented routine is deterministic for a
//! fixed seed: same inputs, same bits out, regardless of thread count.

pub mod error;
pub mod io;
pub mod metrics;
pub mod norms;
pub mod rng;
pub mod scoring;
pub mod tape;
pub mod train;
pub mod types;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use types::{Embedding, ImpostorBank, LabeledEmbedding, SpeakerId, Trial, TrialLabel, TrialList};
