//! EEG abnormality detection with a channelwise convolutional autoencoder
//! feeding a single-head transformer classifier.
//!
//! The pipeline: EDF recordings are read ([`edfio`]), resampled to a common
//! rate, cut into fixed-length z-normalized segments ([`preprocess`]), and
//! compressed channel by channel into short latent vectors ([`cae`]). The
//! 19 per-channel latents become the token sequence for a small transformer
//! encoder that classifies each segment as normal or abnormal
//! ([`classifier`]). Per-recording decisions majority-vote the segment
//! predictions ([`evaluation`]). [`training`] owns the optimization loop
//! and checkpoints, [`synth`] fabricates labeled test recordings, and
//! [`numerics`] is the hand-rolled autodiff substrate everything runs on.
//!
//! All math is `f64`, single threaded, and seeded; two runs with the same
//! inputs produce bitwise-identical outputs.

pub mod cae;
pub mod classifier;
pub mod edfio;
pub mod evaluation;
pub mod numerics;
pub mod preprocess;
pub mod synth;
pub mod training;

pub use numerics::{NumericsError, Tape, Tensor, TensorId};
