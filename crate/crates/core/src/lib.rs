//! Quality-paired SimSiam pretraining for quasi-periodic 1D signals.
//!
//! Clean segments are paired with noisy temporal neighbours from the same
//! recording, the pairs are ordered into an easy-to-hard curriculum, and a
//! small residual CNN is trained with a stop-gradient cosine objective so
//! that clean and corrupted views map to the same representation.
//!
//! Module map:
//! - [`signal`]: segments, preprocessing, PPGS files and manifests
//! - [`synth`]: synthetic PPG with ground-truth artifact masks
//! - [`quality`]: artifact fraction and good/bad labelling
//! - [`pairing`]: quality pairs and curriculum schedules
//! - [`autodiff`]: tensors and reverse-mode differentiation
//! - [`model`]: encoder, projector, predictor, heads, checkpoints
//! - [`dataset`]: segment lookup and task labels
//! - [`train`]: contrastive pretraining and fine-tuning
//! - [`eval`]: MAE, F1, artifact-tolerance curves, embedding export
//! - [`protocol`]: reference experiments on synthetic data
//! - [`diagnostics`]: finite-difference checks of every operation

pub mod autodiff;
mod csvio;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod model;
pub mod pairing;
pub mod protocol;
pub mod quality;
pub mod seed;
pub mod signal;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
