//! Learn and evaluate targeted universal audio perturbations (additive
//! and prepending) against toy attention, CTC, and RNN-T speech
//! recognizers, end to end: differentiable tensors, a log-mel front end,
//! the three losses, projected-Adam attack solvers, metrics, and a
//! synthetic spoken-digit corpus.
//!
//! All numeric kernels are generic over [`scalar::Scalar`] (`f32` or
//! `f64`); the aliases at the crate root pin the `f64` instantiation the
//! CLI and experiments use.

pub mod error;
pub mod scalar;
pub mod tensor;
pub mod tape;
mod fft;
pub mod features;
pub mod losses;
pub mod models;
pub mod dataio;
pub mod attack;
pub mod metrics;
pub mod optim;
pub mod parallel;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision aliases. Attack optimization runs tens of thousands
/// of steps, so the shipped binary uses f64 throughout.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tape::Tape<f64>;
pub type GradientMap64 = tape::GradientMap<f64>;
pub type Model64 = models::Model<f64>;
pub type Utterance64 = dataio::Utterance<f64>;
pub type Perturbation64 = attack::Perturbation<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tape::Tape<f32>;
