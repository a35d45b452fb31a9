//! Hybrid-field XL-MIMO channel estimation.
//!
//! The crate covers the whole experiment pipeline:
//!
//! * [`numerics`]: complex vectors/matrices, Cholesky solves, the DFT
//!   dictionary and a seeded, portable random stream.
//! * [`channel`]: far-field, near-field and hybrid-field channel synthesis,
//!   noisy least-squares observations and the `XCED1` dataset format.
//! * [`baselines`]: LS, LMMSE and two-stage hybrid-field OMP estimators plus
//!   the NMSE metric.
//! * [`autograd`]: a small reverse-mode autodiff tape over real tensors.
//! * [`model`]: the transformer channel estimator (convolutional
//!   preprocessing, parallel feature/spatial attention embedding, a GPT-2
//!   style partially frozen backbone and a residual denoising head).
//! * [`training`]: MSE loss, Adam, step learning-rate decay and NMSE
//!   evaluation.
//! * [`cli`]: experiment configuration, the `xce` subcommands and CSV output.

pub mod error;

pub mod autograd;
pub mod baselines;
pub mod channel;
pub mod cli;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Result, XceError};
