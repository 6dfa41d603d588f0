//! Training on synthetic data as amortized inference.
//!
//! * [`autodiff`]: tensors, reverse-mode graph, Adam.
//! * [`captcha`]: style-parameterized prior over Captcha latents and a stochastic renderer.
//! * [`proposal`]: CNN + LSTM network producing per-latent categorical distributions.
//! * [`inference`]: ABC-weighted importance sampling with the network as proposal.
//! * [`gauss`]: linear-Gaussian model-mismatch experiment.
//! * [`pipeline`]: dataset, training, breaking and evaluation commands.

pub mod autodiff;
pub mod captcha;
pub mod error;
pub mod gauss;
pub mod inference;
pub mod pipeline;
pub mod proposal;
pub mod seed;

pub use error::{Error, Result};
