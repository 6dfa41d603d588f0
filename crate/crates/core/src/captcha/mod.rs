//! Per-style synthetic-data generative model: uniform prior over latents and
//! a stochastic Captcha renderer.

pub mod font;
mod image;
mod latent;
mod render;
mod style;

pub use image::Image;
pub use latent::{log_prior, perturb_kerning, sample_prior, Latent};
pub use render::{anchor, elastic_deform, perturb_noise, render, render_mean, DisplacementField};
pub use style::{Canvas, ElasticConfig, EpsilonRole, EpsilonSpec, StyleSpec};
