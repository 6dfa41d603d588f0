//! Self-normalized importance sampling with the trained network as proposal
//! and a Gaussian ABC kernel standing in for the intractable likelihood.

use std::collections::HashMap;

use serde::Serialize;

use crate::captcha::{log_prior, render_mean, Image, Latent, StyleSpec};
use crate::error::{config_err, Error, Result};
use crate::proposal::ProposalNet;
use crate::seed;

/// Gaussian kernel on the Euclidean pixel distance to the mean render.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AbcConfig {
    pub epsilon: f64,
}

impl AbcConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(config_err!("ABC bandwidth must be positive and finite, got {epsilon}"));
        }
        Ok(AbcConfig { epsilon })
    }

    /// `0.05·√(pixel count)`: a 5% average per-pixel deviation.
    pub fn default_for(style: &StyleSpec) -> Self {
        AbcConfig { epsilon: 0.05 * ((style.canvas.height * style.canvas.width) as f64).sqrt() }
    }
}

/// `−‖y − render_mean(x)‖² / (2ε²)`, or `−∞` when `x` cannot be rendered.
pub fn abc_log_likelihood(y: &Image, x: &Latent, style: &StyleSpec, cfg: &AbcConfig) -> f64 {
    match render_mean(x, style) {
        Ok(mean) if (mean.height(), mean.width()) == (y.height(), y.width()) => {
            -mean.squared_distance(y) / (2.0 * cfg.epsilon * cfg.epsilon)
        }
        _ => f64::NEG_INFINITY,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Particle {
    pub latent: Latent,
    pub log_weight: f64,
    pub text: String,
}

/// Weighted particles with weights normalized in log space.
#[derive(Clone, Debug)]
pub struct ParticleSet {
    particles: Vec<Particle>,
    weights: Vec<f64>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl ParticleSet {
    /// Normalizes the log weights; fails when every weight is zero.
    pub fn from_particles(particles: Vec<Particle>) -> Result<Self> {
        let logs: Vec<f64> = particles.iter().map(|p| p.log_weight).collect();
        if logs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Data("importance log weights must be finite or -inf".into()));
        }
        let z = log_sum_exp(&logs);
        if z == f64::NEG_INFINITY {
            return Err(Error::DegeneratePosterior { particles: particles.len(), min_distance: f64::INFINITY });
        }
        let weights = logs.iter().map(|v| (v - z).exp()).collect();
        Ok(ParticleSet { particles, weights })
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    /// Normalized weights `W_m`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }
}

/// Draws `m` particles from the proposal and weights them by prior × ABC kernel / proposal.
///
/// Particle `i` uses its own stream derived from `seed` and `i`, so results do
/// not depend on how the draws are batched.
pub fn importance_sample(
    y: &Image,
    net: &ProposalNet,
    style: &StyleSpec,
    m: usize,
    cfg: &AbcConfig,
    seed: u64,
) -> Result<ParticleSet> {
    if m == 0 {
        return Err(config_err!("importance sampling needs at least one particle"));
    }
    let mut particles = Vec::with_capacity(m);
    let mut min_distance = f64::INFINITY;
    for start in (0..m).step_by(512) {
        let end = (start + 512).min(m);
        let mut rngs: Vec<seed::Rng> = (start..end).map(|i| seed::rng(seed, &[seed::tag::PARTICLE, i as u64])).collect();
        for (x, log_q) in net.sample_many(style, y, &mut rngs)? {
            let log_w = match (log_prior(&x, style), render_mean(&x, style)) {
                (Ok(lp), Ok(mean)) => {
                    let d2 = mean.squared_distance(y);
                    min_distance = min_distance.min(d2.sqrt());
                    lp - d2 / (2.0 * cfg.epsilon * cfg.epsilon) - log_q
                }
                _ => f64::NEG_INFINITY,
            };
            let text = x.text(style);
            particles.push(Particle { latent: x, log_weight: log_w, text });
        }
    }
    ParticleSet::from_particles(particles).map_err(|e| match e {
        Error::DegeneratePosterior { particles, .. } => Error::DegeneratePosterior { particles, min_distance },
        other => other,
    })
}

/// `Σ_m W_m f(x_m)`.
pub fn posterior_expectation(ps: &ParticleSet, f: impl Fn(&Latent) -> Vec<f64>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    for (p, &w) in ps.particles.iter().zip(&ps.weights) {
        let v = f(&p.latent);
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (a, x) in acc.iter_mut().zip(v) {
            if w > 0.0 {
                *a += w * x;
            }
        }
    }
    acc
}

/// Posterior mass per decoded string, largest first (ties by string), at most `top_k` entries.
pub fn string_posterior(ps: &ParticleSet, top_k: usize) -> Vec<(String, f64)> {
    let mut mass: HashMap<&str, f64> = HashMap::new();
    for (p, &w) in ps.particles.iter().zip(&ps.weights) {
        *mass.entry(p.text.as_str()).or_insert(0.0) += w;
    }
    let mut out: Vec<(String, f64)> = mass.into_iter().filter(|(_, w)| *w > 0.0).map(|(s, w)| (s.to_owned(), w)).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out.truncate(top_k);
    out
}

/// `1 / Σ_m W_m²`.
pub fn effective_sample_size(ps: &ParticleSet) -> f64 {
    1.0 / ps.weights.iter().map(|w| w * w).sum::<f64>()
}
