use rand::Rng;
use serde::{Deserialize, Serialize};

use super::style::{EpsilonRole, StyleSpec};
use crate::error::{Error, Result};

/// Structured Captcha latent: letter count, render parameters, letter identities.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Latent {
    pub length: usize,
    /// One value per render parameter, in style order.
    pub epsilons: Vec<i64>,
    /// Alphabet indices, `length` of them.
    pub letters: Vec<usize>,
}

impl Latent {
    /// Number of recurrent steps needed to describe this latent: `1 + K + L`.
    pub fn steps(&self) -> usize {
        1 + self.epsilons.len() + self.length
    }

    pub fn text(&self, style: &StyleSpec) -> String {
        let chars = style.alphabet_chars();
        self.letters.iter().map(|&i| chars.get(i).copied().unwrap_or('?')).collect()
    }

    pub fn epsilon(&self, style: &StyleSpec, role: EpsilonRole) -> Option<i64> {
        style.role_index(role).map(|i| self.epsilons[i])
    }

    pub fn kerning(&self, style: &StyleSpec) -> i64 {
        self.epsilon(style, EpsilonRole::Kerning).unwrap_or(0)
    }

    /// Structural checks plus membership of every component in the prior domains.
    pub fn check_prior(&self, style: &StyleSpec) -> Result<()> {
        self.check_structure(style)?;
        if self.length < style.l_min || self.length > style.l_max {
            return Err(Error::Domain(format!(
                "L = {} outside [{}, {}]",
                self.length, style.l_min, style.l_max
            )));
        }
        for (e, v) in style.epsilons.iter().zip(&self.epsilons) {
            if e.class_of(*v).is_none() {
                return Err(Error::Domain(format!("{} = {v} outside {:?}", e.name, e.domain)));
            }
        }
        Ok(())
    }

    /// Checks that the renderer can draw the latent (the prior domains may be exceeded).
    pub fn check_renderable(&self, style: &StyleSpec) -> Result<()> {
        self.check_structure(style)?;
        if !style.fits(self.length, self.kerning(style)) {
            return Err(Error::Render(format!(
                "{} glyphs at kerning {} overflow the {}-pixel canvas",
                self.length,
                self.kerning(style),
                style.canvas.width
            )));
        }
        Ok(())
    }

    fn check_structure(&self, style: &StyleSpec) -> Result<()> {
        if self.length == 0 || self.letters.len() != self.length {
            return Err(Error::Domain(format!(
                "L = {} with {} letters",
                self.length,
                self.letters.len()
            )));
        }
        if self.epsilons.len() != style.k() {
            return Err(Error::Domain(format!(
                "{} render parameters, style has K = {}",
                self.epsilons.len(),
                style.k()
            )));
        }
        let n = style.alphabet_len();
        if let Some(i) = self.letters.iter().find(|&&i| i >= n) {
            return Err(Error::Domain(format!("letter index {i} outside alphabet of {n}")));
        }
        Ok(())
    }
}

/// Draws `L`, every `ε_k` and every letter independently and uniformly.
pub fn sample_prior<R: Rng + ?Sized>(style: &StyleSpec, rng: &mut R) -> Latent {
    let length = rng.random_range(style.l_min..=style.l_max);
    let epsilons = style
        .epsilons
        .iter()
        .map(|e| e.domain[rng.random_range(0..e.domain.len())])
        .collect();
    let n = style.alphabet_len();
    let letters = (0..length).map(|_| rng.random_range(0..n)).collect();
    Latent { length, epsilons, letters }
}

/// Log-probability of `latent` under the uniform prior of `style`.
pub fn log_prior(latent: &Latent, style: &StyleSpec) -> Result<f64> {
    latent.check_prior(style)?;
    let eps: f64 = style.epsilons.iter().map(|e| (e.domain.len() as f64).ln()).sum();
    Ok(-(style.length_domain_size() as f64).ln() - eps - latent.length as f64 * (style.alphabet_len() as f64).ln())
}

/// Shifts the kerning parameter by `delta` pixels.
///
/// The result may leave the prior domain but must still fit the canvas.
pub fn perturb_kerning(latent: &Latent, delta: i64, style: &StyleSpec) -> Result<Latent> {
    let Some(k) = style.role_index(EpsilonRole::Kerning) else {
        return Err(Error::Domain(format!("style {} has no kerning parameter", style.id)));
    };
    let mut out = latent.clone();
    out.epsilons[k] += delta;
    if !style.fits(out.length, out.epsilons[k]) {
        return Err(Error::Domain(format!(
            "kerning {} overflows the canvas for {} glyphs",
            out.epsilons[k], out.length
        )));
    }
    Ok(out)
}
