use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::font::{self, GLYPH_HEIGHT, GLYPH_WIDTH};
use crate::error::{config_err, Result};

/// What a render parameter controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonRole {
    /// Extra horizontal advance between glyphs, in pixels (may be negative).
    Kerning,
    /// Rotation index; the angle is `index × rotation_step_deg`.
    Rotation,
    /// Carried in the latent but ignored by the renderer.
    Free,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSpec {
    pub name: String,
    pub role: EpsilonRole,
    /// Allowed values, in head-class order.
    pub domain: Vec<i64>,
}

impl EpsilonSpec {
    pub fn class_of(&self, value: i64) -> Option<usize> {
        self.domain.iter().position(|&v| v == value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticConfig {
    /// Maximum displacement in pixels.
    pub alpha: f64,
    /// Gaussian smoothing scale of the random field, in pixels.
    pub sigma_field: f64,
    pub enabled: bool,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        ElasticConfig { alpha: 0.0, sigma_field: 4.0, enabled: false }
    }
}

fn default_scale() -> usize {
    1
}

fn default_rotation_step() -> f64 {
    5.0
}

/// One Captcha scheme: priors, glyphs, deformations and noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub id: String,
    pub alphabet: String,
    pub l_min: usize,
    pub l_max: usize,
    #[serde(default)]
    pub epsilons: Vec<EpsilonSpec>,
    /// Integer upscaling of the 7×9 atlas glyphs.
    #[serde(default = "default_scale")]
    pub glyph_scale: usize,
    pub canvas: Canvas,
    /// Additive Gaussian noise standard deviation on the 0–255 scale.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub elastic: ElasticConfig,
    #[serde(default = "default_rotation_step")]
    pub rotation_step_deg: f64,
    /// Rotate each glyph about its own centre instead of the whole string.
    #[serde(default)]
    pub per_glyph_rotation: bool,
}

impl StyleSpec {
    /// Desk-scale default: ten digits, 3–5 letters, kerning and rotation, 40×120 canvas.
    pub fn desk_default() -> Self {
        StyleSpec {
            id: "desk".into(),
            alphabet: "0123456789".into(),
            l_min: 3,
            l_max: 5,
            epsilons: vec![
                EpsilonSpec { name: "kerning".into(), role: EpsilonRole::Kerning, domain: (-1..=3).collect() },
                EpsilonSpec { name: "rotation".into(), role: EpsilonRole::Rotation, domain: (-3..=3).collect() },
            ],
            glyph_scale: 2,
            canvas: Canvas { height: 40, width: 120 },
            noise_sigma: 0.0,
            elastic: ElasticConfig::default(),
            rotation_step_deg: 5.0,
            per_glyph_rotation: false,
        }
    }

    /// Two letters, one or two glyphs, one binary kerning parameter: 12 latents.
    pub fn tiny() -> Self {
        StyleSpec {
            id: "tiny".into(),
            alphabet: "AB".into(),
            l_min: 1,
            l_max: 2,
            epsilons: vec![EpsilonSpec { name: "kerning".into(), role: EpsilonRole::Kerning, domain: vec![0, 1] }],
            glyph_scale: 1,
            canvas: Canvas { height: 12, width: 20 },
            noise_sigma: 0.0,
            elastic: ElasticConfig::default(),
            rotation_step_deg: 5.0,
            per_glyph_rotation: false,
        }
    }

    /// Single glyph drawn from a visually confusable pair (`O` and `Q` differ in five cells).
    pub fn confusable() -> Self {
        StyleSpec {
            id: "confusable".into(),
            alphabet: "OQ".into(),
            l_min: 1,
            l_max: 1,
            epsilons: Vec::new(),
            glyph_scale: 1,
            canvas: Canvas { height: 12, width: 12 },
            noise_sigma: 0.0,
            elastic: ElasticConfig::default(),
            rotation_step_deg: 5.0,
            per_glyph_rotation: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let style: StyleSpec = serde_json::from_str(&text)?;
        style.validate()?;
        Ok(style)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn alphabet_chars(&self) -> Vec<char> {
        self.alphabet.chars().collect()
    }

    pub fn alphabet_len(&self) -> usize {
        self.alphabet.chars().count()
    }

    /// Number of render parameters `K`.
    pub fn k(&self) -> usize {
        self.epsilons.len()
    }

    pub fn length_domain_size(&self) -> usize {
        self.l_max - self.l_min + 1
    }

    pub fn glyph_width(&self) -> usize {
        GLYPH_WIDTH * self.glyph_scale
    }

    pub fn glyph_height(&self) -> usize {
        GLYPH_HEIGHT * self.glyph_scale
    }

    pub fn role_index(&self, role: EpsilonRole) -> Option<usize> {
        self.epsilons.iter().position(|e| e.role == role)
    }

    /// Width of a string of `len` glyphs at the given kerning.
    pub fn block_width(&self, len: usize, kerning: i64) -> i64 {
        let gw = self.glyph_width() as i64;
        len as i64 * gw + (len as i64 - 1).max(0) * kerning
    }

    /// Whether `len` glyphs at `kerning` fit on the canvas without overlap reversal.
    pub fn fits(&self, len: usize, kerning: i64) -> bool {
        len >= 1
            && kerning > -(self.glyph_width() as i64)
            && self.block_width(len, kerning) <= self.canvas.width as i64
            && self.glyph_height() <= self.canvas.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet.is_empty() {
            return Err(config_err!("style {}: empty alphabet", self.id));
        }
        let chars = self.alphabet_chars();
        if chars.iter().collect::<HashSet<_>>().len() != chars.len() {
            return Err(config_err!("style {}: repeated alphabet characters", self.id));
        }
        if let Some(c) = chars.iter().find(|c| font::glyph(**c).is_none()) {
            return Err(config_err!("style {}: no glyph for {c:?}", self.id));
        }
        if self.l_min < 1 || self.l_min > self.l_max {
            return Err(config_err!("style {}: need 1 <= l_min <= l_max, got [{}, {}]", self.id, self.l_min, self.l_max));
        }
        if self.glyph_scale < 1 {
            return Err(config_err!("style {}: glyph_scale must be >= 1", self.id));
        }
        for e in &self.epsilons {
            if e.domain.is_empty() {
                return Err(config_err!("style {}: epsilon {} has an empty domain", self.id, e.name));
            }
            if e.domain.iter().collect::<HashSet<_>>().len() != e.domain.len() {
                return Err(config_err!("style {}: epsilon {} repeats values", self.id, e.name));
            }
        }
        for role in [EpsilonRole::Kerning, EpsilonRole::Rotation] {
            if self.epsilons.iter().filter(|e| e.role == role).count() > 1 {
                return Err(config_err!("style {}: more than one {role:?} parameter", self.id));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(config_err!("style {}: noise_sigma must be finite and >= 0", self.id));
        }
        let el = &self.elastic;
        if !(el.alpha >= 0.0 && el.alpha.is_finite() && el.sigma_field > 0.0 && el.sigma_field.is_finite()) {
            return Err(config_err!("style {}: elastic needs alpha >= 0 and sigma_field > 0", self.id));
        }
        let kernings: Vec<i64> = match self.role_index(EpsilonRole::Kerning) {
            Some(i) => self.epsilons[i].domain.clone(),
            None => vec![0],
        };
        let (kmin, kmax) = (*kernings.iter().min().unwrap(), *kernings.iter().max().unwrap());
        if !self.fits(self.l_max, kmax) || !self.fits(self.l_max, kmin) {
            return Err(config_err!(
                "style {}: {} glyphs of {}×{} at kerning {kmin}..{kmax} do not fit a {}×{} canvas",
                self.id,
                self.l_max,
                self.glyph_width(),
                self.glyph_height(),
                self.canvas.height,
                self.canvas.width
            ));
        }
        Ok(())
    }
}
