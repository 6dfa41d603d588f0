//! Stochastic renderer: glyph compositing, rotation, elastic warp, noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::font::{self, GLYPH_HEIGHT, GLYPH_WIDTH};
use super::image::Image;
use super::latent::Latent;
use super::style::{EpsilonRole, StyleSpec};
use crate::error::Result;

/// Top-left corner of the unrotated text block.
pub fn anchor(style: &StyleSpec, latent: &Latent) -> (i64, i64) {
    let block = style.block_width(latent.length, latent.kerning(style));
    let x0 = (style.canvas.width as i64 - block) / 2;
    let y0 = (style.canvas.height as i64 - style.glyph_height() as i64) / 2;
    (x0, y0)
}

fn rotation_radians(style: &StyleSpec, latent: &Latent) -> f64 {
    latent
        .epsilon(style, EpsilonRole::Rotation)
        .map(|idx| (idx as f64 * style.rotation_step_deg).to_radians())
        .unwrap_or(0.0)
}

/// Glyph `c` scaled by `style.glyph_scale` as an ink raster.
fn glyph_image(style: &StyleSpec, c: char) -> Image {
    let s = style.glyph_scale;
    let bitmap = font::glyph(c).expect("style validated against atlas");
    let mut img = Image::blank(GLYPH_HEIGHT * s, GLYPH_WIDTH * s);
    for y in 0..GLYPH_HEIGHT * s {
        for x in 0..GLYPH_WIDTH * s {
            if bitmap[(y / s) * GLYPH_WIDTH + x / s] {
                img.set(y, x, 1.0);
            }
        }
    }
    img
}

/// Rotates `img` by `theta` about `(cy, cx)` with bilinear resampling.
fn rotate(img: &Image, theta: f64, cy: f64, cx: f64) -> Image {
    let (sin, cos) = theta.sin_cos();
    let mut out = Image::blank(img.height(), img.width());
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse map: rotate output offset by -theta
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            out.set(y, x, img.sample_bilinear(sy, sx));
        }
    }
    out
}

/// Noise-free, undeformed render: a pure function of `(latent, style)`.
pub fn render_mean(latent: &Latent, style: &StyleSpec) -> Result<Image> {
    latent.check_renderable(style)?;
    let (h, w) = (style.canvas.height, style.canvas.width);
    let mut canvas = Image::blank(h, w);
    let (x0, y0) = anchor(style, latent);
    let advance = style.glyph_width() as i64 + latent.kerning(style);
    let theta = rotation_radians(style, latent);
    let chars = style.alphabet_chars();
    for (l, &letter) in latent.letters.iter().enumerate() {
        let mut glyph = glyph_image(style, chars[letter]);
        let gx = x0 + l as i64 * advance;
        if style.per_glyph_rotation && theta != 0.0 {
            let (gh, gw) = (glyph.height() as f64, glyph.width() as f64);
            glyph = rotate(&glyph, theta, (gh - 1.0) / 2.0, (gw - 1.0) / 2.0);
        }
        for gy in 0..glyph.height() {
            for gxx in 0..glyph.width() {
                let (cy, cx) = (y0 + gy as i64, gx + gxx as i64);
                if cy < 0 || cx < 0 || cy >= h as i64 || cx >= w as i64 {
                    continue;
                }
                let (cy, cx) = (cy as usize, cx as usize);
                let v = glyph.get(gy, gxx).max(canvas.get(cy, cx));
                canvas.set(cy, cx, v);
            }
        }
    }
    if !style.per_glyph_rotation && theta != 0.0 {
        canvas = rotate(&canvas, theta, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    }
    canvas.clamp();
    Ok(canvas)
}

/// Full stochastic render: mean render, then elastic warp (if enabled), then
/// additive Gaussian noise, clamped to `[0, 1]`.
pub fn render<R: Rng + ?Sized>(latent: &Latent, style: &StyleSpec, rng: &mut R) -> Result<Image> {
    let mut img = render_mean(latent, style)?;
    if style.elastic.enabled && style.elastic.alpha > 0.0 {
        img = elastic_deform(&img, style.elastic.alpha, style.elastic.sigma_field, rng);
    }
    if style.noise_sigma > 0.0 {
        img = perturb_noise(&img, style.noise_sigma, rng);
    }
    Ok(img)
}

/// Per-pixel displacement `(dy, dx)` in pixels.
#[derive(Clone, Debug)]
pub struct DisplacementField {
    pub height: usize,
    pub width: usize,
    pub dy: Vec<f64>,
    pub dx: Vec<f64>,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable convolution with zero padding.
fn smooth(field: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let xx = x as i64 + j as i64 - r;
                if xx >= 0 && xx < w as i64 {
                    acc += kv * field[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let yy = y as i64 + j as i64 - r;
                if yy >= 0 && yy < h as i64 {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

impl DisplacementField {
    /// Uniform `[-1, 1]` noise per pixel and axis, Gaussian-smoothed (kernel
    /// truncated at 3σ), normalized to unit maximum magnitude and scaled by `alpha`.
    pub fn sample<R: Rng + ?Sized>(height: usize, width: usize, alpha: f64, sigma_field: f64, rng: &mut R) -> Self {
        let n = height * width;
        let raw_dx: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let raw_dy: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let kernel = gaussian_kernel(sigma_field);
        let mut dx = smooth(&raw_dx, height, width, &kernel);
        let mut dy = smooth(&raw_dy, height, width, &kernel);
        let max = dx.iter().zip(&dy).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max);
        let scale = if max > 0.0 { alpha / max } else { 0.0 };
        dx.iter_mut().chain(dy.iter_mut()).for_each(|v| *v *= scale);
        DisplacementField { height, width, dy, dx }
    }

    pub fn max_magnitude(&self) -> f64 {
        self.dx.iter().zip(&self.dy).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max)
    }

    /// Resamples `img` at displaced coordinates.
    pub fn apply(&self, img: &Image) -> Image {
        let mut out = Image::blank(img.height(), img.width());
        for y in 0..img.height() {
            for x in 0..img.width() {
                let i = y * self.width + x;
                out.set(y, x, img.sample_bilinear(y as f64 + self.dy[i], x as f64 + self.dx[i]));
            }
        }
        out
    }
}

/// Elastic warp with a freshly drawn displacement field; `alpha = 0` is the identity.
pub fn elastic_deform<R: Rng + ?Sized>(img: &Image, alpha: f64, sigma_field: f64, rng: &mut R) -> Image {
    if alpha == 0.0 {
        return img.clone();
    }
    DisplacementField::sample(img.height(), img.width(), alpha, sigma_field, rng).apply(img)
}

/// Adds `N(0, (sigma/255)²)` per pixel and clamps to `[0, 1]`.
pub fn perturb_noise<R: Rng + ?Sized>(img: &Image, sigma: f64, rng: &mut R) -> Image {
    let mut out = img.clone();
    if sigma == 0.0 {
        return out;
    }
    let s = sigma / 255.0;
    for v in out.pixels_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = (*v + s * z).clamp(0.0, 1.0);
    }
    out
}
