use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale raster with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn blank(height: usize, width: usize) -> Self {
        Image { height, width, pixels: vec![0.0; height * width] }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Format(format!(
                "{} pixels for a {height}×{width} image",
                pixels.len()
            )));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// Bilinear sample at real coordinates; taps outside the raster read 0.
    pub fn sample_bilinear(&self, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let tap = |yy: f64, xx: f64| -> f64 {
            if yy < 0.0 || xx < 0.0 || yy >= self.height as f64 || xx >= self.width as f64 {
                0.0
            } else {
                self.pixels[yy as usize * self.width + xx as usize]
            }
        };
        let top = tap(y0, x0) * (1.0 - fx) + tap(y0, x0 + 1.0) * fx;
        let bottom = tap(y0 + 1.0, x0) * (1.0 - fx) + tap(y0 + 1.0, x0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn clamp(&mut self) {
        self.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn squared_distance(&self, other: &Image) -> f64 {
        debug_assert_eq!((self.height, self.width), (other.height, other.width));
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn l1_distance(&self, other: &Image) -> f64 {
        debug_assert_eq!((self.height, self.width), (other.height, other.width));
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).abs()).sum()
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let mut tokens = Vec::new();
        // header: magic, width, height, maxval, separated by whitespace; '#' comments allowed
        while tokens.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated PGM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_owned));
        }
        if tokens.len() != 4 || tokens[0] != "P5" {
            return Err(Error::Format(format!("unsupported PGM header {tokens:?}")));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM number {s:?}")));
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("PGM maxval {maxval} not supported")));
        }
        let mut raw = vec![0u8; width * height];
        reader
            .read_exact(&mut raw)
            .map_err(|_| Error::Format("PGM pixel data truncated".into()))?;
        let pixels = raw.iter().map(|&b| b as f64 / maxval as f64).collect();
        Image::from_pixels(height, width, pixels)
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        Image::from_pgm(&std::fs::read(path)?)
    }

    /// Pixels quantized to the 8-bit grid PGM stores.
    pub fn quantized(&self) -> Image {
        let pixels = self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        Image { pixels, ..*self }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_exact_on_the_byte_grid() {
        let px: Vec<f64> = (0..12).map(|i| i as f64 * 20.0 / 255.0).collect();
        let img = Image::from_pixels(3, 4, px).unwrap();
        let bytes = img.to_pgm();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        let back = Image::from_pgm(&bytes).unwrap();
        assert!(back.pixels().iter().zip(img.pixels()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn bad_pgm_is_rejected() {
        assert!(Image::from_pgm(b"P2\n2 2\n255\n0 0 0 0").is_err());
        assert!(Image::from_pgm(b"P5\n4 4\n255\n\x00\x00").is_err());
    }

    #[test]
    fn bilinear_interpolates_and_reads_zero_outside() {
        let img = Image::from_pixels(2, 2, vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(img.sample_bilinear(0.0, 0.5), 0.5);
        assert_eq!(img.sample_bilinear(1.0, 1.0), 1.0);
        assert_eq!(img.sample_bilinear(-1.0, 0.0), 0.0);
        assert_eq!(img.sample_bilinear(1.5, 1.0), 0.5);
    }
}
