use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::captcha::StyleSpec;
use crate::error::{config_err, Result};

/// Output sizes of the softmax heads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    /// Smallest letter count; the length head's class `c` means `L = length_min + c`.
    pub length_min: usize,
    /// `|L domain|`
    pub length: usize,
    /// `|ε_k domain|` for each render parameter, in style order.
    pub epsilons: Vec<usize>,
    /// `|alphabet|`
    pub letter: usize,
}

impl HeadDims {
    pub fn for_style(style: &StyleSpec) -> Self {
        HeadDims {
            length_min: style.l_min,
            length: style.length_domain_size(),
            epsilons: style.epsilons.iter().map(|e| e.domain.len()).collect(),
            letter: style.alphabet_len(),
        }
    }

    /// Number of head kinds `D = K + 2`.
    pub fn kinds(&self) -> usize {
        self.epsilons.len() + 2
    }

    /// Output size of head kind `kind` (0 = length, 1..=K = ε, K+1 = letter).
    pub fn dim(&self, kind: usize) -> usize {
        match kind {
            0 => self.length,
            k if k <= self.epsilons.len() => self.epsilons[k - 1],
            _ => self.letter,
        }
    }

    pub fn max_dim(&self) -> usize {
        (0..self.kinds()).map(|k| self.dim(k)).max().unwrap_or(1)
    }

    /// Head kind addressed at 0-based step `t` of the fixed schedule.
    pub fn kind_at(&self, t: usize) -> usize {
        t.min(self.epsilons.len() + 1)
    }
}

/// Architecture of the image-conditioned recurrent proposal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Filter counts of the 3×3 convolutions, in order.
    pub conv_filters: Vec<usize>,
    /// 0-based indices of the convolutions followed by 2×2 max-pooling.
    pub pool_after: Vec<usize>,
    /// Fully-connected layers after the convolutions; the last width is the
    /// embedding width.
    pub fc_widths: Vec<usize>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub heads: HeadDims,
}

impl ArchConfig {
    /// Three convolutions (8, 16, 16) each followed by pooling, one 128-unit
    /// fully-connected layer, one 64-unit LSTM.
    pub fn desk(style: &StyleSpec) -> Self {
        ArchConfig {
            input_height: style.canvas.height,
            input_width: style.canvas.width,
            conv_filters: vec![8, 16, 16],
            pool_after: vec![0, 1, 2],
            fc_widths: vec![128],
            lstm_hidden: 64,
            lstm_layers: 1,
            heads: HeadDims::for_style(style),
        }
    }

    /// Full-size network: six convolutions (64, 64, 64, 128, 128, 128) with
    /// pooling after the 2nd, 5th and 6th, two 1024-unit fully-connected layers
    /// and two stacked 512-unit LSTMs.
    pub fn large(style: &StyleSpec) -> Self {
        ArchConfig {
            input_height: style.canvas.height,
            input_width: style.canvas.width,
            conv_filters: vec![64, 64, 64, 128, 128, 128],
            pool_after: vec![1, 4, 5],
            fc_widths: vec![1024, 1024],
            lstm_hidden: 512,
            lstm_layers: 2,
            heads: HeadDims::for_style(style),
        }
    }

    /// Very small network for gradient checks and enumeration tests.
    pub fn tiny(style: &StyleSpec) -> Self {
        ArchConfig {
            input_height: style.canvas.height,
            input_width: style.canvas.width,
            conv_filters: vec![2],
            pool_after: vec![0],
            fc_widths: vec![6],
            lstm_hidden: 5,
            lstm_layers: 1,
            heads: HeadDims::for_style(style),
        }
    }

    /// Preset by name: `desk`, `large` or `tiny`.
    pub fn preset(name: &str, style: &StyleSpec) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(style)),
            "large" => Ok(Self::large(style)),
            "tiny" => Ok(Self::tiny(style)),
            other => Err(config_err!("unknown architecture preset {other:?} (desk, large, tiny)")),
        }
    }

    /// A preset name, or a path to a JSON architecture file.
    pub fn resolve(spec: &str, style: &StyleSpec) -> Result<Self> {
        if Path::new(spec).is_file() {
            let arch: ArchConfig = serde_json::from_str(&std::fs::read_to_string(spec)?)?;
            arch.validate()?;
            arch.check_style(style)?;
            Ok(arch)
        } else {
            Self::preset(spec, style)
        }
    }

    /// Spatial size and channel count after the convolution stack.
    pub fn conv_output(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = (self.input_height, self.input_width);
        for i in 0..self.conv_filters.len() {
            if self.pool_after.contains(&i) {
                h /= 2;
                w /= 2;
            }
        }
        (*self.conv_filters.last().unwrap_or(&1), h, w)
    }

    pub fn embedding_width(&self) -> usize {
        match self.fc_widths.last() {
            Some(&w) => w,
            None => {
                let (c, h, w) = self.conv_output();
                c * h * w
            }
        }
    }

    /// Width of the per-step token: padded previous value plus head label.
    pub fn token_width(&self) -> usize {
        self.heads.max_dim() + self.heads.kinds()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 {
            return Err(config_err!("architecture: empty input"));
        }
        if self.conv_filters.contains(&0) || self.fc_widths.contains(&0) {
            return Err(config_err!("architecture: zero-width layer"));
        }
        if let Some(&i) = self.pool_after.iter().find(|&&i| i >= self.conv_filters.len()) {
            return Err(config_err!("architecture: pooling after missing convolution {i}"));
        }
        let (mut h, mut w) = (self.input_height, self.input_width);
        for i in 0..self.conv_filters.len() {
            if self.pool_after.contains(&i) {
                if h < 2 || w < 2 {
                    return Err(config_err!("architecture: pooling {h}×{w} feature map after convolution {i}"));
                }
                h /= 2;
                w /= 2;
            }
        }
        if self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return Err(config_err!("architecture: needs at least one LSTM layer with hidden units"));
        }
        let hd = &self.heads;
        if hd.length_min == 0 || hd.length == 0 || hd.letter == 0 || hd.epsilons.contains(&0) {
            return Err(config_err!("architecture: empty head domain"));
        }
        Ok(())
    }

    /// Input size and head dimensions must match the style exactly.
    pub fn check_style(&self, style: &StyleSpec) -> Result<()> {
        if (self.input_height, self.input_width) != (style.canvas.height, style.canvas.width) {
            return Err(config_err!(
                "architecture expects {}×{} images, style {} renders {}×{}",
                self.input_height,
                self.input_width,
                style.id,
                style.canvas.height,
                style.canvas.width
            ));
        }
        if self.heads != HeadDims::for_style(style) {
            return Err(config_err!(
                "architecture heads {:?} do not match style {} domains {:?}",
                self.heads,
                style.id,
                HeadDims::for_style(style)
            ));
        }
        Ok(())
    }
}
