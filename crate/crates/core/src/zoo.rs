//! Discriminator and generator architectures.
//!
//! Layer lists follow the `conv2d(d, s, k)` / `deconv2d(d, s, k)` /
//! `residual-block(d, s, k)` notation. Residual blocks are pre-activation
//! (BN, ReLU, conv, BN, ReLU, conv) with a 1x1 stride-s projection shortcut
//! whenever the block changes shape.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    D1,
    D2,
    G0,
    G1,
    G2,
    G3,
}

impl Family {
    pub fn is_generator(self) -> bool {
        matches!(self, Self::G0 | Self::G1 | Self::G2 | Self::G3)
    }

    fn name(self) -> &'static str {
        match self {
            Self::D1 => "D1",
            Self::D2 => "D2",
            Self::G0 => "G0",
            Self::G1 => "G1",
            Self::G2 => "G2",
            Self::G3 => "G3",
        }
    }
}

/// Architecture family plus its width and class/channel counts.
///
/// String form: `"D1"`, `"G1:k=8"`, `"D2:w=2,classes=100,c=3"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureId {
    pub family: Family,
    /// Generator width `k`, or the D2 width multiplier. Unused by D1.
    pub width: usize,
    pub classes: usize,
    /// Image channels `c`.
    pub channels: usize,
}

pub const DEFAULT_GENERATOR_WIDTH: usize = 64;
pub const LABEL_GENERATOR_WIDTH: usize = 16;

impl ArchitectureId {
    pub fn new(family: Family) -> Self {
        let (width, channels) = match family {
            Family::D1 => (1, 1),
            Family::D2 => (1, 3),
            Family::G0 => (DEFAULT_GENERATOR_WIDTH, 1),
            Family::G1 | Family::G2 => (DEFAULT_GENERATOR_WIDTH, 3),
            Family::G3 => (LABEL_GENERATOR_WIDTH, 3),
        };
        Self {
            family,
            width,
            classes: 10,
            channels,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    /// Per-sample input shape the architecture is defined for.
    pub fn default_input_shape(&self) -> Vec<usize> {
        match self.family {
            Family::D1 | Family::G0 => vec![28, 28, self.channels],
            Family::D2 | Family::G1 => vec![32, 32, self.channels],
            Family::G2 => vec![256 * self.width],
            Family::G3 => vec![self.classes],
        }
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = Self::new(self.family);
        let mut opts = Vec::new();
        if self.width != d.width {
            opts.push(format!("{}={}", if self.family == Family::D2 { "w" } else { "k" }, self.width));
        }
        if self.classes != d.classes {
            opts.push(format!("classes={}", self.classes));
        }
        if self.channels != d.channels {
            opts.push(format!("c={}", self.channels));
        }
        if opts.is_empty() {
            write!(f, "{}", self.family.name())
        } else {
            write!(f, "{}:{}", self.family.name(), opts.join(","))
        }
    }
}

impl FromStr for ArchitectureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, opts) = s.split_once(':').unwrap_or((s, ""));
        let family = match head.trim() {
            "D1" => Family::D1,
            "D2" => Family::D2,
            "G0" => Family::G0,
            "G1" => Family::G1,
            "G2" => Family::G2,
            "G3" => Family::G3,
            other => return Err(Error::config("architecture", format!("unknown architecture `{other}`"))),
        };
        let mut id = Self::new(family);
        for opt in opts.split(',').map(str::trim).filter(|o| !o.is_empty()) {
            let (key, value) = opt
                .split_once('=')
                .ok_or_else(|| Error::config("architecture", format!("expected key=value, got `{opt}`")))?;
            let value: usize = value
                .trim()
                .parse()
                .map_err(|_| Error::config("architecture", format!("`{opt}` is not a positive integer")))?;
            if value == 0 {
                return Err(Error::config("architecture", format!("`{opt}` must be positive")));
            }
            match key.trim() {
                "k" | "w" => id.width = value,
                "classes" => id.classes = value,
                "c" => id.channels = value,
                other => return Err(Error::config("architecture", format!("unknown option `{other}`"))),
            }
        }
        Ok(id)
    }
}

fn conv_bn_relu(out: &mut Vec<LayerSpec>, size: usize, stride: usize, filters: usize) {
    out.extend([LayerSpec::conv(size, stride, filters), LayerSpec::BatchNorm, LayerSpec::Relu]);
}

fn deconv_bn_relu(out: &mut Vec<LayerSpec>, size: usize, stride: usize, filters: usize) {
    out.extend([LayerSpec::deconv(size, stride, filters), LayerSpec::BatchNorm, LayerSpec::Relu]);
}

fn residual_decoder(out: &mut Vec<LayerSpec>, k: usize, c: usize) {
    for _ in 0..6 {
        out.push(LayerSpec::residual(3, 1, 4 * k));
    }
    deconv_bn_relu(out, 3, 2, 2 * k);
    deconv_bn_relu(out, 3, 2, k);
    out.extend([LayerSpec::conv_bias(3, 1, c), LayerSpec::Tanh]);
}

fn unsupported(id: &ArchitectureId, input: &[usize], want: &str) -> Error {
    Error::config("architecture", format!("{id} does not accept input shape {input:?} (expected {want})"))
}

/// Layer list of `id` for per-sample `input` shape.
pub fn layer_specs(id: &ArchitectureId, input: &[usize]) -> Result<Vec<LayerSpec>> {
    let (k, c) = (id.width, id.channels);
    let mut l = Vec::new();
    match id.family {
        Family::D1 => {
            match input {
                [h, w, ch] if h % 4 == 0 && w % 4 == 0 && *ch == c => {}
                _ => return Err(unsupported(id, input, "H x W x c with H, W divisible by 4")),
            }
            l.extend([
                LayerSpec::conv_bias(5, 1, 32),
                LayerSpec::Relu,
                LayerSpec::MaxPool { stride: 2 },
                LayerSpec::conv_bias(5, 1, 64),
                LayerSpec::Relu,
                LayerSpec::MaxPool { stride: 2 },
                LayerSpec::dense(id.classes),
            ]);
        }
        Family::D2 => {
            if input != [32, 32, c] {
                return Err(unsupported(id, input, "32 x 32 x c"));
            }
            l.push(LayerSpec::conv(3, 1, 16 * k));
            for (stride, filters) in [(1, 16), (1, 16), (1, 16), (2, 32), (1, 32), (1, 32), (2, 64), (1, 64), (1, 64)] {
                l.push(LayerSpec::residual(3, stride, filters * k));
            }
            l.extend([
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::AvgPool { stride: 8 },
                LayerSpec::dense(id.classes),
            ]);
        }
        Family::G0 => {
            match input {
                [h, w, ch] if h % 4 == 0 && w % 4 == 0 && *ch == c => {}
                _ => return Err(unsupported(id, input, "H x W x c with H, W divisible by 4")),
            }
            conv_bn_relu(&mut l, 5, 2, k);
            conv_bn_relu(&mut l, 5, 2, 2 * k);
            deconv_bn_relu(&mut l, 5, 2, k);
            l.extend([LayerSpec::deconv_bias(5, 2, c), LayerSpec::Tanh]);
        }
        Family::G1 => {
            match input {
                [h, w, ch] if h % 4 == 0 && w % 4 == 0 && *ch == c => {}
                _ => return Err(unsupported(id, input, "H x W x c with H, W divisible by 4")),
            }
            conv_bn_relu(&mut l, 3, 1, k);
            conv_bn_relu(&mut l, 3, 2, k);
            conv_bn_relu(&mut l, 3, 2, 2 * k);
            residual_decoder(&mut l, k, c);
        }
        Family::G2 => {
            if input != [256 * k] {
                return Err(unsupported(id, input, &format!("a noise vector of length {}", 256 * k)));
            }
            l.push(LayerSpec::reshape(&[8, 8, 4 * k]));
            residual_decoder(&mut l, k, c);
        }
        Family::G3 => {
            if input != [id.classes] {
                return Err(unsupported(id, input, &format!("a one-hot vector of length {}", id.classes)));
            }
            l.extend([LayerSpec::dense(256 * k), LayerSpec::reshape(&[8, 8, 4 * k])]);
            residual_decoder(&mut l, k, c);
        }
    }
    Ok(l)
}

/// Builds and initializes `id` for its default input shape.
pub fn build_network<T: Scalar>(id: &ArchitectureId, rng: &mut impl Rng) -> Result<Model<T>> {
    build_network_for(id, &id.default_input_shape(), rng)
}

/// Builds and initializes `id` for a per-sample `input` shape.
pub fn build_network_for<T: Scalar>(id: &ArchitectureId, input: &[usize], rng: &mut impl Rng) -> Result<Model<T>> {
    let specs = layer_specs(id, input)?;
    Model::sequential(id.to_string(), input, &specs, rng)
}

/// Compiles `id` with all parameters zero; used to restore checkpoints.
pub fn compile_network<T: Scalar>(id: &ArchitectureId, input: &[usize]) -> Result<Model<T>> {
    let specs = layer_specs(id, input)?;
    Model::compile(id.to_string(), input, &specs)
}
