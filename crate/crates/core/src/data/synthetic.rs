//! Small generated datasets for fast tests.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// 8x8x1 images from two class-conditional Gaussians whose means sit
    /// 3 standard deviations either side of a hyperplane.
    TwoGaussians,
    /// 8x8x1 uniform noise in [-1, 1] with uniform random labels over 10 classes.
    TinyImages,
}

const SIDE: usize = 8;
const SIGMA: f64 = 0.15;

/// Generates `n >= 2` samples. Two-gaussians labels alternate 0, 1, 0, ...
pub fn make_synthetic(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::config("data.n", format!("synthetic datasets need n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = SIDE * SIDE;
    let mut pixels = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    match kind {
        SyntheticKind::TwoGaussians => {
            // Unit direction fixed per seed; class means at +-3 sigma along it.
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let mut dir: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v /= norm);
            let noise = Normal::new(0.0, SIGMA).expect("finite sigma");
            for i in 0..n {
                let y = i % 2;
                let s = if y == 0 { -3.0 * SIGMA } else { 3.0 * SIGMA };
                for &u in &dir {
                    pixels.push((s * u + noise.sample(&mut rng)).clamp(-1.0, 1.0) as f32);
                }
                labels.push(y);
            }
            let images = Tensor::new(vec![n, SIDE, SIDE, 1], pixels)?;
            Dataset::new(images, labels, 2, "synthetic:two-gaussians")
        }
        SyntheticKind::TinyImages => {
            for _ in 0..n {
                for _ in 0..d {
                    pixels.push(rng.random_range(-1.0f32..=1.0));
                }
                labels.push(rng.random_range(0..10));
            }
            let images = Tensor::new(vec![n, SIDE, SIDE, 1], pixels)?;
            Dataset::new(images, labels, 10, "synthetic:tiny-images")
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-gaussians" => Ok(Self::TwoGaussians),
            "tiny-images" => Ok(Self::TinyImages),
            other => Err(Error::config("data.source", format!("unknown synthetic dataset `{other}`"))),
        }
    }
}

/// Parses `synthetic:<kind>:n=<n>:seed=<seed>` into its parts.
pub fn parse_synthetic(spec: &str) -> Result<(SyntheticKind, usize, u64)> {
    let mut parts = spec.split(':');
    if parts.next() != Some("synthetic") {
        return Err(Error::config("data.source", format!("`{spec}` is not a synthetic dataset spec")));
    }
    let kind: SyntheticKind = parts
        .next()
        .ok_or_else(|| Error::config("data.source", "missing synthetic kind"))?
        .parse()?;
    let (mut n, mut seed) = (1000, 0);
    for p in parts {
        let bad = || Error::config("data.source", format!("bad synthetic option `{p}`"));
        let (k, v) = p.split_once('=').ok_or_else(bad)?;
        match k {
            "n" => n = v.parse().map_err(|_| bad())?,
            "seed" => seed = v.parse().map_err(|_| bad())?,
            _ => return Err(bad()),
        }
    }
    Ok((kind, n, seed))
}
