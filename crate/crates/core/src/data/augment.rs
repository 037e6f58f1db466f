//! Random pad-and-crop plus horizontal flip for image batches.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fill value of the padding border (black in data scale).
pub const PAD_VALUE: f32 = -1.0;

/// Crop an `h x w` window at offset `(oy, ox)` out of one HWC image padded
/// by `pad` pixels on every side.
pub fn crop_padded(img: &[f32], h: usize, w: usize, c: usize, pad: usize, oy: usize, ox: usize) -> Vec<f32> {
    let mut out = vec![PAD_VALUE; h * w * c];
    for y in 0..h {
        let sy = (y + oy) as isize - pad as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = (x + ox) as isize - pad as isize;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let src = (sy as usize * w + sx as usize) * c;
            out[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

/// Mirror one HWC image left to right.
pub fn hflip(img: &[f32], h: usize, w: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * c;
            let dst = (y * w + (w - 1 - x)) * c;
            out[dst..dst + c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

/// Per-sample random crop out of a `pad`-padded image and, when `flip` is
/// set, a horizontal flip with probability 1/2.
pub fn augment(batch: &Tensor<f32>, rng: &mut impl Rng, pad: usize, flip: bool) -> Result<Tensor<f32>> {
    let &[n, h, w, c] = batch.shape() else {
        return Err(Error::dim("augment", batch.shape(), &[0, 8, 8, 0]));
    };
    if h < 8 || w < 8 {
        return Err(Error::dim("augment spatial extent", &[h, w], &[8, 8]));
    }
    let per = h * w * c;
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..n {
        let img = &batch.data()[i * per..(i + 1) * per];
        let oy = rng.random_range(0..=2 * pad);
        let ox = rng.random_range(0..=2 * pad);
        let mut a = crop_padded(img, h, w, c, pad, oy, ox);
        if flip && rng.random_bool(0.5) {
            a = hflip(&a, h, w, c);
        }
        out.extend(a);
    }
    Tensor::new(batch.shape().to_vec(), out)
}
