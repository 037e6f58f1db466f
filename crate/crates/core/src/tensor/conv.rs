use super::{gemm, Scalar, Tensor, Transpose};
use crate::error::{Error, Result};

/// Geometry of a "same"-padded strided convolution over an NHWC image.
///
/// Output extent is `ceil(in / stride)`; the total zero padding
/// `max((out - 1) * stride + size - in, 0)` is split with the smaller half
/// on the top/left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub size: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn same(in_h: usize, in_w: usize, channels: usize, size: usize, stride: usize) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + size).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + size).saturating_sub(in_w);
        Self {
            in_h,
            in_w,
            channels,
            out_h,
            out_w,
            size,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    /// Length of one im2col row.
    pub fn patch_len(&self) -> usize {
        self.size * self.size * self.channels
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.channels
    }

    /// True when im2col is the identity (1x1 kernel, unit stride).
    pub fn is_pointwise(&self) -> bool {
        self.size == 1 && self.stride == 1
    }
}

/// Unfold `batch` NHWC images into a `[batch * out_pixels, patch_len]` matrix.
/// Out-of-image taps are zero.
pub fn im2col<T: Scalar>(input: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let mut cols = vec![T::zero(); batch * g.out_pixels() * g.patch_len()];
    im2col_into(input, batch, g, &mut cols);
    cols
}

/// [`im2col`] into a caller-owned buffer of at least
/// `batch * out_pixels * patch_len` elements.
pub fn im2col_into<T: Scalar>(input: &[T], batch: usize, g: &ConvGeometry, cols: &mut [T]) {
    let patch = g.patch_len();
    let c = g.channels;
    cols[..batch * g.out_pixels() * patch].fill(T::zero());
    for n in 0..batch {
        let img = &input[n * g.in_len()..(n + 1) * g.in_len()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (n * g.out_pixels() + oy * g.out_w + ox) * patch;
                for ky in 0..g.size {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.size {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.in_w + ix as usize) * c;
                        let dst = row + (ky * g.size + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
}

/// Images per block when a batch is lowered in pieces, so one block of
/// im2col rows stays around `CHUNK_ELEMS` elements.
pub fn images_per_chunk(g: &ConvGeometry) -> usize {
    const CHUNK_ELEMS: usize = 1 << 19;
    (CHUNK_ELEMS / (g.out_pixels() * g.patch_len()).max(1)).max(1)
}

/// Adjoint of [`im2col`]: scatter-add patch rows back into `out` images.
pub fn col2im<T: Scalar>(cols: &[T], batch: usize, g: &ConvGeometry, out: &mut [T]) {
    let patch = g.patch_len();
    let c = g.channels;
    for n in 0..batch {
        let img = &mut out[n * g.in_len()..(n + 1) * g.in_len()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (n * g.out_pixels() + oy * g.out_w + ox) * patch;
                for ky in 0..g.size {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.size {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.in_w + ix as usize) * c;
                        let src = row + (ky * g.size + kx) * c;
                        for (o, &v) in img[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

/// Standalone same-padded convolution of an NHWC batch with HWIO filters
/// of shape `[d, d, c_in, k]`.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, filters: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (is, fs) = (input.shape(), filters.shape());
    if is.len() != 4 || fs.len() != 4 || fs[0] != fs[1] || is[3] != fs[2] {
        return Err(Error::dim("conv2d", is, fs));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::dim("conv2d stride", &[stride], &[1, 2]));
    }
    let g = ConvGeometry::same(is[1], is[2], is[3], fs[0], stride);
    let k = fs[3];
    let rows = is[0] * g.out_pixels();
    let cols = im2col(input.data(), is[0], &g);
    let mut out = vec![T::zero(); rows * k];
    gemm(
        Transpose::No,
        Transpose::No,
        rows,
        g.patch_len(),
        k,
        T::one(),
        &cols,
        filters.data(),
        T::zero(),
        &mut out,
    );
    Tensor::new(vec![is[0], g.out_h, g.out_w, k], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution with the same padding convention.
    fn direct_conv(input: &Tensor<f64>, filters: &Tensor<f64>, stride: usize) -> Tensor<f64> {
        let (is, fs) = (input.shape(), filters.shape());
        let g = ConvGeometry::same(is[1], is[2], is[3], fs[0], stride);
        let k = fs[3];
        let mut out = Tensor::zeros(&[is[0], g.out_h, g.out_w, k]);
        for n in 0..is[0] {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for f in 0..k {
                        let mut acc = 0.0;
                        for ky in 0..fs[0] {
                            for kx in 0..fs[1] {
                                let iy = (oy * stride + ky) as isize - g.pad_top as isize;
                                let ix = (ox * stride + kx) as isize - g.pad_left as isize;
                                if iy < 0 || ix < 0 || iy >= is[1] as isize || ix >= is[2] as isize {
                                    continue;
                                }
                                for c in 0..is[3] {
                                    let x = input.data()[((n * is[1] + iy as usize) * is[2] + ix as usize) * is[3] + c];
                                    let w = filters.data()[((ky * fs[1] + kx) * fs[2] + c) * k + f];
                                    acc += x * w;
                                }
                            }
                        }
                        out.data_mut()[((n * g.out_h + oy) * g.out_w + ox) * k + f] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_bitwise_identity() {
        let x = Tensor::<f32>::full(&[1, 4, 4, 1], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d_forward(&x, &w, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn strided_three_by_three_on_ones() {
        let x = Tensor::<f64>::full(&[1, 4, 4, 1], 1.0);
        let w = Tensor::<f64>::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d_forward(&x, &w, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        let oracle = direct_conv(&x, &w, 2);
        assert_eq!(y, oracle);
        // Frozen from the direct-summation oracle: top-left window lies fully
        // inside the image, the others overlap the bottom/right zero padding.
        assert_eq!(y.data(), &[9.0, 6.0, 6.0, 4.0]);
    }

    #[test]
    fn zero_filter_annihilates() {
        let x = Tensor::<f32>::new(vec![2, 5, 5, 3], (0..150).map(|i| i as f32).collect()).unwrap();
        let w = Tensor::<f32>::zeros(&[3, 3, 3, 4]);
        let y = conv2d_forward(&x, &w, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_direct_summation_on_random_input() {
        let x = Tensor::<f64>::new(vec![2, 7, 6, 3], (0..252).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect()).unwrap();
        let w = Tensor::<f64>::new(vec![5, 5, 3, 2], (0..150).map(|i| ((i * 13 % 29) as f64 / 14.0) - 1.0).collect()).unwrap();
        for stride in [1, 2] {
            let y = conv2d_forward(&x, &w, stride).unwrap();
            let want = direct_conv(&x, &w, stride);
            assert!(y.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 2]);
        let w = Tensor::<f32>::zeros(&[3, 3, 1, 1]);
        let err = conv2d_forward(&x, &w, 1).unwrap_err();
        assert!(err.to_string().contains("[1, 4, 4, 2]"));
        assert!(err.to_string().contains("[3, 3, 1, 1]"));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::same(6, 5, 2, 3, 2);
        let x: Vec<f64> = (0..2 * g.in_len()).map(|i| (i as f64 * 0.7).sin()).collect();
        let cols = im2col(&x, 2, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut back = vec![0.0; x.len()];
        col2im(&y, 2, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
