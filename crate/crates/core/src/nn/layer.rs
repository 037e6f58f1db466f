//! Layer kinds used by the D/G architectures, with hand-written reverse-mode
//! rules. Every layer maps a batch `[N, ..per_sample]` to `[N, ..per_sample']`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{col2im, gemm, im2col_into, images_per_chunk, ConvGeometry, Scalar, Tensor, Transpose};

pub(crate) const BN_EPSILON: f64 = 1e-5;

/// Declarative layer description in the appendix notation:
/// `conv2d(d, s, k)` is `k` filters of size `d x d` applied with stride `s`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d { size: usize, stride: usize, filters: usize, bias: bool },
    Deconv2d { size: usize, stride: usize, filters: usize, bias: bool },
    Dense { units: usize, bias: bool },
    BatchNorm,
    MaxPool { stride: usize },
    AvgPool { stride: usize },
    Relu,
    Tanh,
    Reshape { shape: Vec<usize> },
    ResidualBlock { size: usize, stride: usize, filters: usize },
}

impl LayerSpec {
    pub fn conv(size: usize, stride: usize, filters: usize) -> Self {
        Self::Conv2d { size, stride, filters, bias: false }
    }

    pub fn conv_bias(size: usize, stride: usize, filters: usize) -> Self {
        Self::Conv2d { size, stride, filters, bias: true }
    }

    pub fn deconv(size: usize, stride: usize, filters: usize) -> Self {
        Self::Deconv2d { size, stride, filters, bias: false }
    }

    pub fn deconv_bias(size: usize, stride: usize, filters: usize) -> Self {
        Self::Deconv2d { size, stride, filters, bias: true }
    }

    pub fn dense(units: usize) -> Self {
        Self::Dense { units, bias: true }
    }

    pub fn residual(size: usize, stride: usize, filters: usize) -> Self {
        Self::ResidualBlock { size, stride, filters }
    }

    pub fn reshape(shape: &[usize]) -> Self {
        Self::Reshape { shape: shape.to_vec() }
    }
}

/// What a parameter entry is; weight decay applies to `Weight` only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl EntryKind {
    pub fn is_buffer(self) -> bool {
        matches!(self, Self::RunningMean | Self::RunningVar)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Self::Weight,
            1 => Self::Bias,
            2 => Self::BnScale,
            3 => Self::BnShift,
            4 => Self::RunningMean,
            5 => Self::RunningVar,
            _ => return None,
        })
    }
}

/// Named slice of the flat parameter (or buffer) vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: EntryKind,
    /// Fan-in of the weight (number of inputs feeding one output).
    pub fan_in: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Slot {
    offset: usize,
    len: usize,
}

impl Slot {
    fn get<'a, T>(&self, v: &'a [T]) -> &'a [T] {
        &v[self.offset..self.offset + self.len]
    }

    fn get_mut<'a, T>(&self, v: &'a mut [T]) -> &'a mut [T] {
        &mut v[self.offset..self.offset + self.len]
    }
}

/// Allocates parameter and buffer entries while a network is compiled.
#[derive(Default)]
pub(crate) struct Allocator {
    pub entries: Vec<ParamEntry>,
    pub params_len: usize,
    pub buffers_len: usize,
}

impl Allocator {
    fn alloc(&mut self, name: String, shape: Vec<usize>, kind: EntryKind, fan_in: usize) -> Slot {
        let len: usize = shape.iter().product();
        let offset = if kind.is_buffer() {
            let o = self.buffers_len;
            self.buffers_len += len;
            o
        } else {
            let o = self.params_len;
            self.params_len += len;
            o
        };
        self.entries.push(ParamEntry {
            name,
            shape,
            offset,
            kind,
            fan_in,
        });
        Slot { offset, len }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Kind {
    Conv {
        geom: ConvGeometry,
        filters: usize,
        w: Slot,
        b: Option<Slot>,
    },
    /// Transposed convolution; `geom` describes the forward convolution that
    /// maps the (larger) output image back onto the input grid.
    Deconv {
        geom: ConvGeometry,
        in_c: usize,
        w: Slot,
        b: Option<Slot>,
    },
    Dense {
        inputs: usize,
        units: usize,
        w: Slot,
        b: Option<Slot>,
    },
    BatchNorm {
        channels: usize,
        gamma: Slot,
        beta: Slot,
        mean: Slot,
        var: Slot,
    },
    MaxPool {
        stride: usize,
    },
    AvgPool {
        stride: usize,
    },
    Relu,
    Tanh,
    Reshape,
    Residual {
        path: Vec<Layer>,
        shortcut: Option<Box<Layer>>,
    },
}

/// A compiled layer: spec plus resolved shapes and parameter slots.
#[derive(Clone, Debug)]
pub(crate) struct Layer {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub kind: Kind,
}

/// Per-layer record kept by a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub(crate) enum Cache<T> {
    Input(Vec<T>),
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_mean: Vec<T>,
        batch_var: Vec<T>,
        train: bool,
    },
    Argmax(Vec<u32>),
    Mask(Vec<bool>),
    Output(Vec<T>),
    Nothing,
    Residual {
        path: Vec<Cache<T>>,
        shortcut: Option<Box<Cache<T>>>,
    },
}

fn image_shape(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(Error::dim(op, shape, &[0, 0, 0])),
    }
}

fn check_stride(op: &'static str, stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(Error::dim(op, &[stride], &[1, 2]))
    }
}

impl Layer {
    pub fn compile(spec: &LayerSpec, in_shape: &[usize], name: &str, alloc: &mut Allocator) -> Result<Layer> {
        let (out_shape, kind) = match spec {
            &LayerSpec::Conv2d { size, stride, filters, bias } => {
                check_stride("conv2d stride", stride)?;
                let (h, w, c) = image_shape("conv2d input", in_shape)?;
                let geom = ConvGeometry::same(h, w, c, size, stride);
                let ws = alloc.alloc(format!("{name}.w"), vec![size, size, c, filters], EntryKind::Weight, size * size * c);
                let bs = bias.then(|| alloc.alloc(format!("{name}.b"), vec![filters], EntryKind::Bias, 0));
                (
                    vec![geom.out_h, geom.out_w, filters],
                    Kind::Conv { geom, filters, w: ws, b: bs },
                )
            }
            &LayerSpec::Deconv2d { size, stride, filters, bias } => {
                check_stride("deconv2d stride", stride)?;
                let (h, w, c) = image_shape("deconv2d input", in_shape)?;
                let geom = ConvGeometry::same(h * stride, w * stride, filters, size, stride);
                debug_assert_eq!((geom.out_h, geom.out_w), (h, w));
                // Each output pixel receives about (size / stride)^2 taps per input channel.
                let fan_in = ((size * size * c) / (stride * stride)).max(1);
                let ws = alloc.alloc(format!("{name}.w"), vec![size, size, filters, c], EntryKind::Weight, fan_in);
                let bs = bias.then(|| alloc.alloc(format!("{name}.b"), vec![filters], EntryKind::Bias, 0));
                (
                    vec![h * stride, w * stride, filters],
                    Kind::Deconv { geom, in_c: c, w: ws, b: bs },
                )
            }
            &LayerSpec::Dense { units, bias } => {
                let inputs: usize = in_shape.iter().product();
                let ws = alloc.alloc(format!("{name}.w"), vec![inputs, units], EntryKind::Weight, inputs);
                let bs = bias.then(|| alloc.alloc(format!("{name}.b"), vec![units], EntryKind::Bias, 0));
                (vec![units], Kind::Dense { inputs, units, w: ws, b: bs })
            }
            LayerSpec::BatchNorm => {
                let channels = *in_shape
                    .last()
                    .ok_or_else(|| Error::dim("batch-norm input", in_shape, &[1]))?;
                let gamma = alloc.alloc(format!("{name}.gamma"), vec![channels], EntryKind::BnScale, 0);
                let beta = alloc.alloc(format!("{name}.beta"), vec![channels], EntryKind::BnShift, 0);
                let mean = alloc.alloc(format!("{name}.running_mean"), vec![channels], EntryKind::RunningMean, 0);
                let var = alloc.alloc(format!("{name}.running_var"), vec![channels], EntryKind::RunningVar, 0);
                (
                    in_shape.to_vec(),
                    Kind::BatchNorm { channels, gamma, beta, mean, var },
                )
            }
            &LayerSpec::MaxPool { stride } | &LayerSpec::AvgPool { stride } => {
                let (h, w, c) = image_shape("pool input", in_shape)?;
                if stride == 0 {
                    return Err(Error::dim("pool stride", &[stride], &[1]));
                }
                let out = vec![h.div_ceil(stride), w.div_ceil(stride), c];
                let kind = if matches!(spec, LayerSpec::MaxPool { .. }) {
                    Kind::MaxPool { stride }
                } else {
                    Kind::AvgPool { stride }
                };
                (out, kind)
            }
            LayerSpec::Relu => (in_shape.to_vec(), Kind::Relu),
            LayerSpec::Tanh => (in_shape.to_vec(), Kind::Tanh),
            LayerSpec::Reshape { shape } => {
                let a: usize = in_shape.iter().product();
                let b: usize = shape.iter().product();
                if a != b {
                    return Err(Error::dim("reshape", in_shape, shape));
                }
                (shape.clone(), Kind::Reshape)
            }
            &LayerSpec::ResidualBlock { size, stride, filters } => {
                check_stride("residual-block stride", stride)?;
                let (_, _, c) = image_shape("residual-block input", in_shape)?;
                let path_specs = [
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    LayerSpec::conv(size, stride, filters),
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    LayerSpec::conv(size, 1, filters),
                ];
                let mut path = Vec::with_capacity(path_specs.len());
                let mut shape = in_shape.to_vec();
                for (i, s) in path_specs.iter().enumerate() {
                    let l = Layer::compile(s, &shape, &format!("{name}.path{i}"), alloc)?;
                    shape = l.out_shape.clone();
                    path.push(l);
                }
                let shortcut = if stride != 1 || c != filters {
                    let l = Layer::compile(&LayerSpec::conv(1, stride, filters), in_shape, &format!("{name}.shortcut"), alloc)?;
                    Some(Box::new(l))
                } else {
                    None
                };
                (shape, Kind::Residual { path, shortcut })
            }
        };
        Ok(Layer {
            spec: spec.clone(),
            in_shape: in_shape.to_vec(),
            out_shape,
            kind,
        })
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    fn batched(&self, batch: usize, per: &[usize]) -> Vec<usize> {
        let mut s = Vec::with_capacity(per.len() + 1);
        s.push(batch);
        s.extend_from_slice(per);
        s
    }

    /// Runs the layer. With `record`, returns what backward needs.
    pub fn forward<T: Scalar>(
        &self,
        params: &[T],
        buffers: &[T],
        x: Tensor<T>,
        train: bool,
        record: bool,
    ) -> Result<(Tensor<T>, Option<Cache<T>>)> {
        let n = x.batch();
        let out_shape = self.batched(n, &self.out_shape);
        match &self.kind {
            Kind::Conv { geom, filters, w, b } => {
                let rows = n * geom.out_pixels();
                let mut out = vec![T::zero(); rows * filters];
                if let Some(b) = b {
                    for row in out.chunks_mut(*filters) {
                        row.copy_from_slice(b.get(params));
                    }
                }
                let beta = if b.is_some() { T::one() } else { T::zero() };
                let (patch, px) = (geom.patch_len(), geom.out_pixels());
                if geom.is_pointwise() {
                    gemm(Transpose::No, Transpose::No, rows, patch, *filters, T::one(), x.data(), w.get(params), beta, &mut out);
                } else {
                    let step = images_per_chunk(geom);
                    let mut cols = vec![T::zero(); step.min(n) * px * patch];
                    for s in (0..n).step_by(step) {
                        let e = (s + step).min(n);
                        let m = (e - s) * px;
                        im2col_into(&x.data()[s * geom.in_len()..e * geom.in_len()], e - s, geom, &mut cols);
                        let o = &mut out[s * px * filters..e * px * filters];
                        gemm(Transpose::No, Transpose::No, m, patch, *filters, T::one(), &cols, w.get(params), beta, o);
                    }
                }
                let cache = record.then(|| Cache::Input(x.into_data()));
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            Kind::Deconv { geom, in_c, w, b } => {
                let (patch, px) = (geom.patch_len(), geom.out_pixels());
                let mut out = vec![T::zero(); n * geom.in_len()];
                let step = images_per_chunk(geom);
                let mut cols = vec![T::zero(); step.min(n) * px * patch];
                for s in (0..n).step_by(step) {
                    let e = (s + step).min(n);
                    let m = (e - s) * px;
                    let xs = &x.data()[s * px * in_c..e * px * in_c];
                    gemm(Transpose::No, Transpose::Yes, m, *in_c, patch, T::one(), xs, w.get(params), T::zero(), &mut cols);
                    col2im(&cols, e - s, geom, &mut out[s * geom.in_len()..e * geom.in_len()]);
                }
                if let Some(b) = b {
                    let bias = b.get(params);
                    for px in out.chunks_mut(geom.channels) {
                        for (o, &bv) in px.iter_mut().zip(bias) {
                            *o += bv;
                        }
                    }
                }
                let cache = record.then(|| Cache::Input(x.into_data()));
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            Kind::Dense { inputs, units, w, b } => {
                let mut out = vec![T::zero(); n * units];
                if let Some(b) = b {
                    for row in out.chunks_mut(*units) {
                        row.copy_from_slice(b.get(params));
                    }
                }
                let beta = if b.is_some() { T::one() } else { T::zero() };
                gemm(Transpose::No, Transpose::No, n, *inputs, *units, T::one(), x.data(), w.get(params), beta, &mut out);
                let cache = record.then(|| Cache::Input(x.into_data()));
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            Kind::BatchNorm { channels, gamma, beta, mean, var } => {
                let c = *channels;
                let m = x.len() / c;
                let eps = T::from_f64(BN_EPSILON);
                let (mu, sigma2) = if train {
                    let mut mu = vec![T::zero(); c];
                    for px in x.data().chunks(c) {
                        for (a, &v) in mu.iter_mut().zip(px) {
                            *a += v;
                        }
                    }
                    let inv_m = T::one() / T::from_f64(m as f64);
                    mu.iter_mut().for_each(|a| *a *= inv_m);
                    let mut s2 = vec![T::zero(); c];
                    for px in x.data().chunks(c) {
                        for ((a, &v), &mv) in s2.iter_mut().zip(px).zip(&mu) {
                            let d = v - mv;
                            *a += d * d;
                        }
                    }
                    s2.iter_mut().for_each(|a| *a *= inv_m);
                    (mu, s2)
                } else {
                    (mean.get(buffers).to_vec(), var.get(buffers).to_vec())
                };
                let inv_std: Vec<T> = sigma2.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let g = gamma.get(params);
                let bt = beta.get(params);
                let mut data = x.into_data();
                let mut xhat = if record { Vec::with_capacity(data.len()) } else { Vec::new() };
                for px in data.chunks_mut(c) {
                    for j in 0..c {
                        let h = (px[j] - mu[j]) * inv_std[j];
                        if record {
                            xhat.push(h);
                        }
                        px[j] = g[j] * h + bt[j];
                    }
                }
                let cache = record.then_some(Cache::BatchNorm {
                    xhat,
                    inv_std,
                    batch_mean: mu,
                    batch_var: sigma2,
                    train,
                });
                Ok((Tensor::new(out_shape, data)?, cache))
            }
            Kind::MaxPool { stride } => {
                let (h, w, c) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (oh, ow) = (self.out_shape[0], self.out_shape[1]);
                let mut out = vec![T::zero(); n * oh * ow * c];
                let mut arg = vec![0u32; out.len()];
                let xd = x.data();
                for b in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let mut best_i = usize::MAX;
                                let mut best = T::neg_infinity();
                                // Row-major scan with strict comparison: the first
                                // maximal element wins ties.
                                for ky in 0..*stride {
                                    let iy = oy * stride + ky;
                                    if iy >= h {
                                        break;
                                    }
                                    for kx in 0..*stride {
                                        let ix = ox * stride + kx;
                                        if ix >= w {
                                            break;
                                        }
                                        let i = ((b * h + iy) * w + ix) * c + ch;
                                        if best_i == usize::MAX || xd[i] > best {
                                            best = xd[i];
                                            best_i = i;
                                        }
                                    }
                                }
                                let o = ((b * oh + oy) * ow + ox) * c + ch;
                                out[o] = best;
                                arg[o] = best_i as u32;
                            }
                        }
                    }
                }
                let cache = record.then_some(Cache::Argmax(arg));
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            Kind::AvgPool { stride } => {
                let (h, w, c) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (oh, ow) = (self.out_shape[0], self.out_shape[1]);
                let mut out = vec![T::zero(); n * oh * ow * c];
                let xd = x.data();
                for b in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let y1 = ((oy + 1) * stride).min(h);
                            let x1 = ((ox + 1) * stride).min(w);
                            let count = T::from_f64(((y1 - oy * stride) * (x1 - ox * stride)) as f64);
                            let o = ((b * oh + oy) * ow + ox) * c;
                            for iy in oy * stride..y1 {
                                for ix in ox * stride..x1 {
                                    let i = ((b * h + iy) * w + ix) * c;
                                    for ch in 0..c {
                                        out[o + ch] += xd[i + ch];
                                    }
                                }
                            }
                            for v in &mut out[o..o + c] {
                                *v = *v / count;
                            }
                        }
                    }
                }
                let cache = record.then_some(Cache::Nothing);
                Ok((Tensor::new(out_shape, out)?, cache))
            }
            Kind::Relu => {
                let mut data = x.into_data();
                let mut mask = if record { Vec::with_capacity(data.len()) } else { Vec::new() };
                for v in data.iter_mut() {
                    let on = *v > T::zero();
                    if !on {
                        *v = T::zero();
                    }
                    if record {
                        mask.push(on);
                    }
                }
                let cache = record.then_some(Cache::Mask(mask));
                Ok((Tensor::new(out_shape, data)?, cache))
            }
            Kind::Tanh => {
                let mut data = x.into_data();
                data.iter_mut().for_each(|v| *v = v.tanh());
                let cache = record.then(|| Cache::Output(data.clone()));
                Ok((Tensor::new(out_shape, data)?, cache))
            }
            Kind::Reshape => {
                let cache = record.then_some(Cache::Nothing);
                Ok((x.reshape(&out_shape)?, cache))
            }
            Kind::Residual { path, shortcut } => {
                let (short_out, short_cache) = match shortcut {
                    Some(l) => {
                        let (y, c) = l.forward(params, buffers, x.clone(), train, record)?;
                        (y, c.map(Box::new))
                    }
                    None => (x.clone(), None),
                };
                let mut y = x;
                let mut caches = Vec::with_capacity(path.len());
                for l in path {
                    let (next, c) = l.forward(params, buffers, y, train, record)?;
                    y = next;
                    if let Some(c) = c {
                        caches.push(c);
                    }
                }
                for (a, &b) in y.data_mut().iter_mut().zip(short_out.data()) {
                    *a += b;
                }
                let cache = record.then_some(Cache::Residual {
                    path: caches,
                    shortcut: short_cache,
                });
                Ok((y, cache))
            }
        }
    }

    /// Propagates `dy` to the layer input, accumulating parameter gradients
    /// into `grads` when given. With `need_input == false` the returned
    /// tensor may be empty.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &Cache<T>,
        dy: Tensor<T>,
        mut grads: Option<&mut [T]>,
        need_input: bool,
    ) -> Result<Tensor<T>> {
        let n = dy.batch();
        let in_shape = self.batched(n, &self.in_shape);
        match (&self.kind, cache) {
            (Kind::Conv { geom, filters, w, b }, Cache::Input(x)) => {
                let (patch, px) = (geom.patch_len(), geom.out_pixels());
                let rows = n * px;
                let step = images_per_chunk(geom);
                let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); step.min(n) * px * patch] };
                if let Some(g) = grads.as_deref_mut() {
                    if geom.is_pointwise() {
                        gemm(Transpose::Yes, Transpose::No, patch, rows, *filters, T::one(), x, dy.data(), T::one(), w.get_mut(g));
                    } else {
                        for s in (0..n).step_by(step) {
                            let e = (s + step).min(n);
                            let m = (e - s) * px;
                            im2col_into(&x[s * geom.in_len()..e * geom.in_len()], e - s, geom, &mut cols);
                            let dys = &dy.data()[s * px * filters..e * px * filters];
                            gemm(Transpose::Yes, Transpose::No, patch, m, *filters, T::one(), &cols, dys, T::one(), w.get_mut(g));
                        }
                    }
                    if let Some(b) = b {
                        let gb = b.get_mut(g);
                        for row in dy.data().chunks(*filters) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
                if !need_input {
                    return Ok(Tensor::zeros(&[0]));
                }
                if geom.is_pointwise() {
                    let mut dx = vec![T::zero(); rows * patch];
                    gemm(Transpose::No, Transpose::Yes, rows, *filters, patch, T::one(), dy.data(), w.get(params), T::zero(), &mut dx);
                    return Tensor::new(in_shape, dx);
                }
                let mut dx = vec![T::zero(); n * geom.in_len()];
                for s in (0..n).step_by(step) {
                    let e = (s + step).min(n);
                    let m = (e - s) * px;
                    let dys = &dy.data()[s * px * filters..e * px * filters];
                    gemm(Transpose::No, Transpose::Yes, m, *filters, patch, T::one(), dys, w.get(params), T::zero(), &mut cols);
                    col2im(&cols, e - s, geom, &mut dx[s * geom.in_len()..e * geom.in_len()]);
                }
                Tensor::new(in_shape, dx)
            }
            (Kind::Deconv { geom, in_c, w, b }, Cache::Input(x)) => {
                let (patch, px) = (geom.patch_len(), geom.out_pixels());
                let step = images_per_chunk(geom);
                let mut dcols = vec![T::zero(); step.min(n) * px * patch];
                let mut dx = if need_input { vec![T::zero(); n * px * in_c] } else { Vec::new() };
                for s in (0..n).step_by(step) {
                    let e = (s + step).min(n);
                    let m = (e - s) * px;
                    im2col_into(&dy.data()[s * geom.in_len()..e * geom.in_len()], e - s, geom, &mut dcols);
                    if let Some(g) = grads.as_deref_mut() {
                        let xs = &x[s * px * in_c..e * px * in_c];
                        gemm(Transpose::Yes, Transpose::No, patch, m, *in_c, T::one(), &dcols, xs, T::one(), w.get_mut(g));
                    }
                    if need_input {
                        let dxs = &mut dx[s * px * in_c..e * px * in_c];
                        gemm(Transpose::No, Transpose::No, m, patch, *in_c, T::one(), &dcols, w.get(params), T::zero(), dxs);
                    }
                }
                if let Some(g) = grads.as_deref_mut() {
                    if let Some(b) = b {
                        let gb = b.get_mut(g);
                        for px in dy.data().chunks(geom.channels) {
                            for (a, &v) in gb.iter_mut().zip(px) {
                                *a += v;
                            }
                        }
                    }
                }
                if !need_input {
                    return Ok(Tensor::zeros(&[0]));
                }
                Tensor::new(in_shape, dx)
            }
            (Kind::Dense { inputs, units, w, b }, Cache::Input(x)) => {
                if let Some(g) = grads.as_deref_mut() {
                    gemm(Transpose::Yes, Transpose::No, *inputs, n, *units, T::one(), x, dy.data(), T::one(), w.get_mut(g));
                    if let Some(b) = b {
                        let gb = b.get_mut(g);
                        for row in dy.data().chunks(*units) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
                if !need_input {
                    return Ok(Tensor::zeros(&[0]));
                }
                let mut dx = vec![T::zero(); n * inputs];
                gemm(Transpose::No, Transpose::Yes, n, *units, *inputs, T::one(), dy.data(), w.get(params), T::zero(), &mut dx);
                Tensor::new(in_shape, dx)
            }
            (
                Kind::BatchNorm { channels, gamma, beta, .. },
                Cache::BatchNorm { xhat, inv_std, train, .. },
            ) => {
                let c = *channels;
                let m = dy.len() / c;
                let g = gamma.get(params);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for (px, hx) in dy.data().chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_dy[j] += px[j];
                        sum_dy_xhat[j] += px[j] * hx[j];
                    }
                }
                if let Some(gr) = grads.as_deref_mut() {
                    for (a, &v) in gamma.get_mut(gr).iter_mut().zip(&sum_dy_xhat) {
                        *a += v;
                    }
                    for (a, &v) in beta.get_mut(gr).iter_mut().zip(&sum_dy) {
                        *a += v;
                    }
                }
                if !need_input {
                    return Ok(Tensor::zeros(&[0]));
                }
                let mut dx = dy.into_data();
                if *train {
                    let mf = T::from_f64(m as f64);
                    let inv_m = T::one() / mf;
                    for (px, hx) in dx.chunks_mut(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            px[j] = g[j] * inv_std[j] * inv_m * (mf * px[j] - sum_dy[j] - hx[j] * sum_dy_xhat[j]);
                        }
                    }
                } else {
                    for px in dx.chunks_mut(c) {
                        for j in 0..c {
                            px[j] *= g[j] * inv_std[j];
                        }
                    }
                }
                Tensor::new(in_shape, dx)
            }
            (Kind::MaxPool { .. }, Cache::Argmax(arg)) => {
                let mut dx = vec![T::zero(); in_shape.iter().product()];
                for (&i, &v) in arg.iter().zip(dy.data()) {
                    dx[i as usize] += v;
                }
                Tensor::new(in_shape, dx)
            }
            (Kind::AvgPool { stride }, Cache::Nothing) => {
                let (h, w, c) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (oh, ow) = (self.out_shape[0], self.out_shape[1]);
                let mut dx = vec![T::zero(); n * h * w * c];
                let d = dy.data();
                for b in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let y1 = ((oy + 1) * stride).min(h);
                            let x1 = ((ox + 1) * stride).min(w);
                            let count = T::from_f64(((y1 - oy * stride) * (x1 - ox * stride)) as f64);
                            let o = ((b * oh + oy) * ow + ox) * c;
                            for iy in oy * stride..y1 {
                                for ix in ox * stride..x1 {
                                    let i = ((b * h + iy) * w + ix) * c;
                                    for ch in 0..c {
                                        dx[i + ch] += d[o + ch] / count;
                                    }
                                }
                            }
                        }
                    }
                }
                Tensor::new(in_shape, dx)
            }
            (Kind::Relu, Cache::Mask(mask)) => {
                let mut dx = dy.into_data();
                for (v, &on) in dx.iter_mut().zip(mask) {
                    if !on {
                        *v = T::zero();
                    }
                }
                Tensor::new(in_shape, dx)
            }
            (Kind::Tanh, Cache::Output(y)) => {
                let mut dx = dy.into_data();
                for (v, &t) in dx.iter_mut().zip(y) {
                    *v *= T::one() - t * t;
                }
                Tensor::new(in_shape, dx)
            }
            (Kind::Reshape, Cache::Nothing) => dy.reshape(&in_shape),
            (Kind::Residual { path, shortcut }, Cache::Residual { path: pc, shortcut: sc }) => {
                let short_dx = match (shortcut, sc) {
                    (Some(l), Some(c)) => Some(l.backward(params, c, dy.clone(), grads.as_deref_mut(), need_input)?),
                    (None, None) => None,
                    _ => return Err(Error::State("residual cache does not match block".into())),
                };
                let mut g = dy.clone();
                for (i, (l, c)) in path.iter().zip(pc).enumerate().rev() {
                    g = l.backward(params, c, g, grads.as_deref_mut(), need_input || i > 0)?;
                }
                if !need_input {
                    return Ok(Tensor::zeros(&[0]));
                }
                let add = short_dx.as_ref().unwrap_or(&dy);
                for (a, &b) in g.data_mut().iter_mut().zip(add.data()) {
                    *a += b;
                }
                Ok(g)
            }
            _ => Err(Error::State(format!("tape entry does not match layer {:?}", self.spec))),
        }
    }

    /// Folds recorded batch statistics into running averages.
    pub fn commit_stats<T: Scalar>(&self, cache: &Cache<T>, buffers: &mut [T], momentum: T) {
        match (&self.kind, cache) {
            (Kind::BatchNorm { mean, var, .. }, Cache::BatchNorm { batch_mean, batch_var, train: true, .. }) => {
                for (r, &b) in mean.get_mut(buffers).iter_mut().zip(batch_mean) {
                    *r = momentum * *r + (T::one() - momentum) * b;
                }
                for (r, &b) in var.get_mut(buffers).iter_mut().zip(batch_var) {
                    *r = momentum * *r + (T::one() - momentum) * b;
                }
            }
            (Kind::Residual { path, shortcut }, Cache::Residual { path: pc, shortcut: sc }) => {
                for (l, c) in path.iter().zip(pc) {
                    l.commit_stats(c, buffers, momentum);
                }
                if let (Some(l), Some(c)) = (shortcut, sc) {
                    l.commit_stats(c, buffers, momentum);
                }
            }
            _ => {}
        }
    }
}
