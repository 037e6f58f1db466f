use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::layer::{Allocator, Cache, EntryKind, Layer, LayerSpec, ParamEntry};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `fan_in + fan_out` of a weight tensor: `[k, k, a, b]` kernels count
/// `k * k * (a + b)`, dense `[a, b]` matrices `a + b`.
fn glorot_fan_sum(shape: &[usize]) -> usize {
    match shape {
        [a, b] => a + b,
        [h, w, a, b] => h * w * (a + b),
        other => other.iter().product::<usize>().max(1),
    }
    .max(1)
}

/// Momentum of the batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.99;

/// Batch-norm behaviour of a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    /// Mini-batch statistics.
    #[default]
    Train,
    /// Running averages.
    Inference,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Train => "batch-stats",
            Mode::Inference => "running-stats",
        }
    }
}

/// Operations recorded by one forward pass, consumed by [`Model::backward`].
#[derive(Clone, Debug)]
pub struct GradientTape<T = f32> {
    caches: Vec<Cache<T>>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    mode: Mode,
    recorded: bool,
}

impl<T> Default for GradientTape<T> {
    fn default() -> Self {
        Self {
            caches: Vec::new(),
            input_shape: Vec::new(),
            output_shape: Vec::new(),
            mode: Mode::Train,
            recorded: false,
        }
    }
}

impl<T> GradientTape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_recorded(&self) -> bool {
        self.recorded
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn clear(&mut self) {
        self.caches.clear();
        self.recorded = false;
    }
}

/// An ordered stack of layers over a flat parameter vector.
///
/// Parameters live in one contiguous buffer with a stable entry order, so
/// whole-network vector arithmetic (`params_axpy`) is a single loop.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    arch: String,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<T>,
    buffers: Vec<T>,
    entries: Vec<ParamEntry>,
    mode: Mode,
}

impl<T: Scalar> Model<T> {
    /// Compiles `specs` for per-sample `input_shape` and initializes weights
    /// Glorot-uniform (limit `sqrt(6 / (fan_in + fan_out))`), biases and
    /// batch-norm shifts at 0, batch-norm scales at 1.
    pub fn sequential(arch: impl Into<String>, input_shape: &[usize], specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        let mut model = Self::compile(arch, input_shape, specs)?;
        model.initialize(rng);
        Ok(model)
    }

    /// Compiles without initializing (all parameters zero, running variance 1).
    pub fn compile(arch: impl Into<String>, input_shape: &[usize], specs: &[LayerSpec]) -> Result<Self> {
        let mut alloc = Allocator::default();
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.to_vec();
        for (i, spec) in specs.iter().enumerate() {
            let layer = Layer::compile(spec, &shape, &format!("l{i:02}"), &mut alloc)?;
            shape = layer.out_shape().to_vec();
            layers.push(layer);
        }
        let mut buffers = vec![T::zero(); alloc.buffers_len];
        for e in alloc.entries.iter().filter(|e| e.kind == EntryKind::RunningVar) {
            buffers[e.range()].iter_mut().for_each(|v| *v = T::one());
        }
        Ok(Self {
            arch: arch.into(),
            input_shape: input_shape.to_vec(),
            output_shape: shape,
            layers,
            params: vec![T::zero(); alloc.params_len],
            buffers,
            entries: alloc.entries,
            mode: Mode::Train,
        })
    }

    pub fn initialize(&mut self, rng: &mut impl Rng) {
        for e in &self.entries {
            match e.kind {
                EntryKind::Weight => {
                    let limit = (6.0 / glorot_fan_sum(&e.shape) as f64).sqrt();
                    let uniform = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                    for v in &mut self.params[e.range()] {
                        *v = T::from_f64(uniform.sample(rng));
                    }
                }
                EntryKind::BnScale => self.params[e.range()].iter_mut().for_each(|v| *v = T::one()),
                EntryKind::Bias | EntryKind::BnShift => self.params[e.range()].iter_mut().for_each(|v| *v = T::zero()),
                EntryKind::RunningMean => self.buffers[e.range()].iter_mut().for_each(|v| *v = T::zero()),
                EntryKind::RunningVar => self.buffers[e.range()].iter_mut().for_each(|v| *v = T::one()),
            }
        }
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn layer_specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|l| &l.spec)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[T] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [T] {
        &mut self.buffers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// Mask over the flat parameter vector: true where weight decay applies
    /// (conv, deconv and dense weights).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for e in self.entries.iter().filter(|e| e.kind == EntryKind::Weight) {
            mask[e.range()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    /// Copy of the trainable parameters in stable order.
    pub fn params_flatten(&self) -> Vec<T> {
        self.params.clone()
    }

    pub fn params_unflatten(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.params.len() {
            return Err(Error::dim("params_unflatten", &[self.params.len()], &[flat.len()]));
        }
        self.params.copy_from_slice(flat);
        Ok(())
    }

    /// `params <- params + scale * v`.
    pub fn params_axpy(&mut self, scale: T, v: &[T]) -> Result<()> {
        if v.len() != self.params.len() {
            return Err(Error::dim("params_axpy", &[self.params.len()], &[v.len()]));
        }
        for (p, &x) in self.params.iter_mut().zip(v) {
            *p += scale * x;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Vec<T> {
        vec![T::zero(); self.params.len()]
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape().len() != self.input_shape.len() + 1 || input.shape()[1..] != self.input_shape[..] {
            let mut want = vec![input.batch()];
            want.extend_from_slice(&self.input_shape);
            return Err(Error::dim("model input", input.shape(), &want));
        }
        Ok(())
    }

    /// Forward pass that records onto `tape` for a later backward pass.
    pub fn forward(&self, input: &Tensor<T>, tape: &mut GradientTape<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        tape.caches.clear();
        tape.recorded = false;
        let train = self.mode == Mode::Train;
        let mut x = input.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&self.params, &self.buffers, x, train, true)?;
            tape.caches.push(cache.expect("recording forward yields a cache"));
            x = y;
        }
        tape.input_shape = input.shape().to_vec();
        tape.output_shape = x.shape().to_vec();
        tape.mode = self.mode;
        tape.recorded = true;
        Ok(x)
    }

    /// Forward pass without recording.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let train = self.mode == Mode::Train;
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&self.params, &self.buffers, x, train, false)?.0;
        }
        Ok(x)
    }

    /// Reverse pass over `tape`. Parameter gradients are accumulated (added)
    /// into `param_grads` when given; the gradient with respect to the input
    /// is returned.
    pub fn backward(&self, tape: &GradientTape<T>, grad_out: &Tensor<T>, param_grads: Option<&mut [T]>) -> Result<Tensor<T>> {
        self.backward_impl(tape, grad_out, param_grads, true)
    }

    /// Like [`Model::backward`] but skips the input gradient of the first layer.
    pub fn backward_params(&self, tape: &GradientTape<T>, grad_out: &Tensor<T>, param_grads: &mut [T]) -> Result<()> {
        self.backward_impl(tape, grad_out, Some(param_grads), false).map(|_| ())
    }

    fn backward_impl(
        &self,
        tape: &GradientTape<T>,
        grad_out: &Tensor<T>,
        mut param_grads: Option<&mut [T]>,
        need_input: bool,
    ) -> Result<Tensor<T>> {
        if !tape.recorded {
            return Err(Error::State("backward called before a recorded forward pass".into()));
        }
        if tape.caches.len() != self.layers.len() {
            return Err(Error::State(format!(
                "tape holds {} entries but the model has {} layers",
                tape.caches.len(),
                self.layers.len()
            )));
        }
        if grad_out.shape() != tape.output_shape.as_slice() {
            return Err(Error::dim("backward seed", grad_out.shape(), &tape.output_shape));
        }
        if let Some(g) = &param_grads {
            if g.len() != self.params.len() {
                return Err(Error::dim("gradient buffer", &[g.len()], &[self.params.len()]));
            }
        }
        let mut g = grad_out.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            g = layer.backward(&self.params, cache, g, param_grads.as_deref_mut(), need_input || i > 0)?;
        }
        Ok(g)
    }

    /// Moves batch-norm running averages toward the statistics recorded on
    /// `tape` (momentum [`BN_MOMENTUM`]).
    pub fn commit_batch_stats(&mut self, tape: &GradientTape<T>) {
        if !tape.recorded || tape.mode != Mode::Train {
            return;
        }
        let momentum = T::from_f64(BN_MOMENTUM);
        for (layer, cache) in self.layers.iter().zip(&tape.caches) {
            layer.commit_stats(cache, &mut self.buffers, momentum);
        }
    }

    /// Same network at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            input_shape: self.input_shape.clone(),
            output_shape: self.output_shape.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
            buffers: self.buffers.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
            entries: self.entries.clone(),
            mode: self.mode,
        }
    }

    /// Zeroes every parameter entry whose name starts with `prefix`.
    pub fn zero_entries(&mut self, prefix: &str) {
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix) && !e.kind.is_buffer()) {
            self.params[e.range()].iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn linear_layer_closed_form_gradients() {
        // y = W^T x without bias, loss = sum(y).
        let mut m = Model::<f64>::sequential("fc", &[3], &[LayerSpec::Dense { units: 2, bias: false }], &mut rng()).unwrap();
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [inputs=3, units=2]
        m.params_unflatten(&w).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut tape = GradientTape::new();
        let y = m.forward(&x, &mut tape).unwrap();
        assert_eq!(y.data(), &[0.5 - 3.0 + 10.0, 1.0 - 4.0 + 12.0]);
        let mut g = m.zero_grads();
        let dx = m.backward(&tape, &Tensor::full(&[1, 2], 1.0), Some(&mut g)).unwrap();
        // dW[i][j] = x_i; dx_i = sum_j W[i][j].
        assert_eq!(g, vec![0.5, 0.5, -1.0, -1.0, 2.0, 2.0]);
        assert_eq!(dx.data(), &[3.0, 7.0, 11.0]);
    }

    #[test]
    fn relu_dead_unit_blocks_gradient() {
        let mut m = Model::<f64>::sequential("fc-relu", &[1], &[LayerSpec::Dense { units: 1, bias: false }, LayerSpec::Relu], &mut rng()).unwrap();
        m.params_unflatten(&[1.0]).unwrap();
        let x = Tensor::new(vec![1, 1], vec![-2.0]).unwrap();
        let mut tape = GradientTape::new();
        m.forward(&x, &mut tape).unwrap();
        let mut g = m.zero_grads();
        let dx = m.backward(&tape, &Tensor::full(&[1, 1], 1.0), Some(&mut g)).unwrap();
        assert_eq!(dx.data(), &[0.0]);
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn tanh_at_origin_passes_gradient() {
        let m = Model::<f64>::sequential("tanh", &[2], &[LayerSpec::Tanh], &mut rng()).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let mut tape = GradientTape::new();
        m.forward(&x, &mut tape).unwrap();
        let up = Tensor::new(vec![1, 2], vec![0.7, -1.3]).unwrap();
        let dx = m.backward(&tape, &up, None).unwrap();
        assert_eq!(dx.data(), up.data());
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let m = Model::<f32>::sequential("fc", &[3], &[LayerSpec::dense(2)], &mut rng()).unwrap();
        let tape = GradientTape::new();
        let err = m.backward(&tape, &Tensor::zeros(&[1, 2]), None).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn max_pool_tie_routes_to_first_index() {
        let m = Model::<f64>::sequential("pool", &[2, 2, 1], &[LayerSpec::MaxPool { stride: 2 }], &mut rng()).unwrap();
        let x = Tensor::new(vec![1, 2, 2, 1], vec![3.0, 3.0, 1.0, 3.0]).unwrap();
        let mut tape = GradientTape::new();
        let y = m.forward(&x, &mut tape).unwrap();
        assert_eq!(y.data(), &[3.0]);
        let dx = m.backward(&tape, &Tensor::full(&[1, 1, 1, 1], 1.0), None).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn axpy_and_flatten() {
        let mut m = Model::<f32>::sequential("fc", &[4], &[LayerSpec::dense(3)], &mut rng()).unwrap();
        let flat = m.params_flatten();
        let neg: Vec<f32> = flat.iter().map(|v| -v).collect();
        m.params_axpy(1.0, &neg).unwrap();
        assert!(m.params().iter().all(|&v| v == 0.0));
        m.params_unflatten(&flat).unwrap();
        m.params_axpy(0.0, &vec![123.0; flat.len()]).unwrap();
        assert_eq!(m.params(), flat.as_slice());
        assert!(m.params_axpy(1.0, &[0.0]).is_err());
    }

    #[test]
    fn batch_norm_running_stats_follow_momentum() {
        let mut m = Model::<f64>::sequential("bn", &[1], &[LayerSpec::BatchNorm], &mut rng()).unwrap();
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let mut tape = GradientTape::new();
        let y = m.forward(&x, &mut tape).unwrap();
        assert!((y.data()[0] + y.data()[1]).abs() < 1e-12);
        m.commit_batch_stats(&tape);
        let mean = m.buffers()[0];
        let var = m.buffers()[1];
        assert!((mean - 0.01 * 2.0).abs() < 1e-12);
        assert!((var - (0.99 + 0.01 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn inference_mode_is_deterministic_per_sample() {
        let mut m = Model::<f32>::sequential("bn", &[2], &[LayerSpec::dense(4), LayerSpec::BatchNorm, LayerSpec::Relu], &mut rng()).unwrap();
        m.set_mode(Mode::Inference);
        let x = Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.3, -0.2]).unwrap();
        let y = m.predict(&x).unwrap();
        assert_eq!(y.data()[..4], y.data()[4..]);
        assert_eq!(m.predict(&x).unwrap(), y);
    }
}
