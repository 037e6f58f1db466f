//! Saddle objectives `F(theta, phi)` and the regularized update rules.
//!
//! The discriminator descends on `F + gamma/2 * |grad_phi F|^2`. The mixed
//! second-derivative term is the finite difference
//! `(grad_theta F(theta, phi + h v) - grad_theta F(theta, phi)) / h` with
//! `v = grad_phi F`, so only first-order gradients are ever taken.

use crate::attack::{apply_perturbation, PixelBox};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, GradientTape, Model, OptimizerState};
use crate::tensor::{Scalar, Tensor};

/// A two-player objective with flat parameter vectors `theta` (minimizer)
/// and `phi` (maximizer).
pub trait SaddleObjective<T: Scalar> {
    fn theta(&self) -> &[T];
    fn theta_mut(&mut self) -> &mut [T];
    fn phi(&self) -> &[T];
    fn phi_mut(&mut self) -> &mut [T];

    /// `F` and `grad_theta F` at the current point.
    fn grad_theta(&mut self) -> Result<(f64, Vec<T>)>;

    /// `F` (or its phi-dependent part) and `grad_phi F`.
    fn grad_phi(&mut self) -> Result<(f64, Vec<T>)>;

    /// `grad_theta` of the terms of `F` that depend on `phi`. Terms without
    /// `phi` cancel in the finite difference, so dropping them leaves the
    /// mixed derivative unchanged.
    fn grad_theta_coupled(&mut self) -> Result<Vec<T>> {
        Ok(self.grad_theta()?.1)
    }

    /// Value, full `grad_theta F`, and the coupled part of it.
    fn grad_theta_parts(&mut self) -> Result<(f64, Vec<T>, Vec<T>)> {
        let (f, g) = self.grad_theta()?;
        let c = g.clone();
        Ok((f, g, c))
    }

    /// Called after every accepted update of `theta`.
    fn on_theta_step(&mut self) {}

    /// Called after every accepted update of `phi`.
    fn on_phi_step(&mut self) {}
}

fn check_h(h: f64) -> Result<()> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::config("minimax.h", format!("finite-difference step must be > 0, got {h}")));
    }
    Ok(())
}

fn norm<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|&x| Scalar::to_f64(x).powi(2)).sum::<f64>().sqrt()
}

fn first_non_finite<T: Scalar>(v: &[T]) -> Option<usize> {
    v.iter().position(|x| !x.is_finite())
}

/// Moves `phi` by `h * v`, evaluates the coupled `grad_theta`, and restores
/// `phi` from a copy so it is bit-identical afterwards.
fn coupled_grad_at_shifted_phi<T: Scalar, O: SaddleObjective<T> + ?Sized>(obj: &mut O, v: &[T], h: f64) -> Result<Vec<T>> {
    if v.len() != obj.phi().len() {
        return Err(Error::dim("hvp direction", &[v.len()], &[obj.phi().len()]));
    }
    let snapshot = obj.phi().to_vec();
    let ht = T::from_f64(h);
    for (p, &d) in obj.phi_mut().iter_mut().zip(v) {
        *p += ht * d;
    }
    let shifted = obj.grad_theta_coupled();
    obj.phi_mut().copy_from_slice(&snapshot);
    shifted
}

fn difference_quotient<T: Scalar>(shifted: &[T], base: &[T], h: f64) -> Vec<T> {
    let inv_h = T::from_f64(1.0 / h);
    shifted.iter().zip(base).map(|(&a, &b)| (a - b) * inv_h).collect()
}

/// `(grad_theta F(theta, phi + h v) - grad_theta F(theta, phi)) / h`.
pub fn hvp_finite_difference<T: Scalar, O: SaddleObjective<T> + ?Sized>(obj: &mut O, v: &[T], h: f64) -> Result<Vec<T>> {
    check_h(h)?;
    let base = obj.grad_theta_coupled()?;
    let shifted = coupled_grad_at_shifted_phi(obj, v, h)?;
    Ok(difference_quotient(&shifted, &base, h))
}

/// Diagnostics of one discriminator update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorStep {
    /// `F` before the update.
    pub value: f64,
    /// `|grad_phi F|` before the update.
    pub grad_phi_norm: f64,
    pub grad_theta_norm: f64,
    pub hvp_norm: f64,
}

/// One regularized descent step on `theta`: the optimizer receives
/// `grad_theta F + gamma * HVP` as its gradient.
pub fn discriminator_update<T: Scalar, O: SaddleObjective<T> + ?Sized>(
    obj: &mut O,
    gamma: f64,
    h: f64,
    optimizer: &mut OptimizerState<T>,
) -> Result<DiscriminatorStep> {
    if !(gamma >= 0.0) {
        return Err(Error::config("minimax.gamma", format!("must be >= 0, got {gamma}")));
    }
    check_h(h)?;
    let iteration = optimizer.step;
    let (value, mut g_eff, coupled) = obj.grad_theta_parts()?;
    let (_, v) = obj.grad_phi()?;
    let grad_phi_norm = norm(&v);
    let grad_theta_norm = norm(&g_eff);
    let mut hvp_norm = 0.0;
    if gamma > 0.0 {
        let shifted = coupled_grad_at_shifted_phi(obj, &v, h)?;
        let hvp = difference_quotient(&shifted, &coupled, h);
        hvp_norm = norm(&hvp);
        let gt = T::from_f64(gamma);
        for (g, &r) in g_eff.iter_mut().zip(&hvp) {
            *g += gt * r;
        }
    }
    if let Some(i) = first_non_finite(&g_eff) {
        return Err(Error::Training {
            iteration,
            message: format!("non-finite discriminator gradient at parameter {i}"),
        });
    }
    optimizer.apply(obj.theta_mut(), &g_eff)?;
    obj.on_theta_step();
    Ok(DiscriminatorStep {
        value,
        grad_phi_norm,
        grad_theta_norm,
        hvp_norm,
    })
}

/// `steps` gradient-ascent steps on `phi` at fixed `theta`. Returns the
/// objective value seen before each step.
pub fn generator_update<T: Scalar, O: SaddleObjective<T> + ?Sized>(
    obj: &mut O,
    steps: usize,
    optimizer: &mut OptimizerState<T>,
) -> Result<Vec<f64>> {
    let mut values = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (value, g) = obj.grad_phi()?;
        if let Some(i) = first_non_finite(&g) {
            return Err(Error::Training {
                iteration: optimizer.step,
                message: format!("non-finite generator gradient at parameter {i}"),
            });
        }
        // The optimizer descends, so ascend on F by descending on -F.
        let neg: Vec<T> = g.iter().map(|&x| -x).collect();
        optimizer.apply(obj.phi_mut(), &neg)?;
        obj.on_phi_step();
        values.push(value);
    }
    Ok(values)
}

/// Mean clean cross-entropy plus `lambda` times the mean cross-entropy on
/// `Proj_X(x + eps_data * G(g_input))`, without recording gradients.
#[allow(clippy::too_many_arguments)]
pub fn minimax_objective<T: Scalar>(
    d: &Model<T>,
    g: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    g_input: &Tensor<T>,
    lambda: f64,
    eps: f64,
    pixel_box: &PixelBox,
    iteration: u64,
) -> Result<f64> {
    let (clean, _) = softmax_cross_entropy(&d.predict(x)?, labels)?;
    let noise = g.predict(g_input)?;
    let adv = apply_perturbation(x, &noise, T::from_f64(pixel_box.to_data_scale(eps)), pixel_box)?;
    let (adv_loss, _) = softmax_cross_entropy(&d.predict(&adv)?, labels)?;
    let f = clean.to_f64() + lambda * adv_loss.to_f64();
    if !f.is_finite() {
        return Err(Error::Training {
            iteration,
            message: format!("non-finite objective (clean {clean:?}, adversarial {adv_loss:?})"),
        });
    }
    Ok(f)
}

/// The neural game on one mini-batch: `theta` is the classifier, `phi` the
/// generator of additive noise.
pub struct NeuralSaddle<'a, T: Scalar = f32> {
    pub d: &'a mut Model<T>,
    pub g: &'a mut Model<T>,
    x: &'a Tensor<T>,
    labels: &'a [usize],
    g_input: Tensor<T>,
    lambda: f64,
    eps_data: T,
    pixel_box: PixelBox,
    d_tape: GradientTape<T>,
    adv_tape: GradientTape<T>,
    g_tape: GradientTape<T>,
    /// Unweighted mean clean loss of the last `grad_theta` call.
    pub clean_loss: f64,
    /// Unweighted mean adversarial loss of the last gradient call.
    pub adv_loss: f64,
}

impl<'a, T: Scalar> NeuralSaddle<'a, T> {
    /// `eps` is on the [0, 1] pixel scale.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: &'a mut Model<T>,
        g: &'a mut Model<T>,
        x: &'a Tensor<T>,
        labels: &'a [usize],
        g_input: Tensor<T>,
        lambda: f64,
        eps: f64,
        pixel_box: PixelBox,
    ) -> Self {
        Self {
            d,
            g,
            x,
            labels,
            g_input,
            lambda,
            eps_data: T::from_f64(pixel_box.to_data_scale(eps)),
            pixel_box,
            d_tape: GradientTape::new(),
            adv_tape: GradientTape::new(),
            g_tape: GradientTape::new(),
            clean_loss: f64::NAN,
            adv_loss: f64::NAN,
        }
    }

    fn adversarial(&self, noise: &Tensor<T>) -> Result<Tensor<T>> {
        apply_perturbation(self.x, noise, self.eps_data, &self.pixel_box)
    }

    fn clean_grad(&mut self, grads: &mut [T]) -> Result<f64> {
        let out = self.d.forward(self.x, &mut self.d_tape)?;
        let (loss, seed) = softmax_cross_entropy(&out, self.labels)?;
        self.d.backward_params(&self.d_tape, &seed, grads)?;
        self.clean_loss = loss.to_f64();
        Ok(self.clean_loss)
    }

    /// Adds `lambda * grad_theta` of the adversarial loss into `grads`.
    fn adv_grad(&mut self, grads: &mut [T]) -> Result<f64> {
        let noise = self.g.predict(&self.g_input)?;
        let adv = self.adversarial(&noise)?;
        let out = self.d.forward(&adv, &mut self.adv_tape)?;
        let (loss, seed) = softmax_cross_entropy(&out, self.labels)?;
        let seed = seed.map(|s| s * T::from_f64(self.lambda));
        self.d.backward_params(&self.adv_tape, &seed, grads)?;
        self.adv_loss = loss.to_f64();
        Ok(self.lambda * self.adv_loss)
    }
}

impl<T: Scalar> SaddleObjective<T> for NeuralSaddle<'_, T> {
    fn theta(&self) -> &[T] {
        self.d.params()
    }

    fn theta_mut(&mut self) -> &mut [T] {
        self.d.params_mut()
    }

    fn phi(&self) -> &[T] {
        self.g.params()
    }

    fn phi_mut(&mut self) -> &mut [T] {
        self.g.params_mut()
    }

    fn grad_theta(&mut self) -> Result<(f64, Vec<T>)> {
        let mut grads = self.d.zero_grads();
        let clean = self.clean_grad(&mut grads)?;
        let adv = self.adv_grad(&mut grads)?;
        Ok((clean + adv, grads))
    }

    fn grad_theta_coupled(&mut self) -> Result<Vec<T>> {
        let mut grads = self.d.zero_grads();
        self.adv_grad(&mut grads)?;
        Ok(grads)
    }

    fn grad_theta_parts(&mut self) -> Result<(f64, Vec<T>, Vec<T>)> {
        let mut coupled = self.d.zero_grads();
        let adv = self.adv_grad(&mut coupled)?;
        let mut full = coupled.clone();
        let clean = self.clean_grad(&mut full)?;
        Ok((clean + adv, full, coupled))
    }

    /// Only the adversarial term depends on `phi`; the returned value is
    /// `lambda` times the adversarial loss.
    fn grad_phi(&mut self) -> Result<(f64, Vec<T>)> {
        let noise = self.g.forward(&self.g_input, &mut self.g_tape)?;
        let (lo, hi) = (T::from_f64(self.pixel_box.lower), T::from_f64(self.pixel_box.upper));
        let pre = self.x.add_scaled(self.eps_data, &noise)?;
        let adv = pre.map(|v| v.max(lo).min(hi));
        let out = self.d.forward(&adv, &mut self.adv_tape)?;
        let (loss, seed) = softmax_cross_entropy(&out, self.labels)?;
        let seed = seed.map(|s| s * T::from_f64(self.lambda));
        let dx = self.d.backward(&self.adv_tape, &seed, None)?;
        // The clamp passes gradient only where it is inactive.
        let dnoise: Vec<T> = dx
            .data()
            .iter()
            .zip(pre.data())
            .map(|(&g, &p)| if p >= lo && p <= hi { g * self.eps_data } else { T::zero() })
            .collect();
        let dnoise = Tensor::new(noise.shape().to_vec(), dnoise)?;
        let mut grads = self.g.zero_grads();
        self.g.backward_params(&self.g_tape, &dnoise, &mut grads)?;
        self.adv_loss = loss.to_f64();
        Ok((self.lambda * self.adv_loss, grads))
    }

    fn on_theta_step(&mut self) {
        self.d.commit_batch_stats(&self.d_tape);
    }

    fn on_phi_step(&mut self) {
        self.g.commit_batch_stats(&self.g_tape);
    }
}

/// `F = theta^T A phi + 1/2 theta^T P theta - 1/2 phi^T Q phi` with dense
/// row-major matrices; the quadratic terms are optional.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearObjective {
    pub a: Vec<f64>,
    pub p: Option<Vec<f64>>,
    pub q: Option<Vec<f64>>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl BilinearObjective {
    pub fn new(a: Vec<f64>, theta: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        if a.len() != theta.len() * phi.len() {
            return Err(Error::dim("bilinear objective", &[a.len()], &[theta.len(), phi.len()]));
        }
        Ok(Self { a, p: None, q: None, theta, phi })
    }

    fn n(&self) -> (usize, usize) {
        (self.theta.len(), self.phi.len())
    }

    /// `A v` (the exact mixed-derivative product).
    pub fn a_times(&self, v: &[f64]) -> Vec<f64> {
        let (n, m) = self.n();
        (0..n).map(|i| (0..m).map(|j| self.a[i * m + j] * v[j]).sum()).collect()
    }

    fn a_transpose_times(&self, v: &[f64]) -> Vec<f64> {
        let (n, m) = self.n();
        (0..m).map(|j| (0..n).map(|i| self.a[i * m + j] * v[i]).sum()).collect()
    }

    pub fn value(&self) -> f64 {
        let (n, m) = self.n();
        let mut f: f64 = self.theta.iter().zip(self.a_times(&self.phi)).map(|(t, a)| t * a).sum();
        if let Some(p) = &self.p {
            f += 0.5 * (0..n).map(|i| (0..n).map(|j| self.theta[i] * p[i * n + j] * self.theta[j]).sum::<f64>()).sum::<f64>();
        }
        if let Some(q) = &self.q {
            f -= 0.5 * (0..m).map(|i| (0..m).map(|j| self.phi[i] * q[i * m + j] * self.phi[j]).sum::<f64>()).sum::<f64>();
        }
        f
    }
}

impl SaddleObjective<f64> for BilinearObjective {
    fn theta(&self) -> &[f64] {
        &self.theta
    }

    fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn phi(&self) -> &[f64] {
        &self.phi
    }

    fn phi_mut(&mut self) -> &mut [f64] {
        &mut self.phi
    }

    fn grad_theta(&mut self) -> Result<(f64, Vec<f64>)> {
        let n = self.theta.len();
        let mut g = self.a_times(&self.phi);
        if let Some(p) = &self.p {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += (0..n).map(|j| p[i * n + j] * self.theta[j]).sum::<f64>();
            }
        }
        Ok((self.value(), g))
    }

    fn grad_phi(&mut self) -> Result<(f64, Vec<f64>)> {
        let m = self.phi.len();
        let mut g = self.a_transpose_times(&self.theta);
        if let Some(q) = &self.q {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi -= (0..m).map(|j| q[i * m + j] * self.phi[j]).sum::<f64>();
            }
        }
        Ok((self.value(), g))
    }
}
