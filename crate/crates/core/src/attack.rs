//! Perturbation generators under an l-infinity budget.
//!
//! Budgets are specified on the [0, 1] pixel scale and converted to the data
//! scale by the width of the [`PixelBox`] (`eps_data = 2 * eps` for data in
//! [-1, 1]).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, GradientTape, Model};
use crate::tensor::{Scalar, Tensor};
use crate::zoo::{ArchitectureId, Family};

/// Feasible range of rescaled pixel values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub lower: f64,
    pub upper: f64,
}

impl Default for PixelBox {
    fn default() -> Self {
        Self { lower: -1.0, upper: 1.0 }
    }
}

impl PixelBox {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::config("attack.box", format!("lower bound {lower} must be below upper bound {upper}")));
        }
        Ok(Self { lower, upper })
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// Converts a [0, 1]-scale budget to the data scale.
    pub fn to_data_scale(&self, eps: f64) -> f64 {
        eps * self.width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackFamily {
    Fgs,
    Pgd,
    LeastLikely,
    Generator,
}

impl AttackFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fgs => "fgs",
            Self::Pgd => "pgd",
            Self::LeastLikely => "least-likely",
            Self::Generator => "generator",
        }
    }
}

impl fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fgs" => Ok(Self::Fgs),
            "pgd" => Ok(Self::Pgd),
            "least-likely" | "ll" => Ok(Self::LeastLikely),
            "generator" => Ok(Self::Generator),
            other => Err(Error::config("attack.family", format!("unknown attack family `{other}`"))),
        }
    }
}

/// Which label the attack loss is computed against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelMode {
    TrueLabel,
    MostLikely,
    LeastLikely,
}

impl LabelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TrueLabel => "true-label",
            Self::MostLikely => "most-likely",
            Self::LeastLikely => "least-likely",
        }
    }
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "true-label" | "true" => Ok(Self::TrueLabel),
            "most-likely" => Ok(Self::MostLikely),
            "least-likely" => Ok(Self::LeastLikely),
            other => Err(Error::config("attack.label_mode", format!("unknown label mode `{other}`"))),
        }
    }
}

/// Attack family and its hyperparameters. `eps` and `delta` are on the
/// [0, 1] pixel scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub eps: f64,
    pub delta: f64,
    pub steps: usize,
    pub label_mode: LabelMode,
    /// Uniform start inside the ball (PGD).
    pub random_start: bool,
    pub generator_ckpt: Option<String>,
}

pub const PGD_DEFAULT_STEPS: usize = 10;

impl AttackSpec {
    pub fn fgs(eps: f64) -> Self {
        Self {
            family: AttackFamily::Fgs,
            eps,
            delta: eps,
            steps: 1,
            label_mode: LabelMode::TrueLabel,
            random_start: false,
            generator_ckpt: None,
        }
    }

    /// PGD with step `eps / 4` and 10 iterations.
    pub fn pgd(eps: f64) -> Self {
        Self {
            family: AttackFamily::Pgd,
            eps,
            delta: eps / 4.0,
            steps: PGD_DEFAULT_STEPS,
            label_mode: LabelMode::TrueLabel,
            random_start: true,
            generator_ckpt: None,
        }
    }

    pub fn least_likely(eps: f64) -> Self {
        Self {
            family: AttackFamily::LeastLikely,
            label_mode: LabelMode::LeastLikely,
            ..Self::fgs(eps)
        }
    }

    pub fn generator(eps: f64, ckpt: Option<String>) -> Self {
        Self {
            family: AttackFamily::Generator,
            generator_ckpt: ckpt,
            ..Self::fgs(eps)
        }
    }

    pub fn with_label_mode(mut self, mode: LabelMode) -> Self {
        self.label_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::config("attack.eps", format!("must be a finite value >= 0, got {}", self.eps)));
        }
        if self.family == AttackFamily::Pgd {
            // A zero budget admits a zero step: every iterate is the clean input.
            if !(self.delta > 0.0 || (self.delta == 0.0 && self.eps == 0.0)) {
                return Err(Error::config("attack.delta", format!("must be > 0 for pgd, got {}", self.delta)));
            }
            if self.steps == 0 {
                return Err(Error::config("attack.steps", "must be >= 1 for pgd"));
            }
        }
        Ok(())
    }

    /// Short label such as `pgd(eps=0.3,k=10)`.
    pub fn describe(&self) -> String {
        match self.family {
            AttackFamily::Pgd => format!("pgd(eps={},delta={},k={})", self.eps, self.delta, self.steps),
            f => format!("{f}(eps={})", self.eps),
        }
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Elementwise clamp into the pixel box.
pub fn project_box<T: Scalar>(x: &Tensor<T>, b: &PixelBox) -> Tensor<T> {
    let (lo, hi) = (T::from_f64(b.lower), T::from_f64(b.upper));
    x.map(|v| v.max(lo).min(hi))
}

/// Elementwise clamp into `[center - radius, center + radius]`.
pub fn project_linf_ball<T: Scalar>(x: &Tensor<T>, center: &Tensor<T>, radius: T) -> Result<Tensor<T>> {
    if x.shape() != center.shape() {
        return Err(Error::dim("project_linf_ball", x.shape(), center.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(center.data())
        .map(|(&v, &c)| v.max(c - radius).min(c + radius))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Joint projection onto the intersection of the ball around `center` and
/// the pixel box.
fn project_ball_box<T: Scalar>(x: &mut Tensor<T>, center: &Tensor<T>, radius: T, b: &PixelBox) {
    let (lo, hi) = (T::from_f64(b.lower), T::from_f64(b.upper));
    for (v, &c) in x.data_mut().iter_mut().zip(center.data()) {
        let l = (c - radius).max(lo);
        let u = (c + radius).min(hi);
        *v = v.max(l).min(u);
    }
}

/// Loss and gradient of the mean cross-entropy with respect to the input.
/// The model is used in its current batch-norm mode and is not modified.
pub fn input_gradient<T: Scalar>(model: &Model<T>, x: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let mut tape = GradientTape::new();
    let logits = model.forward(x, &mut tape)?;
    let (loss, seed) = softmax_cross_entropy(&logits, labels)?;
    let grad = model.backward(&tape, &seed, None)?;
    check_attack_gradient(&grad)?;
    Ok((loss, grad))
}

fn check_attack_gradient<T: Scalar>(grad: &Tensor<T>) -> Result<()> {
    if let Err(Error::NonFinite { index, .. }) = grad.check_finite("input gradient") {
        let per = grad.sample_len().max(1);
        return Err(Error::Attack {
            sample: index / per,
            message: format!("non-finite input gradient at element {}", index % per),
        });
    }
    Ok(())
}

/// Labels the attack loss targets under `mode`.
pub fn resolve_labels<T: Scalar>(model: &Model<T>, x: &Tensor<T>, labels: &[usize], mode: LabelMode) -> Result<Vec<usize>> {
    match mode {
        LabelMode::TrueLabel => {
            if labels.len() != x.batch() {
                return Err(Error::dim("attack labels", &[labels.len()], &[x.batch()]));
            }
            Ok(labels.to_vec())
        }
        LabelMode::MostLikely => Ok(model.predict(x)?.argmax_rows()),
        LabelMode::LeastLikely => Ok(model.predict(x)?.argmin_rows()),
    }
}

/// One signed-gradient move of size `step` from `from`, with the gradient
/// taken at `at`; `ascent` selects the direction.
fn signed_step<T: Scalar>(model: &Model<T>, at: &Tensor<T>, labels: &[usize], step: T, ascent: bool) -> Result<Tensor<T>> {
    let (_, grad) = input_gradient(model, at, labels)?;
    let step = if ascent { step } else { -step };
    let data = at.data().iter().zip(grad.data()).map(|(&v, &g)| v + step * sign(g)).collect();
    Tensor::new(at.shape().to_vec(), data)
}

/// Fast gradient sign: `Proj_X(x + eps_data * sign(grad_x l(D(x), y)))`.
pub fn fgs_attack<T: Scalar>(model: &Model<T>, x: &Tensor<T>, labels: &[usize], spec: &AttackSpec, b: &PixelBox) -> Result<Tensor<T>> {
    spec.validate()?;
    let y = resolve_labels(model, x, labels, spec.label_mode)?;
    let eps = T::from_f64(b.to_data_scale(spec.eps));
    let ascent = spec.label_mode != LabelMode::LeastLikely;
    let adv = signed_step(model, x, &y, eps, ascent)?;
    Ok(project_box(&adv, b))
}

/// Least-likely class: `Proj_X(x - eps_data * sign(grad_x l(D(x), y_LL)))`.
pub fn least_likely_attack<T: Scalar>(model: &Model<T>, x: &Tensor<T>, spec: &AttackSpec, b: &PixelBox) -> Result<Tensor<T>> {
    spec.validate()?;
    let y = resolve_labels(model, x, &[], LabelMode::LeastLikely)?;
    let eps = T::from_f64(b.to_data_scale(spec.eps));
    let adv = signed_step(model, x, &y, eps, false)?;
    Ok(project_box(&adv, b))
}

/// Projected gradient descent with an optional uniform random start.
pub fn pgd_attack<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
    b: &PixelBox,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let y = resolve_labels(model, x, labels, spec.label_mode)?;
    let eps = T::from_f64(b.to_data_scale(spec.eps));
    let delta = T::from_f64(b.to_data_scale(spec.delta));
    let ascent = spec.label_mode != LabelMode::LeastLikely;
    let mut adv = if spec.random_start {
        let data = x.data().iter().map(|&v| v + eps * T::from_f64(rng.random_range(-1.0..=1.0))).collect();
        project_box(&Tensor::new(x.shape().to_vec(), data)?, b)
    } else {
        project_box(x, b)
    };
    for _ in 0..spec.steps {
        adv = signed_step(model, &adv, &y, delta, ascent)?;
        project_ball_box(&mut adv, x, eps, b);
    }
    Ok(adv)
}

/// What a generator consumes.
#[derive(Clone, Copy, Debug)]
pub enum GeneratorInput<'a, T> {
    /// The clean image batch itself (encoder-decoder generators).
    Image,
    /// A noise batch.
    Noise(&'a Tensor<T>),
    /// Class labels, one-hot encoded.
    Labels(&'a [usize]),
}

impl<T> GeneratorInput<'_, T> {
    fn name(&self) -> &'static str {
        match self {
            Self::Image => "image",
            Self::Noise(_) => "noise",
            Self::Labels(_) => "labels",
        }
    }
}

pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Index {
                op: "one_hot",
                index: y,
                bound: classes,
            });
        }
        t.data_mut()[i * classes + y] = T::one();
    }
    Ok(t)
}

/// Builds the generator's input batch for `x` and checks it against the
/// generator's architecture family.
pub fn generator_input_batch<T: Scalar>(generator: &Model<T>, x: &Tensor<T>, input: GeneratorInput<'_, T>) -> Result<Tensor<T>> {
    let family = generator.arch().parse::<ArchitectureId>().ok().map(|id| id.family);
    let expected = match family {
        Some(Family::G0 | Family::G1) => "image",
        Some(Family::G2) => "noise",
        Some(Family::G3) => "labels",
        _ => input.name(),
    };
    if expected != input.name() {
        return Err(Error::config(
            "attack.generator",
            format!("generator {} takes {expected} input, not {}", generator.arch(), input.name()),
        ));
    }
    let batch = match input {
        GeneratorInput::Image => x.clone(),
        GeneratorInput::Noise(z) => z.clone(),
        GeneratorInput::Labels(y) => one_hot(y, generator.input_shape().iter().product())?,
    };
    if batch.batch() != x.batch() {
        return Err(Error::dim("generator input batch", &[batch.batch()], &[x.batch()]));
    }
    Ok(batch)
}

/// `Proj_X(x + eps_data * noise)` for a precomputed generator output.
pub fn apply_perturbation<T: Scalar>(x: &Tensor<T>, noise: &Tensor<T>, eps_data: T, b: &PixelBox) -> Result<Tensor<T>> {
    if x.shape() != noise.shape() {
        return Err(Error::dim("generator perturbation", noise.shape(), x.shape()));
    }
    Ok(project_box(&x.add_scaled(eps_data, noise)?, b))
}

/// `Proj_X(x + eps_data * G(input))`, with the generator in its current mode.
pub fn generator_attack<T: Scalar>(
    generator: &Model<T>,
    x: &Tensor<T>,
    input: GeneratorInput<'_, T>,
    eps: f64,
    b: &PixelBox,
) -> Result<Tensor<T>> {
    let g_in = generator_input_batch(generator, x, input)?;
    let noise = generator.predict(&g_in)?;
    apply_perturbation(x, &noise, T::from_f64(b.to_data_scale(eps)), b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Logits `[x, 0]` from a one-input dense layer with weights [1, 0].
    fn logistic() -> Model<f64> {
        let mut m = Model::sequential("logistic", &[1], &[LayerSpec::Dense { units: 2, bias: false }], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.params_unflatten(&[1.0, 0.0]).unwrap();
        m
    }

    fn small_classifier(seed: u64) -> Model<f64> {
        let specs = [LayerSpec::dense(8), LayerSpec::Tanh, LayerSpec::dense(3)];
        Model::sequential("mlp", &[5], &specs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn batch(seed: u64, n: usize, d: usize) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| r.random_range(-1.0..=1.0)).collect()).unwrap()
    }

    #[test]
    fn box_projection() {
        let b = PixelBox::default();
        let x = Tensor::new(vec![4], vec![1.5, -0.3, -2.0, 1.0]).unwrap();
        let p = project_box(&x, &b);
        assert_eq!(p.data(), &[1.0, -0.3, -1.0, 1.0]);
        assert_eq!(project_box(&p, &b), p);
        assert!(PixelBox::new(1.0, 1.0).is_err());
    }

    #[test]
    fn ball_projection() {
        let c = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let x = Tensor::new(vec![3], vec![0.5, -0.5, 0.31]).unwrap();
        assert_eq!(project_linf_ball(&x, &c, 0.0).unwrap(), c);
        assert_eq!(project_linf_ball(&c, &c, 0.5).unwrap(), c);
        assert!(project_linf_ball(&x, &Tensor::zeros(&[2]), 0.1).is_err());
    }

    proptest! {
        #[test]
        fn ball_then_box_equals_clamp_to_intersection(
            xs in prop::collection::vec(-3.0f64..3.0, 16),
            cs in prop::collection::vec(-1.0f64..1.0, 16),
            r in 0.0f64..1.5,
        ) {
            let b = PixelBox::default();
            let x = Tensor::new(vec![16], xs.clone()).unwrap();
            let c = Tensor::new(vec![16], cs.clone()).unwrap();
            let composed = project_box(&project_linf_ball(&x, &c, r).unwrap(), &b);
            for i in 0..16 {
                let lo = (cs[i] - r).max(-1.0);
                let hi = (cs[i] + r).min(1.0);
                prop_assert_eq!(composed.data()[i], xs[i].max(lo).min(hi));
            }
        }

        #[test]
        fn every_attack_respects_budget_and_box(seed in 0u64..200, eps in 0.0f64..0.4) {
            let m = small_classifier(seed);
            let x = batch(seed + 1, 6, 5);
            let labels: Vec<usize> = (0..6).map(|i| (i + seed as usize) % 3).collect();
            let b = PixelBox::default();
            let eps_data = b.to_data_scale(eps);
            let before = (m.params_flatten(), x.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let outs = [
                fgs_attack(&m, &x, &labels, &AttackSpec::fgs(eps), &b).unwrap(),
                pgd_attack(&m, &x, &labels, &AttackSpec::pgd(eps), &b, &mut rng).unwrap(),
                least_likely_attack(&m, &x, &AttackSpec::least_likely(eps), &b).unwrap(),
            ];
            for out in &outs {
                for (a, c) in out.data().iter().zip(x.data()) {
                    prop_assert!((a - c).abs() <= eps_data + 1e-6);
                    prop_assert!((-1.0..=1.0).contains(a));
                }
            }
            prop_assert_eq!(&before.0, &m.params_flatten());
            prop_assert_eq!(&before.1, &x);
        }
    }

    #[test]
    fn zero_budget_is_identity() {
        let m = small_classifier(1);
        let x = batch(2, 4, 5);
        let b = PixelBox::default();
        let labels = [0, 1, 2, 0];
        assert_eq!(fgs_attack(&m, &x, &labels, &AttackSpec::fgs(0.0), &b).unwrap(), x);
        assert_eq!(least_likely_attack(&m, &x, &AttackSpec::least_likely(0.0), &b).unwrap(), x);
        let mut spec = AttackSpec::pgd(0.0);
        spec.delta = 0.01;
        let out = pgd_attack(&m, &x, &labels, &spec, &b, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn fgs_on_logistic_model() {
        // l = -log sigmoid(x); dl/dx = -sigmoid(-x) = -0.5 at x = 0.
        let m = logistic();
        let x = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let out = fgs_attack(&m, &x, &[0], &AttackSpec::fgs(0.3), &PixelBox::default()).unwrap();
        assert!((out.data()[0] + 0.6).abs() < 1e-12);
    }

    #[test]
    fn fgs_clamps_at_box_boundary() {
        // Label 1 makes increasing x the ascent direction.
        let m = logistic();
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let out = fgs_attack(&m, &x, &[1], &AttackSpec::fgs(0.3), &PixelBox::default()).unwrap();
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn pgd_single_step_without_random_start() {
        let m = logistic();
        let x = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let mut spec = AttackSpec::pgd(0.3);
        spec.steps = 1;
        spec.random_start = false;
        let out = pgd_attack(&m, &x, &[0], &spec, &PixelBox::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((out.data()[0] + 0.15).abs() < 1e-12);
    }

    #[test]
    fn pgd_is_reproducible_for_a_seed() {
        let m = small_classifier(4);
        let x = batch(5, 8, 5);
        let labels = [0, 1, 2, 0, 1, 2, 0, 1];
        let spec = AttackSpec::pgd(0.2);
        let b = PixelBox::default();
        let a = pgd_attack(&m, &x, &labels, &spec, &b, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c = pgd_attack(&m, &x, &labels, &spec, &b, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn fgs_equals_single_step_pgd_from_center() {
        let m = small_classifier(6);
        let x = batch(7, 8, 5);
        let labels = [2, 1, 0, 0, 1, 2, 2, 1];
        let b = PixelBox::default();
        let fgs = fgs_attack(&m, &x, &labels, &AttackSpec::fgs(0.1), &b).unwrap();
        let mut spec = AttackSpec::pgd(0.1);
        spec.steps = 1;
        spec.delta = 0.1;
        spec.random_start = false;
        let pgd = pgd_attack(&m, &x, &labels, &spec, &b, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(fgs, pgd);
    }

    #[test]
    fn least_likely_matches_fgs_direction_on_two_classes() {
        // Correctly classified sample: y_LL is the other class, and descending
        // on it moves the same way as ascending on the true label.
        let m = logistic();
        let x = Tensor::new(vec![2, 1], vec![0.4, -0.3]).unwrap();
        let truth = [0, 1];
        let b = PixelBox::default();
        let ll = least_likely_attack(&m, &x, &AttackSpec::least_likely(0.1), &b).unwrap();
        let fgs = fgs_attack(&m, &x, &truth, &AttackSpec::fgs(0.1), &b).unwrap();
        assert_eq!(ll, fgs);
    }

    #[test]
    fn generator_with_zero_final_layer_is_identity() {
        let mut g: Model<f64> = crate::zoo::build_network(&"G0:k=2".parse().unwrap(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let last = g.entries().iter().filter(|e| !e.kind.is_buffer()).map(|e| e.name.split('.').next().unwrap().to_string()).next_back().unwrap();
        g.zero_entries(&last);
        let x = batch(3, 2 * 28 * 28, 1).reshape(&[2, 28, 28, 1]).unwrap();
        let out = generator_attack(&g, &x, GeneratorInput::Image, 0.3, &PixelBox::default()).unwrap();
        assert_eq!(out, x);
        let out = generator_attack(&g, &x, GeneratorInput::Image, 0.0, &PixelBox::default()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn generator_budget_and_variant_check() {
        let g: Model<f64> = crate::zoo::build_network(&"G0:k=2".parse().unwrap(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = batch(4, 3 * 28 * 28, 1).reshape(&[3, 28, 28, 1]).unwrap();
        let out = generator_attack(&g, &x, GeneratorInput::Image, 0.3, &PixelBox::default()).unwrap();
        assert!(out.max_abs_diff(&x).unwrap() <= 0.6 + 1e-9);
        let err = generator_attack(&g, &x, GeneratorInput::Labels(&[0, 1, 2]), 0.3, &PixelBox::default()).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn non_finite_gradient_names_the_sample() {
        let mut m = logistic();
        m.params_unflatten(&[f64::NAN, 0.0]).unwrap();
        let x = Tensor::new(vec![2, 1], vec![0.1, 0.2]).unwrap();
        let err = fgs_attack(&m, &x, &[0, 0], &AttackSpec::fgs(0.1), &PixelBox::default()).unwrap_err();
        assert!(matches!(err, Error::Attack { sample: 0, .. }));
    }

    #[test]
    fn spec_defaults_and_validation() {
        let s = AttackSpec::pgd(0.3);
        assert_eq!(s.steps, 10);
        assert!((s.delta - 0.075).abs() < 1e-15);
        assert!(AttackSpec::fgs(-0.1).validate().is_err());
        let mut bad = AttackSpec::pgd(0.3);
        bad.steps = 0;
        assert!(bad.validate().is_err());
    }
}
