//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layer::{EntryKind, LayerSpec};
use super::loss::softmax_cross_entropy;
use super::model::{GradientTape, Mode, Model};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::zoo::{build_network_for, ArchitectureId, Family};

/// Step of the central difference.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Scalar objective the check differentiates.
#[derive(Clone, Debug)]
pub enum CheckLoss {
    /// Mean softmax cross-entropy against these labels.
    CrossEntropy(Vec<usize>),
    /// `sum(output * w)` for a fixed weight tensor shaped like the output.
    Projection(Vec<f64>),
}

/// Where the worst disagreement was found.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coordinate {
    Param { index: usize },
    Input { index: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Maximum of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

fn loss_and_grad(model: &Model<f64>, input: &Tensor<f64>, loss: &CheckLoss, tape: &mut GradientTape<f64>) -> Result<(f64, Tensor<f64>)> {
    let out = model.forward(input, tape)?;
    match loss {
        CheckLoss::CrossEntropy(labels) => softmax_cross_entropy(&out, labels),
        CheckLoss::Projection(w) => {
            let value = out.data().iter().zip(w).map(|(a, b)| a * b).sum();
            Ok((value, Tensor::new(out.shape().to_vec(), w.clone())?))
        }
    }
}

fn loss_only(model: &Model<f64>, input: &Tensor<f64>, loss: &CheckLoss) -> Result<f64> {
    let out = model.predict(input)?;
    Ok(match loss {
        CheckLoss::CrossEntropy(labels) => softmax_cross_entropy(&out, labels)?.0,
        CheckLoss::Projection(w) => out.data().iter().zip(w).map(|(a, b)| a * b).sum(),
    })
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Central difference at [`GRADCHECK_STEP`]. When that disagrees with the
/// analytic value, the difference is recomputed with a step ten times
/// smaller; the finer estimate replaces the coarse one only if the two
/// estimates themselves disagree beyond the tolerance, which happens when a
/// ReLU or max-pool switch lies within one step of the point. A wrong
/// analytic gradient leaves both estimates in agreement and still fails.
fn refined(analytic: f64, central: &mut impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let coarse = central(GRADCHECK_STEP)?;
    if rel_err(analytic, coarse) <= GRADCHECK_TOLERANCE {
        return Ok(coarse);
    }
    let fine = central(GRADCHECK_STEP / 10.0)?;
    Ok(if rel_err(coarse, fine) > GRADCHECK_TOLERANCE { fine } else { coarse })
}

/// Compares backpropagated gradients with central differences on up to
/// `max_coords` randomly sampled parameter coordinates and as many input
/// coordinates. The forward pass uses the model's current batch-norm mode.
pub fn grad_check(model: &Model<f64>, input: &Tensor<f64>, loss: &CheckLoss, max_coords: usize, rng: &mut impl Rng) -> Result<GradCheckReport> {
    let mut tape = GradientTape::new();
    let (_, seed) = loss_and_grad(model, input, loss, &mut tape)?;
    let mut grads = model.zero_grads();
    let dx = model.backward(&tape, &seed, Some(&mut grads))?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates_checked: 0,
    };
    let mut record = |coord: Coordinate, analytic: f64, numeric: f64| {
        let err = rel_err(analytic, numeric);
        report.coordinates_checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(coord);
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    };

    let mut probe = model.clone();
    let n_params = model.param_count();
    for i in sample(rng, n_params, max_coords.min(n_params)) {
        let mut central = |h: f64| -> Result<f64> {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + h;
            let plus = loss_only(&probe, input, loss)?;
            probe.params_mut()[i] = orig - h;
            let minus = loss_only(&probe, input, loss)?;
            probe.params_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * h))
        };
        let numeric = refined(grads[i], &mut central)?;
        record(Coordinate::Param { index: i }, grads[i], numeric);
    }

    let mut x = input.clone();
    for i in sample(rng, x.len(), max_coords.min(x.len())) {
        let mut central = |h: f64| -> Result<f64> {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + h;
            let plus = loss_only(model, &x, loss)?;
            x.data_mut()[i] = orig - h;
            let minus = loss_only(model, &x, loss)?;
            x.data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * h))
        };
        let numeric = refined(dx.data()[i], &mut central)?;
        record(Coordinate::Input { index: i }, dx.data()[i], numeric);
    }
    Ok(report)
}

/// Tolerance the gradient checks are held to at double precision.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// One model the suite checks.
#[derive(Clone, Debug)]
pub struct CheckCase {
    pub name: String,
    pub input: Vec<usize>,
    pub batch: usize,
    pub model: CaseModel,
    pub mode: Mode,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub enum CaseModel {
    Layers(Vec<LayerSpec>),
    Architecture(ArchitectureId),
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

impl CheckCase {
    fn layers(name: &str, input: &[usize], specs: Vec<LayerSpec>, mode: Mode, seed: u64) -> Self {
        Self {
            name: name.into(),
            input: input.to_vec(),
            batch: 3,
            model: CaseModel::Layers(specs),
            mode,
            seed,
        }
    }

    /// Builds the model with perturbed batch-norm parameters and running
    /// statistics, then checks a random projection of its output.
    pub fn run(&self, max_coords: usize) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let m = match &self.model {
            CaseModel::Layers(specs) => Model::<f64>::sequential(self.name.clone(), &self.input, specs, &mut rng)?,
            CaseModel::Architecture(id) => build_network_for(id, &self.input, &mut rng)?,
        };
        let mut m = m.with_mode(self.mode);
        for e in m.entries().to_vec() {
            match e.kind {
                EntryKind::BnScale | EntryKind::BnShift => {
                    for v in &mut m.params_mut()[e.range()] {
                        *v += 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                    }
                }
                EntryKind::RunningMean => {
                    for v in &mut m.buffers_mut()[e.range()] {
                        *v = 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                    }
                }
                _ => {}
            }
        }
        let mut shape = vec![self.batch];
        shape.extend_from_slice(&self.input);
        let x = randn(&shape, &mut rng)?;
        let out_len = self.batch * m.output_shape().iter().product::<usize>();
        let w: Vec<f64> = (0..out_len).map(|_| StandardNormal.sample(&mut rng)).collect();
        grad_check(&m, &x, &CheckLoss::Projection(w), max_coords, &mut rng)
    }
}

/// One small model per layer kind and batch-norm mode.
pub fn layer_cases() -> Vec<CheckCase> {
    let l = CheckCase::layers;
    vec![
        l("dense relu", &[8], vec![LayerSpec::dense(6), LayerSpec::Relu, LayerSpec::dense(3)], Mode::Train, 9),
        l("conv stride 2", &[7, 6, 2], vec![LayerSpec::conv_bias(5, 2, 3)], Mode::Train, 10),
        l("deconv", &[4, 3, 3], vec![LayerSpec::deconv_bias(5, 2, 2)], Mode::Train, 11),
        l("deconv stride 1", &[4, 4, 2], vec![LayerSpec::deconv(3, 1, 2)], Mode::Train, 12),
        l("batch norm train", &[3, 3, 2], vec![LayerSpec::BatchNorm], Mode::Train, 13),
        l("batch norm inference", &[3, 3, 2], vec![LayerSpec::BatchNorm], Mode::Inference, 14),
        l("max pool", &[4, 4, 2], vec![LayerSpec::MaxPool { stride: 2 }], Mode::Train, 15),
        l("avg pool", &[4, 4, 2], vec![LayerSpec::conv(3, 1, 2), LayerSpec::AvgPool { stride: 2 }], Mode::Train, 16),
        l("tanh", &[5], vec![LayerSpec::dense(4), LayerSpec::Tanh], Mode::Train, 17),
        l("reshape", &[12], vec![LayerSpec::reshape(&[2, 2, 3]), LayerSpec::conv(3, 1, 2)], Mode::Train, 18),
        l("residual identity", &[4, 4, 3], vec![LayerSpec::residual(3, 1, 3)], Mode::Train, 19),
        l("residual projection", &[4, 4, 2], vec![LayerSpec::residual(3, 2, 4)], Mode::Train, 20),
        l("residual inference", &[4, 4, 2], vec![LayerSpec::residual(3, 1, 4)], Mode::Inference, 21),
    ]
}

/// Every discriminator and generator family, generators at width 8.
pub fn architecture_cases() -> Vec<CheckCase> {
    [Family::D1, Family::D2, Family::G0, Family::G1, Family::G2, Family::G3]
        .into_iter()
        .enumerate()
        .map(|(i, family)| {
            let mut id = ArchitectureId::new(family);
            if family.is_generator() {
                id = id.with_width(8);
            }
            CheckCase {
                name: id.to_string(),
                input: id.default_input_shape(),
                batch: 2,
                model: CaseModel::Architecture(id),
                mode: Mode::Train,
                seed: 100 + i as u64,
            }
        })
        .collect()
}

/// Runs every layer and architecture case.
pub fn gradcheck_suite(max_coords: usize) -> Result<Vec<(String, GradCheckReport)>> {
    layer_cases()
        .into_iter()
        .chain(architecture_cases())
        .map(|c| Ok((c.name.clone(), c.run(max_coords)?)))
        .collect()
}
