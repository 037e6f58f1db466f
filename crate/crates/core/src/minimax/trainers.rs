//! Training loops: standard, PGD, ensemble, adversarial network, and a
//! generator against a frozen classifier.

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::metrics::{MetricsLog, MetricsRecord};
use super::objective::{discriminator_update, generator_update, NeuralSaddle};
use super::{TrainConfig, TrainerKind};
use crate::attack::{apply_perturbation, fgs_attack, generator_input_batch, least_likely_attack, pgd_attack, AttackSpec, GeneratorInput, LabelMode};
use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, GradientTape, Mode, Model, OptimizerState};
use crate::tensor::Tensor;
use crate::zoo::{build_network_for, ArchitectureId, Family};

/// Mixed into the run seed for the mini-batch order, so batches do not
/// depend on how many random numbers the trainer itself draws.
const SAMPLER_STREAM: u64 = 0x5eed_ba7c_0000_0001;

/// Rows per forward pass when scoring the probe set.
const PROBE_CHUNK: usize = 250;

/// Models, optimizer states and logs at the end of a run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub discriminator: Model<f32>,
    pub generator: Option<Model<f32>>,
    pub d_optimizer: Option<OptimizerState<f32>>,
    pub g_optimizer: Option<OptimizerState<f32>>,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub metrics: MetricsLog,
}

/// The generator's input for a batch: the images, fresh standard normal
/// noise, or one-hot labels, depending on the architecture family.
pub fn generator_input_for(g: &Model<f32>, x: &Tensor<f32>, labels: &[usize], rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let family = g.arch().parse::<ArchitectureId>().ok().map(|id| id.family);
    match family {
        Some(Family::G2) => {
            let mut shape = vec![x.batch()];
            shape.extend_from_slice(g.input_shape());
            let n = shape.iter().product();
            let z = Tensor::new(shape, (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())?;
            generator_input_batch(g, x, GeneratorInput::Noise(&z))
        }
        Some(Family::G3) => generator_input_batch(g, x, GeneratorInput::Labels(labels)),
        _ => generator_input_batch(g, x, GeneratorInput::Image),
    }
}

fn generator_input_shape(id: &ArchitectureId, data: &Dataset) -> Vec<usize> {
    match id.family {
        Family::G0 | Family::G1 => data.image_shape().to_vec(),
        _ => id.default_input_shape(),
    }
}

fn with_iteration(err: Error, iteration: u64) -> Error {
    match err {
        Error::Training { message, .. } => Error::Training { iteration, message },
        other => other,
    }
}

fn check_dataset(config: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.len() < config.batch_size {
        return Err(Error::config(
            "train.batch_size",
            format!("batch size {} exceeds the {} training samples", config.batch_size, data.len()),
        ));
    }
    if data.classes != config.classifier.classes {
        return Err(Error::config(
            "model.classifier",
            format!("{} predicts {} classes but the data has {}", config.classifier, config.classifier.classes, data.classes),
        ));
    }
    Ok(())
}

fn chunked_accuracy(model: &Model<f32>, x: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for start in (0..x.batch()).step_by(PROBE_CHUNK) {
        let end = (start + PROBE_CHUNK).min(x.batch());
        let pred = model.predict(&x.slice_batch(start, end))?.argmax_rows();
        correct += pred.iter().zip(&labels[start..end]).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Applies `f` to consecutive row ranges of at most `PROBE_CHUNK` rows and
/// concatenates the results.
fn chunked(rows: usize, mut f: impl FnMut(usize, usize) -> Result<Tensor<f32>>) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    for start in (0..rows).step_by(PROBE_CHUNK) {
        parts.push(f(start, (start + PROBE_CHUNK).min(rows))?);
    }
    Tensor::concat(&parts.iter().collect::<Vec<_>>())
}

/// Interval averaging, probe accuracies, and the divergence guard.
struct Monitor {
    config: TrainConfig,
    probe_x: Tensor<f32>,
    probe_y: Vec<usize>,
    sums: [f64; 3],
    counts: [u64; 3],
    initial_loss: Option<f64>,
    over: u64,
    log: MetricsLog,
}

impl Monitor {
    fn new(config: &TrainConfig, probe: &Dataset) -> Result<Self> {
        let n = config.monitor.probe_size.min(probe.len());
        let (probe_x, probe_y) = probe.batch(&(0..n).collect::<Vec<_>>())?;
        Ok(Self {
            config: config.clone(),
            probe_x,
            probe_y,
            sums: [0.0; 3],
            counts: [0; 3],
            initial_loss: None,
            over: 0,
            log: MetricsLog::default(),
        })
    }

    /// Records one iteration's losses; `guard` is the loss watched for
    /// divergence.
    fn observe(&mut self, iteration: u64, guard: Option<f64>, values: [Option<f64>; 3]) -> Result<()> {
        for (i, v) in values.into_iter().enumerate() {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::Training {
                        iteration,
                        message: format!("non-finite {} loss", ["clean", "adversarial", "gradient-norm"][i]),
                    });
                }
                self.sums[i] += v;
                self.counts[i] += 1;
            }
        }
        if let Some(loss) = guard {
            let initial = *self.initial_loss.get_or_insert(loss);
            if loss > self.config.monitor.divergence_factor * initial {
                self.over += 1;
                if self.over >= self.config.monitor.divergence_window {
                    return Err(Error::Training {
                        iteration,
                        message: format!(
                            "diverged: loss {loss:.4} above {}x its initial value {initial:.4} for {} consecutive iterations",
                            self.config.monitor.divergence_factor, self.over
                        ),
                    });
                }
            } else {
                self.over = 0;
            }
        }
        Ok(())
    }

    fn take_mean(&mut self, i: usize) -> Option<f64> {
        let m = (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64);
        self.sums[i] = 0.0;
        self.counts[i] = 0;
        m
    }

    /// Called with the number of completed iterations.
    fn after(&mut self, done: u64, d: &Model<f32>, g: Option<&Model<f32>>) -> Result<()> {
        let m = &self.config.monitor;
        let log_loss = done.is_multiple_of(m.loss_every);
        let log_acc = done.is_multiple_of(m.accuracy_every);
        if !log_loss && !log_acc {
            return Ok(());
        }
        let mut r = MetricsRecord {
            iteration: done,
            clean_loss: self.take_mean(0),
            adv_loss: self.take_mean(1),
            grad_phi_norm: self.take_mean(2),
            ..Default::default()
        };
        if log_acc {
            self.probe(&mut r, d, g)?;
        }
        info!(
            "{} iteration {done}: clean loss {:?}, adversarial loss {:?}, probe clean {:?}, fgs {:?}, generator {:?}",
            self.config.kind, r.clean_loss, r.adv_loss, r.probe_clean_acc, r.probe_fgs_acc, r.probe_gen_acc
        );
        self.log.records.push(r);
        Ok(())
    }

    fn probe(&self, r: &mut MetricsRecord, d: &Model<f32>, g: Option<&Model<f32>>) -> Result<()> {
        let d = d.clone().with_mode(Mode::Inference);
        let (x, y, b) = (&self.probe_x, &self.probe_y[..], self.config.pixel_box);
        r.probe_clean_acc = Some(chunked_accuracy(&d, x, y)?);
        if self.config.kind != TrainerKind::GeneratorOnly {
            let eps = if self.config.kind == TrainerKind::AdversarialNetwork { self.config.minimax.eps } else { self.config.attack.eps };
            let spec = AttackSpec::fgs(eps);
            let adv = chunked(x.batch(), |i, j| fgs_attack(&d, &x.slice_batch(i, j), &y[i..j], &spec, &b))?;
            r.probe_fgs_acc = Some(chunked_accuracy(&d, &adv, y)?);
        }
        if let Some(g) = g {
            let g = g.clone().with_mode(Mode::Inference);
            // Fixed noise stream, so probe scores are comparable across intervals.
            let input = generator_input_for(&g, x, y, &mut ChaCha8Rng::seed_from_u64(self.config.seed))?;
            let noise = chunked(x.batch(), |i, j| g.predict(&input.slice_batch(i, j)))?;
            let adv = apply_perturbation(x, &noise, b.to_data_scale(self.config.minimax.eps) as f32, &b)?;
            r.probe_gen_acc = Some(chunked_accuracy(&d, &adv, y)?);
        }
        Ok(())
    }
}

fn finite_or_error(grads: &[f32], iteration: u64) -> Result<()> {
    match grads.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(Error::Training {
            iteration,
            message: format!("non-finite classifier gradient at parameter {i}"),
        }),
        None => Ok(()),
    }
}

/// Clean batch followed by FGS (most-likely label), PGD and least-likely
/// examples from each static model.
fn ensemble_batch(
    x: &Tensor<f32>,
    y: &[usize],
    statics: &[Model<f32>],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let eps = config.attack.eps;
    let fgs = AttackSpec::fgs(eps).with_label_mode(LabelMode::MostLikely);
    let ll = AttackSpec::least_likely(eps);
    let b = &config.pixel_box;
    let mut parts = vec![x.clone()];
    for s in statics {
        parts.push(fgs_attack(s, x, y, &fgs, b)?);
        parts.push(pgd_attack(s, x, y, &config.attack, b, rng)?);
        parts.push(least_likely_attack(s, x, &ll, b)?);
    }
    let labels = y.repeat(parts.len());
    Ok((Tensor::concat(&parts.iter().collect::<Vec<_>>())?, labels))
}

fn train_classifier(config: &TrainConfig, data: &Dataset, probe: Option<&Dataset>, statics: &[Model<f32>]) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(config, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut d: Model<f32> = build_network_for(&config.classifier, data.image_shape(), &mut rng)?;
    let mut opt = OptimizerState::new(config.d_optimizer.clone(), d.param_count()).with_decay_mask(d.decay_mask());
    let mut sampler = BatchSampler::new(data.len(), config.batch_size, config.seed ^ SAMPLER_STREAM);
    let mut monitor = Monitor::new(config, probe.unwrap_or(data))?;
    let statics: Vec<Model<f32>> = statics.iter().map(|s| s.clone().with_mode(Mode::Inference)).collect();
    let mut tape = GradientTape::new();
    for it in 0..config.iterations {
        opt.set_lr(config.d_lr_at(it));
        let (x, y) = data.batch(&sampler.next_batch())?;
        let (input, targets) = match config.kind {
            TrainerKind::AdversarialPgd => (pgd_attack(&d, &x, &y, &config.attack_at(it), &config.pixel_box, &mut rng)?, y),
            TrainerKind::Ensemble => ensemble_batch(&x, &y, &statics, config, &mut rng)?,
            _ => (x, y),
        };
        let logits = d.forward(&input, &mut tape)?;
        let (loss, seed) = softmax_cross_entropy(&logits, &targets)?;
        let mut grads = d.zero_grads();
        d.backward_params(&tape, &seed, &mut grads)?;
        finite_or_error(&grads, it)?;
        opt.apply(d.params_mut(), &grads)?;
        d.commit_batch_stats(&tape);

        let loss = loss as f64;
        match config.kind {
            TrainerKind::AdversarialPgd => monitor.observe(it, Some(loss), [None, Some(loss), None])?,
            TrainerKind::Ensemble if !statics.is_empty() => {
                let b = config.batch_size;
                let (clean, _) = softmax_cross_entropy(&logits.slice_batch(0, b), &targets[..b])?;
                let (adv, _) = softmax_cross_entropy(&logits.slice_batch(b, logits.batch()), &targets[b..])?;
                monitor.observe(it, Some(clean as f64), [Some(clean as f64), Some(adv as f64), None])?
            }
            _ => monitor.observe(it, Some(loss), [Some(loss), None, None])?,
        }
        monitor.after(it + 1, &d, None)?;
    }
    Ok(TrainOutcome {
        config: config.clone(),
        discriminator: d,
        generator: None,
        d_optimizer: Some(opt),
        g_optimizer: None,
        iteration: config.iterations,
        rng,
        metrics: monitor.log,
    })
}

fn expect_kind(config: &TrainConfig, kind: TrainerKind) -> Result<()> {
    if config.kind != kind {
        return Err(Error::config("train.kind", format!("expected {kind}, got {}", config.kind)));
    }
    Ok(())
}

/// Mini-batch SGD on the clean cross-entropy.
pub fn train_standard(config: &TrainConfig, data: &Dataset, probe: Option<&Dataset>) -> Result<TrainOutcome> {
    expect_kind(config, TrainerKind::Standard)?;
    train_classifier(config, data, probe, &[])
}

/// Trains on PGD examples against the current classifier only.
pub fn train_adv_pgd(config: &TrainConfig, data: &Dataset, probe: Option<&Dataset>) -> Result<TrainOutcome> {
    expect_kind(config, TrainerKind::AdversarialPgd)?;
    train_classifier(config, data, probe, &[])
}

/// Trains on clean batches enlarged with adversarial examples from frozen
/// static models.
pub fn train_ensemble(config: &TrainConfig, data: &Dataset, probe: Option<&Dataset>, statics: &[Model<f32>]) -> Result<TrainOutcome> {
    expect_kind(config, TrainerKind::Ensemble)?;
    for s in statics {
        if s.input_shape() != data.image_shape() {
            return Err(Error::config(
                "train.static_models",
                format!("static model {} takes {:?}, data is {:?}", s.arch(), s.input_shape(), data.image_shape()),
            ));
        }
    }
    train_classifier(config, data, probe, statics)
}

/// Joint training: per outer iteration, `g_updates_per_d` generator updates
/// of `g_steps_per_batch` ascent steps each, then one regularized classifier
/// update on the same mini-batch.
pub fn train_adversarial_network(config: &TrainConfig, data: &Dataset, probe: Option<&Dataset>) -> Result<TrainOutcome> {
    expect_kind(config, TrainerKind::AdversarialNetwork)?;
    config.validate()?;
    check_dataset(config, data)?;
    let mm = &config.minimax;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut d: Model<f32> = build_network_for(&config.classifier, data.image_shape(), &mut rng)?;
    let mut g: Model<f32> = build_network_for(&mm.generator, &generator_input_shape(&mm.generator, data), &mut rng)?;
    let mut d_opt = OptimizerState::new(config.d_optimizer.clone(), d.param_count()).with_decay_mask(d.decay_mask());
    let mut g_opt = OptimizerState::new(mm.g_optimizer.clone(), g.param_count()).with_decay_mask(g.decay_mask());
    let mut sampler = BatchSampler::new(data.len(), config.batch_size, config.seed ^ SAMPLER_STREAM);
    let mut monitor = Monitor::new(config, probe.unwrap_or(data))?;
    for it in 0..config.iterations {
        d_opt.set_lr(config.d_lr_at(it));
        let (mut x, mut y) = data.batch(&sampler.next_batch())?;
        let mut g_in = generator_input_for(&g, &x, &y, &mut rng)?;
        for u in 0..mm.g_updates_per_d {
            if u > 0 && mm.fresh_batch_per_g_update {
                (x, y) = data.batch(&sampler.next_batch())?;
                g_in = generator_input_for(&g, &x, &y, &mut rng)?;
            }
            let mut game = NeuralSaddle::new(&mut d, &mut g, &x, &y, g_in.clone(), mm.lambda, mm.eps, config.pixel_box);
            generator_update(&mut game, mm.g_steps_per_batch, &mut g_opt).map_err(|e| with_iteration(e, it))?;
        }
        let mut game = NeuralSaddle::new(&mut d, &mut g, &x, &y, g_in, mm.lambda, mm.eps, config.pixel_box);
        let step = discriminator_update(&mut game, mm.gamma, mm.h(), &mut d_opt).map_err(|e| with_iteration(e, it))?;
        let (clean, adv) = (game.clean_loss, game.adv_loss);
        monitor.observe(it, Some(clean), [Some(clean), Some(adv), Some(step.grad_phi_norm)])?;
        monitor.after(it + 1, &d, Some(&g))?;
    }
    Ok(TrainOutcome {
        config: config.clone(),
        discriminator: d,
        generator: Some(g),
        d_optimizer: Some(d_opt),
        g_optimizer: Some(g_opt),
        iteration: config.iterations,
        rng,
        metrics: monitor.log,
    })
}

/// Gradient ascent of a fresh generator on the adversarial loss of a frozen
/// classifier, evaluated in inference mode.
pub fn train_generator_vs_fixed(config: &TrainConfig, data: &Dataset, probe: Option<&Dataset>, fixed: &Model<f32>) -> Result<TrainOutcome> {
    expect_kind(config, TrainerKind::GeneratorOnly)?;
    config.validate()?;
    if fixed.input_shape() != data.image_shape() {
        return Err(Error::config(
            "train.target",
            format!("classifier {} takes {:?}, data is {:?}", fixed.arch(), fixed.input_shape(), data.image_shape()),
        ));
    }
    let mm = &config.minimax;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut d = fixed.clone().with_mode(Mode::Inference);
    let mut g: Model<f32> = build_network_for(&mm.generator, &generator_input_shape(&mm.generator, data), &mut rng)?;
    let mut g_opt = OptimizerState::new(mm.g_optimizer.clone(), g.param_count()).with_decay_mask(g.decay_mask());
    let mut sampler = BatchSampler::new(data.len(), config.batch_size, config.seed ^ SAMPLER_STREAM);
    let mut monitor = Monitor::new(config, probe.unwrap_or(data))?;
    for it in 0..config.iterations {
        let (x, y) = data.batch(&sampler.next_batch())?;
        let g_in = generator_input_for(&g, &x, &y, &mut rng)?;
        let mut game = NeuralSaddle::new(&mut d, &mut g, &x, &y, g_in, 1.0, mm.eps, config.pixel_box);
        generator_update(&mut game, mm.g_steps_per_batch, &mut g_opt).map_err(|e| with_iteration(e, it))?;
        let adv = game.adv_loss;
        monitor.observe(it, None, [None, Some(adv), None])?;
        monitor.after(it + 1, &d, Some(&g))?;
    }
    Ok(TrainOutcome {
        config: config.clone(),
        discriminator: d,
        generator: Some(g),
        d_optimizer: None,
        g_optimizer: Some(g_opt),
        iteration: config.iterations,
        rng,
        metrics: monitor.log,
    })
}

/// Dispatches on `config.kind`. `statics` feeds ensemble training and
/// `target` the generator-only run.
pub fn train(config: &TrainConfig, data: &Dataset, probe: Option<&Dataset>, statics: &[Model<f32>], target: Option<&Model<f32>>) -> Result<TrainOutcome> {
    match config.kind {
        TrainerKind::Standard => train_standard(config, data, probe),
        TrainerKind::AdversarialPgd => train_adv_pgd(config, data, probe),
        TrainerKind::Ensemble => train_ensemble(config, data, probe, statics),
        TrainerKind::AdversarialNetwork => train_adversarial_network(config, data, probe),
        TrainerKind::GeneratorOnly => {
            let target = target.ok_or_else(|| Error::config("train.target", "generator-only training needs a target classifier"))?;
            train_generator_vs_fixed(config, data, probe, target)
        }
    }
}
