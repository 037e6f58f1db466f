//! Joint classifier/generator training on the regularized minimax objective,
//! plus the baseline trainers it is compared against.

mod metrics;
mod objective;
mod trainers;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use metrics::{MetricsLog, MetricsRecord};
pub use objective::{
    discriminator_update, generator_update, hvp_finite_difference, minimax_objective, BilinearObjective, DiscriminatorStep, NeuralSaddle,
    SaddleObjective,
};
pub use trainers::{
    generator_input_for, train, train_adv_pgd, train_adversarial_network, train_ensemble, train_generator_vs_fixed, train_standard, TrainOutcome,
};

use crate::attack::{AttackSpec, PixelBox};
use crate::error::{Error, Result};
use crate::nn::OptimizerRule;
use crate::zoo::{ArchitectureId, Family};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainerKind {
    Standard,
    AdversarialPgd,
    Ensemble,
    AdversarialNetwork,
    GeneratorOnly,
}

impl TrainerKind {
    pub const ALL: [TrainerKind; 5] = [
        Self::Standard,
        Self::AdversarialPgd,
        Self::Ensemble,
        Self::AdversarialNetwork,
        Self::GeneratorOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::AdversarialPgd => "adversarial-pgd",
            Self::Ensemble => "ensemble",
            Self::AdversarialNetwork => "adversarial-network",
            Self::GeneratorOnly => "generator-only",
        }
    }

    /// Whether the run trains a generator.
    pub fn has_generator(self) -> bool {
        matches!(self, Self::AdversarialNetwork | Self::GeneratorOnly)
    }
}

impl fmt::Display for TrainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("train.kind", format!("unknown trainer kind {s:?}")))
    }
}

/// Hyperparameters of the generator and of the regularized game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimaxConfig {
    /// Weight of the adversarial term.
    pub lambda: f64,
    /// Weight of the gradient-norm regularizer.
    pub gamma: f64,
    /// Perturbation budget on the [0, 1] pixel scale.
    pub eps: f64,
    pub g_steps_per_batch: usize,
    pub g_updates_per_d: usize,
    /// Finite-difference step; `None` means one tenth of the generator's
    /// learning rate.
    pub h: Option<f64>,
    pub g_optimizer: OptimizerRule,
    pub generator: ArchitectureId,
    /// Draw a new mini-batch for every generator update after the first.
    pub fresh_batch_per_g_update: bool,
}

impl Default for MinimaxConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 0.01,
            eps: 0.3,
            g_steps_per_batch: 5,
            g_updates_per_d: 1,
            h: None,
            g_optimizer: OptimizerRule::sgd(0.01, 0.9, 1e-5),
            generator: ArchitectureId::new(Family::G0),
            fresh_batch_per_g_update: false,
        }
    }
}

impl MinimaxConfig {
    pub fn h(&self) -> f64 {
        self.h.unwrap_or(self.g_optimizer.lr() / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("minimax.lambda", self.lambda >= 0.0, "must be >= 0"),
            ("minimax.gamma", self.gamma >= 0.0, "must be >= 0"),
            ("minimax.eps", self.eps >= 0.0 && self.eps.is_finite(), "must be a finite value >= 0"),
            ("minimax.h", self.h() > 0.0 && self.h().is_finite(), "must be > 0"),
            ("minimax.g_lr", self.g_optimizer.lr() > 0.0, "must be > 0"),
            ("minimax.g_steps_per_batch", self.g_steps_per_batch >= 1, "must be >= 1"),
            ("minimax.g_updates_per_d", self.g_updates_per_d >= 1, "must be >= 1"),
        ];
        for (key, ok, msg) in checks {
            if !ok {
                return Err(Error::config(key, msg));
            }
        }
        if !self.generator.family.is_generator() {
            return Err(Error::config("minimax.generator", format!("{} is not a generator", self.generator)));
        }
        Ok(())
    }
}

/// Logging cadence and divergence guard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub loss_every: u64,
    pub accuracy_every: u64,
    pub probe_size: usize,
    /// Abort when the clean loss exceeds this multiple of its first value...
    pub divergence_factor: f64,
    /// ...for this many consecutive iterations.
    pub divergence_window: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            loss_every: 100,
            accuracy_every: 1000,
            probe_size: 1000,
            divergence_factor: 10.0,
            divergence_window: 1000,
        }
    }
}

/// Everything one training run needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: TrainerKind,
    pub classifier: ArchitectureId,
    pub iterations: u64,
    pub batch_size: usize,
    pub d_optimizer: OptimizerRule,
    /// Iterations at which the classifier's learning rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drop_at: Vec<u64>,
    pub lr_drop_factor: f64,
    /// Attack used to build training examples (PGD and ensemble training).
    pub attack: AttackSpec,
    /// Iterations over which the adversarial-PGD training budget ramps
    /// linearly from 0 to `attack.eps`; 0 disables the ramp.
    #[serde(default)]
    pub eps_warmup: u64,
    pub minimax: MinimaxConfig,
    pub pixel_box: PixelBox,
    pub seed: u64,
    pub monitor: MonitorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: TrainerKind::Standard,
            classifier: ArchitectureId::new(Family::D1),
            iterations: 10_000,
            batch_size: 64,
            d_optimizer: OptimizerRule::sgd(0.01, 0.9, 1e-4),
            lr_drop_at: vec![5_000],
            lr_drop_factor: 0.1,
            attack: AttackSpec::pgd(0.3),
            eps_warmup: 0,
            minimax: MinimaxConfig::default(),
            pixel_box: PixelBox::default(),
            seed: 0,
            monitor: MonitorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.d_optimizer.lr() > 0.0) {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if self.classifier.family.is_generator() {
            return Err(Error::config("model.classifier", format!("{} is a generator", self.classifier)));
        }
        if !(self.lr_drop_factor > 0.0) {
            return Err(Error::config("train.lr_drop_factor", "must be > 0"));
        }
        if self.monitor.loss_every == 0 || self.monitor.accuracy_every == 0 {
            return Err(Error::config("train.log_every", "logging intervals must be >= 1"));
        }
        self.attack.validate()?;
        if self.kind.has_generator() {
            self.minimax.validate()?;
        }
        Ok(())
    }

    /// Training attack at `iteration`: budget and step size scaled by
    /// `iteration / eps_warmup` during the ramp.
    pub fn attack_at(&self, iteration: u64) -> AttackSpec {
        let mut spec = self.attack.clone();
        if iteration < self.eps_warmup {
            let f = iteration as f64 / self.eps_warmup as f64;
            spec.eps *= f;
            spec.delta *= f;
        }
        spec
    }

    /// Classifier learning rate in effect at `iteration`.
    pub fn d_lr_at(&self, iteration: u64) -> f64 {
        let drops = self.lr_drop_at.iter().filter(|&&at| iteration >= at).count();
        self.d_optimizer.lr() * self.lr_drop_factor.powi(drops as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_warmup_ramps_budget_and_step() {
        let c = TrainConfig { eps_warmup: 100, ..Default::default() };
        let full = c.attack.clone();
        let start = c.attack_at(0);
        assert_eq!((start.eps, start.delta), (0.0, 0.0));
        start.validate().unwrap();
        let mid = c.attack_at(25);
        assert!((mid.eps - full.eps / 4.0).abs() < 1e-15 && (mid.delta - full.delta / 4.0).abs() < 1e-15);
        assert_eq!(c.attack_at(100), full);
        assert_eq!(TrainConfig::default().attack_at(0), full);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in TrainerKind::ALL {
            assert_eq!(k.as_str().parse::<TrainerKind>().unwrap(), k);
        }
        assert!(matches!("gan".parse::<TrainerKind>(), Err(Error::Config { .. })));
    }

    #[test]
    fn default_h_is_tenth_of_generator_step() {
        let c = MinimaxConfig::default();
        assert!((c.h() - 0.001).abs() < 1e-15);
        assert_eq!(MinimaxConfig { h: Some(0.5), ..c }.h(), 0.5);
    }

    #[test]
    fn invalid_minimax_values_are_rejected() {
        let bad = [
            MinimaxConfig { lambda: -1.0, ..Default::default() },
            MinimaxConfig { gamma: -0.1, ..Default::default() },
            MinimaxConfig { h: Some(0.0), ..Default::default() },
            MinimaxConfig { g_optimizer: OptimizerRule::sgd(0.0, 0.9, 0.0), ..Default::default() },
            MinimaxConfig { generator: ArchitectureId::new(Family::D1), ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config { .. })), "{c:?}");
        }
        MinimaxConfig::default().validate().unwrap();
    }

    #[test]
    fn learning_rate_schedule_drops_by_factor() {
        let c = TrainConfig::default();
        assert_eq!(c.d_lr_at(0), 0.01);
        assert_eq!(c.d_lr_at(4_999), 0.01);
        assert!((c.d_lr_at(5_000) - 0.001).abs() < 1e-15);
    }
}
