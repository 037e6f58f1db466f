//! Experiment configuration as flat `section.key = value` text, and the
//! named run presets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attack::{AttackFamily, AttackSpec, LabelMode, PixelBox};
use crate::data::{data_dir, load_mnist, make_synthetic, synthetic::parse_synthetic, Dataset, Split};
use crate::error::{Error, Result};
use crate::game::{HvpMode, StepSizes};
use crate::minimax::{TrainConfig, TrainerKind};
use crate::nn::OptimizerRule;
use crate::zoo::{ArchitectureId, Family};

/// Default ratio between full-scale and desk-scale iteration counts.
pub const DEFAULT_DIVISOR: u64 = 20;

/// Full-scale schedule shared by the MNIST presets.
pub const FULL_ITERATIONS: u64 = 200_000;
pub const FULL_LR_DROP_AT: u64 = 100_000;

/// File the expanded configuration is written to inside a run directory.
pub const CONFIG_FILE_NAME: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// `mnist` (IDX files under the data directory) or a synthetic spec
    /// such as `synthetic:tiny-images:n=500:seed=0`.
    pub source: String,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "mnist".into(),
            train_limit: Some(10_000),
            test_limit: Some(2_000),
        }
    }
}

impl DataConfig {
    fn load_split(&self, split: Split) -> Result<Dataset> {
        let limit = match split {
            Split::Train => self.train_limit,
            Split::Test => self.test_limit,
        };
        if self.source == "mnist" {
            return load_mnist(&data_dir(), split, limit);
        }
        let (kind, n, seed) = parse_synthetic(&self.source)?;
        // The test split is an independent draw from the same generator.
        let seed = if split == Split::Test { seed.wrapping_add(1) } else { seed };
        let ds = make_synthetic(kind, n, seed)?;
        Ok(match limit {
            Some(l) => ds.take(l),
            None => ds,
        })
    }

    pub fn load_train(&self) -> Result<Dataset> {
        self.load_split(Split::Train)
    }

    pub fn load_test(&self) -> Result<Dataset> {
        self.load_split(Split::Test)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// `(id, checkpoint)` pairs of evaluated models.
    pub defenses: Vec<(String, PathBuf)>,
    /// `(id, checkpoint)` pairs of transfer-attack sources.
    pub surrogates: Vec<(String, PathBuf)>,
    pub attacks: Vec<AttackFamily>,
    pub eps: f64,
    pub seed: u64,
    /// Generator checkpoint for white-box generator cells.
    pub generator: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            defenses: Vec::new(),
            surrogates: Vec::new(),
            attacks: vec![AttackFamily::Fgs, AttackFamily::Pgd],
            eps: 0.3,
            seed: 0,
            generator: None,
        }
    }
}

impl EvalConfig {
    pub fn specs(&self) -> Vec<AttackSpec> {
        self.attacks
            .iter()
            .map(|f| match f {
                AttackFamily::Fgs => AttackSpec::fgs(self.eps),
                AttackFamily::Pgd => AttackSpec::pgd(self.eps),
                AttackFamily::LeastLikely => AttackSpec::least_likely(self.eps),
                AttackFamily::Generator => AttackSpec::generator(self.eps, None),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GameConfig {
    /// Row-major coupling matrix with `theta.len()` rows.
    pub a: Vec<f64>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub eta_d: f64,
    pub eta_g: f64,
    pub gamma: f64,
    pub steps: usize,
    pub hvp: HvpMode,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            a: vec![1.0],
            theta: vec![1.0],
            phi: vec![1.0],
            eta_d: 0.1,
            eta_g: 0.1,
            gamma: 0.2,
            steps: 2000,
            hvp: HvpMode::Exact,
        }
    }
}

impl GameConfig {
    pub fn step_sizes(&self) -> StepSizes {
        StepSizes::new(self.eta_d, self.eta_g, self.gamma)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub out: PathBuf,
    pub divisor: u64,
    /// Full-scale iteration budget; the run uses `full_iterations / divisor`.
    pub full_iterations: u64,
    /// Full-scale learning-rate drop points, scaled like the budget.
    pub full_lr_drop_at: Vec<u64>,
    /// Full-scale length of the adversarial-PGD budget ramp, scaled like the budget.
    pub full_eps_warmup: u64,
    pub jobs: usize,
    pub data: DataConfig,
    /// Iteration count and drop points are derived; see [`ExperimentConfig::resolved_train`].
    pub train: TrainConfig,
    /// Pre-trained models whose attacks augment ensemble training.
    pub static_models: Vec<PathBuf>,
    /// Fixed classifier a generator-only run attacks.
    pub target: Option<PathBuf>,
    pub eval: EvalConfig,
    pub game: GameConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            out: PathBuf::from("runs/run"),
            divisor: DEFAULT_DIVISOR,
            full_iterations: FULL_ITERATIONS,
            full_lr_drop_at: vec![FULL_LR_DROP_AT],
            full_eps_warmup: 0,
            jobs: 1,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            static_models: Vec::new(),
            target: None,
            eval: EvalConfig::default(),
            game: GameConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 5] = [
    "mnist-standard-desk",
    "mnist-pgd-desk",
    "mnist-advnet-desk",
    "mnist-ensemble-desk",
    "mnist-genattack-desk",
];

/// Full-scale length of the adversarial-PGD budget ramp in the desk preset.
pub const DESK_EPS_WARMUP: u64 = 40_000;

/// Generator width used by the desk presets.
pub const DESK_GENERATOR_WIDTH: usize = 16;

impl ExperimentConfig {
    /// Named MNIST run at desk scale (10k training images, iteration budget
    /// divided by [`DEFAULT_DIVISOR`]).
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self {
            name: name.into(),
            out: PathBuf::from("runs").join(name),
            ..Self::default()
        };
        let t = &mut c.train;
        t.classifier = ArchitectureId::new(Family::D1);
        t.batch_size = 64;
        t.d_optimizer = OptimizerRule::sgd(0.01, 0.9, 1e-4);
        t.attack = AttackSpec::pgd(0.3);
        t.minimax.generator = ArchitectureId::new(Family::G0).with_width(DESK_GENERATOR_WIDTH);
        match name {
            "mnist-standard-desk" => t.kind = TrainerKind::Standard,
            "mnist-pgd-desk" => {
                t.kind = TrainerKind::AdversarialPgd;
                c.full_eps_warmup = DESK_EPS_WARMUP;
            }
            "mnist-advnet-desk" => {
                t.kind = TrainerKind::AdversarialNetwork;
                t.d_optimizer = OptimizerRule::sgd(0.01, 0.9, 1e-5);
                let m = &mut t.minimax;
                m.lambda = 1.0;
                m.gamma = 0.01;
                m.eps = 0.3;
                m.g_optimizer = OptimizerRule::adam(0.002, 0.5, 0.999, 1e-5);
                m.g_updates_per_d = 5;
                m.g_steps_per_batch = 5;
            }
            "mnist-ensemble-desk" => {
                t.kind = TrainerKind::Ensemble;
                t.attack = AttackSpec::pgd(0.3).with_label_mode(LabelMode::MostLikely);
            }
            "mnist-genattack-desk" => {
                t.kind = TrainerKind::GeneratorOnly;
                t.minimax.g_optimizer = OptimizerRule::sgd(0.01, 0.9, 1e-5);
            }
            other => {
                return Err(Error::config(
                    "run.preset",
                    format!("unknown preset `{other}`; expected one of {}", PRESETS.join(", ")),
                ))
            }
        }
        Ok(c)
    }

    fn scaled(&self, v: u64) -> u64 {
        v.div_ceil(self.divisor)
    }

    /// Training configuration with the divided schedule applied.
    pub fn resolved_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.iterations = self.scaled(self.full_iterations);
        t.lr_drop_at = self.full_lr_drop_at.iter().map(|&v| self.scaled(v)).collect();
        t.eps_warmup = self.scaled(self.full_eps_warmup);
        t
    }

    pub fn validate(&self) -> Result<()> {
        if self.divisor == 0 {
            return Err(Error::config("run.divisor", "must be >= 1"));
        }
        if self.jobs == 0 {
            return Err(Error::config("run.jobs", "must be >= 1"));
        }
        self.resolved_train().validate()
    }

    /// Overrides fields from `key = value` lines. Blank lines and `#`
    /// comments are skipped; the first bad key or value is reported.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "run.name" => self.name = value.into(),
            "run.out" => self.out = PathBuf::from(value),
            "run.divisor" => self.divisor = num(key, value)?,
            "run.jobs" => self.jobs = num(key, value)?,
            "run.seed" => t.seed = num(key, value)?,
            "data.source" => self.data.source = value.into(),
            "data.train_limit" => self.data.train_limit = opt_num(key, value)?,
            "data.test_limit" => self.data.test_limit = opt_num(key, value)?,
            "model.classifier" => t.classifier = parse_arch(key, value)?,
            "model.generator" => t.minimax.generator = parse_arch(key, value)?,
            "train.kind" => t.kind = value.parse()?,
            "train.iterations_full" => self.full_iterations = num(key, value)?,
            "train.lr_drop_at_full" => self.full_lr_drop_at = list(key, value)?,
            "train.eps_warmup_full" => self.full_eps_warmup = num(key, value)?,
            "train.lr_drop_factor" => t.lr_drop_factor = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.static_models" => self.static_models = split_list(value).map(PathBuf::from).collect(),
            "train.target" => self.target = (!value.is_empty()).then(|| PathBuf::from(value)),
            "train.loss_every" => t.monitor.loss_every = num(key, value)?,
            "train.accuracy_every" => t.monitor.accuracy_every = num(key, value)?,
            "train.probe_size" => t.monitor.probe_size = num(key, value)?,
            "train.divergence_factor" => t.monitor.divergence_factor = num(key, value)?,
            "train.divergence_window" => t.monitor.divergence_window = num(key, value)?,
            "train.box_lower" => t.pixel_box.lower = num(key, value)?,
            "train.box_upper" => t.pixel_box.upper = num(key, value)?,
            "minimax.lambda" => t.minimax.lambda = num(key, value)?,
            "minimax.gamma" => t.minimax.gamma = num(key, value)?,
            "minimax.eps" => t.minimax.eps = num(key, value)?,
            "minimax.g_steps_per_batch" => t.minimax.g_steps_per_batch = num(key, value)?,
            "minimax.g_updates_per_d" => t.minimax.g_updates_per_d = num(key, value)?,
            "minimax.h" => t.minimax.h = opt_num(key, value)?,
            "minimax.fresh_batch_per_g_update" => t.minimax.fresh_batch_per_g_update = num(key, value)?,
            "attack.family" => t.attack.family = value.parse()?,
            "attack.eps" => t.attack.eps = num(key, value)?,
            "attack.delta" => t.attack.delta = num(key, value)?,
            "attack.steps" => t.attack.steps = num(key, value)?,
            "attack.label_mode" => t.attack.label_mode = value.parse()?,
            "attack.random_start" => t.attack.random_start = num(key, value)?,
            "attack.generator_ckpt" => t.attack.generator_ckpt = (!value.is_empty()).then(|| value.to_string()),
            "eval.defenses" => self.eval.defenses = named_paths(key, value)?,
            "eval.surrogates" => self.eval.surrogates = named_paths(key, value)?,
            "eval.attacks" => self.eval.attacks = split_list(value).map(str::parse).collect::<Result<_>>()?,
            "eval.eps" => self.eval.eps = num(key, value)?,
            "eval.seed" => self.eval.seed = num(key, value)?,
            "eval.generator" => self.eval.generator = (!value.is_empty()).then(|| PathBuf::from(value)),
            "game.a" => self.game.a = list(key, value)?,
            "game.theta" => self.game.theta = list(key, value)?,
            "game.phi" => self.game.phi = list(key, value)?,
            "game.eta_d" => self.game.eta_d = num(key, value)?,
            "game.eta_g" => self.game.eta_g = num(key, value)?,
            "game.gamma" => self.game.gamma = num(key, value)?,
            "game.steps" => self.game.steps = num(key, value)?,
            "game.hvp" => self.game.hvp = value.parse()?,
            _ => {
                if let Some(field) = key.strip_prefix("train.") {
                    return set_optimizer(&mut t.d_optimizer, key, field, value);
                }
                if let Some(field) = key.strip_prefix("minimax.g_") {
                    return set_optimizer(&mut t.minimax.g_optimizer, key, field, value);
                }
                return Err(Error::config(key, "unknown key"));
            }
        }
        Ok(())
    }

    /// Every key, one per line, in a form [`ExperimentConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &t.minimax;
        let a = &t.attack;
        let e = &self.eval;
        let g = &self.game;
        let opt_s = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
        let path_s = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("run.name", self.name.clone());
        kv("run.out", self.out.display().to_string());
        kv("run.divisor", self.divisor.to_string());
        kv("run.jobs", self.jobs.to_string());
        kv("run.seed", t.seed.to_string());
        kv("data.source", self.data.source.clone());
        kv("data.train_limit", opt_s(self.data.train_limit));
        kv("data.test_limit", opt_s(self.data.test_limit));
        kv("model.classifier", t.classifier.to_string());
        kv("model.generator", m.generator.to_string());
        kv("train.kind", t.kind.to_string());
        kv("train.iterations_full", self.full_iterations.to_string());
        kv("train.lr_drop_at_full", join(&self.full_lr_drop_at));
        kv("train.eps_warmup_full", self.full_eps_warmup.to_string());
        kv("train.lr_drop_factor", t.lr_drop_factor.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        for (k, v) in optimizer_fields(&t.d_optimizer) {
            kv(&format!("train.{k}"), v);
        }
        kv("train.static_models", self.static_models.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","));
        kv("train.target", path_s(&self.target));
        kv("train.loss_every", t.monitor.loss_every.to_string());
        kv("train.accuracy_every", t.monitor.accuracy_every.to_string());
        kv("train.probe_size", t.monitor.probe_size.to_string());
        kv("train.divergence_factor", t.monitor.divergence_factor.to_string());
        kv("train.divergence_window", t.monitor.divergence_window.to_string());
        kv("train.box_lower", t.pixel_box.lower.to_string());
        kv("train.box_upper", t.pixel_box.upper.to_string());
        kv("minimax.lambda", m.lambda.to_string());
        kv("minimax.gamma", m.gamma.to_string());
        kv("minimax.eps", m.eps.to_string());
        kv("minimax.g_steps_per_batch", m.g_steps_per_batch.to_string());
        kv("minimax.g_updates_per_d", m.g_updates_per_d.to_string());
        kv("minimax.h", m.h.map(|h| h.to_string()).unwrap_or_default());
        kv("minimax.fresh_batch_per_g_update", m.fresh_batch_per_g_update.to_string());
        for (k, v) in optimizer_fields(&m.g_optimizer) {
            kv(&format!("minimax.g_{k}"), v);
        }
        kv("attack.family", a.family.to_string());
        kv("attack.eps", a.eps.to_string());
        kv("attack.delta", a.delta.to_string());
        kv("attack.steps", a.steps.to_string());
        kv("attack.label_mode", a.label_mode.as_str().into());
        kv("attack.random_start", a.random_start.to_string());
        kv("attack.generator_ckpt", a.generator_ckpt.clone().unwrap_or_default());
        let pairs = |v: &[(String, PathBuf)]| v.iter().map(|(id, p)| format!("{id}={}", p.display())).collect::<Vec<_>>().join(",");
        kv("eval.defenses", pairs(&e.defenses));
        kv("eval.surrogates", pairs(&e.surrogates));
        kv("eval.attacks", e.attacks.iter().map(|f| f.as_str()).collect::<Vec<_>>().join(","));
        kv("eval.eps", e.eps.to_string());
        kv("eval.seed", e.seed.to_string());
        kv("eval.generator", path_s(&e.generator));
        kv("game.a", join(&g.a));
        kv("game.theta", join(&g.theta));
        kv("game.phi", join(&g.phi));
        kv("game.eta_d", g.eta_d.to_string());
        kv("game.eta_g", g.eta_g.to_string());
        kv("game.gamma", g.gamma.to_string());
        kv("game.steps", g.steps.to_string());
        kv("game.hvp", g.hvp.as_str().into());
        s
    }

    /// Writes [`ExperimentConfig::to_text`] to `dir/config.txt`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE_NAME);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}` as {}", std::any::type_name::<T>())))
}

fn opt_num<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    split_list(value).map(|v| num(key, v)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_arch(key: &str, value: &str) -> Result<ArchitectureId> {
    value.parse().map_err(|e: Error| Error::config(key, e.to_string()))
}

fn named_paths(key: &str, value: &str) -> Result<Vec<(String, PathBuf)>> {
    split_list(value)
        .map(|item| {
            item.split_once('=')
                .map(|(id, p)| (id.trim().to_string(), PathBuf::from(p.trim())))
                .ok_or_else(|| Error::config(key, format!("expected `id=path`, got `{item}`")))
        })
        .collect()
}

fn optimizer_fields(rule: &OptimizerRule) -> Vec<(&'static str, String)> {
    match rule {
        OptimizerRule::SgdMomentum { lr, momentum, weight_decay } => vec![
            ("optimizer", "sgd".into()),
            ("lr", lr.to_string()),
            ("momentum", momentum.to_string()),
            ("weight_decay", weight_decay.to_string()),
        ],
        OptimizerRule::Adam {
            lr,
            beta1,
            beta2,
            epsilon: _,
            weight_decay,
        } => vec![
            ("optimizer", "adam".into()),
            ("lr", lr.to_string()),
            ("beta1", beta1.to_string()),
            ("beta2", beta2.to_string()),
            ("weight_decay", weight_decay.to_string()),
        ],
    }
}

fn set_optimizer(rule: &mut OptimizerRule, key: &str, field: &str, value: &str) -> Result<()> {
    let (lr, wd) = (rule.lr(), rule.weight_decay());
    match (field, &mut *rule) {
        ("optimizer", _) => {
            *rule = match value {
                "sgd" => OptimizerRule::sgd(lr, 0.9, wd),
                "adam" => OptimizerRule::adam(lr, 0.9, 0.999, wd),
                other => return Err(Error::config(key, format!("expected sgd or adam, got `{other}`"))),
            }
        }
        ("lr", OptimizerRule::SgdMomentum { lr, .. } | OptimizerRule::Adam { lr, .. }) => *lr = num(key, value)?,
        ("weight_decay", OptimizerRule::SgdMomentum { weight_decay, .. } | OptimizerRule::Adam { weight_decay, .. }) => {
            *weight_decay = num(key, value)?
        }
        ("momentum", OptimizerRule::SgdMomentum { momentum, .. }) => *momentum = num(key, value)?,
        ("beta1", OptimizerRule::Adam { beta1, .. }) => *beta1 = num(key, value)?,
        ("beta2", OptimizerRule::Adam { beta2, .. }) => *beta2 = num(key, value)?,
        ("momentum" | "beta1" | "beta2", _) => return Err(Error::config(key, "not a parameter of the selected optimizer")),
        _ => return Err(Error::config(key, "unknown key")),
    }
    Ok(())
}

/// The pixel box of a configuration, validated.
pub fn pixel_box(c: &ExperimentConfig) -> Result<PixelBox> {
    PixelBox::new(c.train.pixel_box.lower, c.train.pixel_box.upper)
}
